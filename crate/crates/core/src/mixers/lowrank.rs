use serde::{Deserialize, Serialize};

use super::check_shape;
use crate::error::{Error, Result};
use crate::tensor::{matmul, Matrix};

/// Two-layer ReLU feed-forward map on rows: `z = relu(y·W_up)·W_down`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedLowRankParams {
    /// `D × U`
    pub w_up: Matrix,
    /// `U × D`
    pub w_down: Matrix,
}

impl MaskedLowRankParams {
    pub fn hidden(&self) -> usize {
        self.w_up.cols()
    }

    fn validate(&self, width: usize) -> Result<()> {
        if self.hidden() == 0 {
            return Err(Error::invalid("masked low-rank mixer needs a hidden width ≥ 1"));
        }
        check_shape("masked low-rank w_up", &self.w_up, width, self.hidden())?;
        check_shape("masked low-rank w_down", &self.w_down, self.hidden(), width)
    }
}

/// The `D × D` matrix the FFN applies to row `row` of `y`:
/// `M = W_downᵀ · diag(mask) · W_upᵀ` with `mask_u = [ (y_row·W_up)_u > 0 ]`,
/// so that `M · y_rowᵀ` is the FFN output for that row.
pub fn build_masked_lowrank_mixer(
    params: &MaskedLowRankParams,
    y: &Matrix,
    row: usize,
) -> Result<Matrix> {
    params.validate(y.cols())?;
    if row >= y.rows() {
        return Err(Error::invalid(format!("row {row} out of range ({} rows)", y.rows())));
    }
    let pre = matmul(&Matrix::row_vector(y.row(row)), &params.w_up)?;
    let (d, u) = params.w_up.shape();
    let mut m = Matrix::zeros(d, d);
    for k in (0..u).filter(|&k| pre[(0, k)] > 0.0) {
        for i in 0..d {
            let down = params.w_down[(k, i)];
            if down == 0.0 {
                continue;
            }
            for j in 0..d {
                m[(i, j)] += down * params.w_up[(j, k)];
            }
        }
    }
    Ok(m)
}

/// Direct FFN evaluation of every row.
pub fn masked_lowrank_apply(params: &MaskedLowRankParams, y: &Matrix) -> Result<Matrix> {
    params.validate(y.cols())?;
    matmul(&matmul(y, &params.w_up)?.map(|v| v.max(0.0)), &params.w_down)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{numerical_rank, DEFAULT_RANK_TOL};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matches_direct_ffn_and_is_low_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = MaskedLowRankParams {
            w_up: random(6, 3, &mut rng),
            w_down: random(3, 6, &mut rng),
        };
        let y = random(5, 6, &mut rng);
        let direct = masked_lowrank_apply(&p, &y).unwrap();
        for r in 0..5 {
            let m = build_masked_lowrank_mixer(&p, &y, r).unwrap();
            let z = matmul(&m, &Matrix::column(y.row(r))).unwrap();
            for (a, b) in z.data().iter().zip(direct.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!(numerical_rank(&m, DEFAULT_RANK_TOL).unwrap() <= 3);
        }
    }

    #[test]
    fn mask_extremes() {
        let w_up = Matrix::ones(4, 2);
        let w_down = Matrix::from_fn(2, 4, |i, j| (i + j) as f64);
        let p = MaskedLowRankParams { w_up: w_up.clone(), w_down: w_down.clone() };
        let neg = Matrix::filled(1, 4, -1.0);
        assert_eq!(build_masked_lowrank_mixer(&p, &neg, 0).unwrap(), Matrix::zeros(4, 4));
        let pos = Matrix::ones(1, 4);
        let full = matmul(&w_down.transpose(), &w_up.transpose()).unwrap();
        assert_eq!(build_masked_lowrank_mixer(&p, &pos, 0).unwrap(), full);
        assert!(build_masked_lowrank_mixer(&p, &pos, 1).is_err());
        assert!(build_masked_lowrank_mixer(&p, &Matrix::ones(1, 3), 0).is_err());
    }
}
