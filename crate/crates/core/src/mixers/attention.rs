use serde::{Deserialize, Serialize};

use super::check_shape;
use crate::error::{Error, Result};
use crate::tensor::{matmul, softmax_rows, Matrix};

/// Per-head query/key projections, each `D × P`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
}

impl AttentionParams {
    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    fn projections(&self, x: &Matrix, head: usize) -> Result<(Matrix, Matrix)> {
        if self.w_q.len() != self.w_k.len() {
            return Err(Error::invalid("query and key head counts differ"));
        }
        let (wq, wk) = match (self.w_q.get(head), self.w_k.get(head)) {
            (Some(q), Some(k)) => (q, k),
            _ => {
                return Err(Error::invalid(format!(
                    "head {head} out of range ({} heads)",
                    self.heads()
                )))
            }
        };
        check_shape("attention w_k", wk, wq.rows(), wq.cols())?;
        Ok((matmul(x, wq)?, matmul(x, wk)?))
    }
}

/// `softmax(Q·Kᵀ / √P)` with `Q = X·W_Q`, `K = X·W_K` for one head.
pub fn build_attention_mixer(x: &Matrix, params: &AttentionParams, head: usize) -> Result<Matrix> {
    let (q, k) = params.projections(x, head)?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    Ok(softmax_rows(&matmul(&q, &k.transpose())?.scale(scale)))
}

/// Same result as `build_attention_mixer(..)·V`, one query row at a time
/// with a running max and normaliser, so no `L × L` buffer exists.
pub fn attention_apply(
    x: &Matrix,
    params: &AttentionParams,
    head: usize,
    v: &Matrix,
) -> Result<Matrix> {
    let (q, k) = params.projections(x, head)?;
    if v.rows() != x.rows() {
        return Err(Error::ShapeMismatch {
            op: "attention_apply",
            left: x.shape(),
            right: v.shape(),
        });
    }
    let (l, p) = q.shape();
    let w = v.cols();
    let scale = 1.0 / (p as f64).sqrt();
    let mut out = Matrix::zeros(l, w);
    let mut acc = vec![0.0; w];
    for i in 0..l {
        let qi = q.row(i);
        let mut running_max = f64::NEG_INFINITY;
        let mut norm = 0.0;
        acc.fill(0.0);
        for j in 0..l {
            let s = scale * qi.iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>();
            if s > running_max {
                let shrink = (running_max - s).exp();
                norm *= shrink;
                acc.iter_mut().for_each(|a| *a *= shrink);
                running_max = s;
            }
            let e = (s - running_max).exp();
            norm += e;
            for (a, &vj) in acc.iter_mut().zip(v.row(j)) {
                *a += e * vj;
            }
        }
        for (o, a) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = a / norm;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn rows_are_stochastic_and_streaming_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(16, 8, &mut rng);
        let params = AttentionParams {
            w_q: vec![random(8, 4, &mut rng), random(8, 4, &mut rng)],
            w_k: vec![random(8, 4, &mut rng), random(8, 4, &mut rng)],
        };
        let v = random(16, 4, &mut rng);
        for h in 0..2 {
            let m = build_attention_mixer(&x, &params, h).unwrap();
            for i in 0..16 {
                assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(m.row(i).iter().all(|&p| p > 0.0));
            }
            let dense = matmul(&m, &v).unwrap();
            let streamed = attention_apply(&x, &params, h, &v).unwrap();
            assert!(dense.max_abs_diff(&streamed) < 1e-10);
        }
        assert!(build_attention_mixer(&x, &params, 2).is_err());
    }

    #[test]
    fn zero_projections_give_uniform_mixing() {
        let x = Matrix::ones(5, 3);
        let params = AttentionParams {
            w_q: vec![Matrix::zeros(3, 2)],
            w_k: vec![Matrix::zeros(3, 2)],
        };
        let m = build_attention_mixer(&x, &params, 0).unwrap();
        assert!(m.data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }
}
