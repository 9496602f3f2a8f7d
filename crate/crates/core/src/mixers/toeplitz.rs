use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{fft_autocorrelation, Matrix};

/// Causal dilated kernel; `kernel[0]` sits on the diagonal and `kernel[k]`
/// on the `k·dilation`-th subdiagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToeplitzParams {
    pub kernel: Vec<f64>,
    pub dilation: usize,
}

impl ToeplitzParams {
    pub fn new(kernel: Vec<f64>, dilation: usize) -> Self {
        ToeplitzParams { kernel, dilation }
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.len()
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        if self.kernel.is_empty() {
            return Err(Error::invalid("Toeplitz kernel must have at least one tap"));
        }
        if self.dilation == 0 {
            return Err(Error::invalid("Toeplitz dilation must be at least 1"));
        }
        let reach = self.dilation * (self.kernel.len() - 1);
        if reach >= len.max(1) && self.kernel.len() > 1 {
            return Err(Error::invalid(format!(
                "Toeplitz band reaches offset {reach} but the sequence has length {len}"
            )));
        }
        Ok(())
    }
}

pub fn build_toeplitz_mixer(params: &ToeplitzParams, len: usize) -> Result<Matrix> {
    params.validate(len)?;
    let d = params.dilation;
    Ok(Matrix::from_fn(len, len, |i, j| {
        if i < j || (i - j) % d != 0 {
            return 0.0;
        }
        params.kernel.get((i - j) / d).copied().unwrap_or(0.0)
    }))
}

/// Sliding-window causal convolution of every column of `u`.
pub fn conv_apply(params: &ToeplitzParams, u: &Matrix) -> Result<Matrix> {
    let len = u.rows();
    params.validate(len)?;
    let mut out = Matrix::zeros(len, u.cols());
    for t in 0..len {
        for (k, &w) in params.kernel.iter().enumerate() {
            let Some(src) = t.checked_sub(k * params.dilation) else {
                break;
            };
            let (urow, orow) = (u.row(src).to_vec(), out.row_mut(t));
            for (o, x) in orow.iter_mut().zip(urow) {
                *o += w * x;
            }
        }
    }
    Ok(out)
}

/// Per-lag correlation of matching columns of `q` and `k`, averaged over
/// the columns.
pub fn autocorr_lags(q: &Matrix, k: &Matrix) -> Result<Vec<f64>> {
    if q.shape() != k.shape() || q.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "autocorrelation",
            left: q.shape(),
            right: k.shape(),
        });
    }
    let (len, p) = q.shape();
    let mut lags = vec![0.0; len];
    for c in 0..p {
        let r = fft_autocorrelation(&q.col_vec(c), &k.col_vec(c))?;
        for (acc, x) in lags.iter_mut().zip(r) {
            *acc += x / p as f64;
        }
    }
    Ok(lags)
}

/// Symmetric Toeplitz matrix `m_ij = r[|i − j|]` over all lags.
pub fn build_autocorr_mixer(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    let r = autocorr_lags(q, k)?;
    let len = r.len();
    Ok(Matrix::from_fn(len, len, |i, j| r[i.abs_diff(j)]))
}

/// `build_autocorr_mixer(q, k) · v` through a circulant embedding of the
/// Toeplitz matrix, so only FFTs of length `≥ 2L` are needed.
pub fn autocorr_apply(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    let r = autocorr_lags(q, k)?;
    let len = r.len();
    if v.rows() != len {
        return Err(Error::ShapeMismatch {
            op: "autocorr_apply",
            left: (len, len),
            right: v.shape(),
        });
    }
    let n = (2 * len).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);

    let mut circ = vec![Complex::new(0.0, 0.0); n];
    for (tau, &x) in r.iter().enumerate() {
        circ[tau].re = x;
        if tau > 0 {
            circ[n - tau].re = x;
        }
    }
    fwd.process(&mut circ);

    let mut out = Matrix::zeros(len, v.cols());
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for c in 0..v.cols() {
        buf.fill(Complex::new(0.0, 0.0));
        for t in 0..len {
            buf[t].re = v[(t, c)];
        }
        fwd.process(&mut buf);
        for (b, w) in buf.iter_mut().zip(&circ) {
            *b *= w;
        }
        inv.process(&mut buf);
        for t in 0..len {
            out[(t, c)] = buf[t].re / n as f64;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{direct_correlation, matmul};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn entry_formula_cases() {
        let id = build_toeplitz_mixer(&ToeplitzParams::new(vec![1.0], 1), 4).unwrap();
        assert_eq!(id, Matrix::identity(4));

        let m = build_toeplitz_mixer(&ToeplitzParams::new(vec![1.0, 1.0], 1), 3).unwrap();
        let want = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![1.0, 1.0, 0.0],
            vec![0.0, 1.0, 1.0],
        ])
        .unwrap();
        assert_eq!(m, want);

        let m = build_toeplitz_mixer(&ToeplitzParams::new(vec![2.0, 3.0], 2), 5).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let want = match i as isize - j as isize {
                    0 => 2.0,
                    2 => 3.0,
                    _ => 0.0,
                };
                assert_eq!(m[(i, j)], want);
            }
        }
    }

    #[test]
    fn band_must_fit() {
        assert!(build_toeplitz_mixer(&ToeplitzParams::new(vec![1.0; 3], 2), 4).is_err());
        assert!(build_toeplitz_mixer(&ToeplitzParams::new(vec![1.0; 3], 2), 5).is_ok());
        assert!(build_toeplitz_mixer(&ToeplitzParams::new(vec![1.0], 0), 5).is_err());
        assert!(build_toeplitz_mixer(&ToeplitzParams::new(vec![], 1), 5).is_err());
    }

    #[test]
    fn conv_shift_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = random(6, 2, &mut rng);
        assert_eq!(conv_apply(&ToeplitzParams::new(vec![1.0], 1), &u).unwrap(), u);
        let shifted = conv_apply(&ToeplitzParams::new(vec![0.0, 1.0], 1), &u).unwrap();
        assert_eq!(shifted.row(0), &[0.0, 0.0]);
        for t in 1..6 {
            assert_eq!(shifted.row(t), u.row(t - 1));
        }
    }

    #[test]
    fn conv_matches_materialisation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let k = rng.random_range(1..5);
            let d = rng.random_range(1..4);
            let p = ToeplitzParams::new((0..k).map(|_| rng.random_range(-1.0..1.0)).collect(), d);
            let u = random(32, 3, &mut rng);
            let m = build_toeplitz_mixer(&p, 32).unwrap();
            assert!(m.is_lower_triangular());
            let want = matmul(&m, &u).unwrap();
            assert!(conv_apply(&p, &u).unwrap().max_abs_diff(&want) < 1e-9);
        }
    }

    #[test]
    fn autocorr_cases() {
        let one = build_autocorr_mixer(&Matrix::filled(1, 1, 3.0), &Matrix::filled(1, 1, 2.0)).unwrap();
        assert_eq!(one, Matrix::filled(1, 1, 6.0));

        let mut delta = Matrix::zeros(6, 1);
        delta[(0, 0)] = 1.0;
        let m = build_autocorr_mixer(&delta, &delta).unwrap();
        assert!(m.max_abs_diff(&Matrix::identity(6)) < 1e-12);

        assert!(build_autocorr_mixer(&Matrix::zeros(4, 2), &Matrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn autocorr_matches_direct_sum_and_applies_via_fft() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for &len in &[1usize, 2, 8, 31, 64] {
            let q = random(len, 3, &mut rng);
            let k = random(len, 3, &mut rng);
            let m = build_autocorr_mixer(&q, &k).unwrap();
            let mut lags = vec![0.0; len];
            for c in 0..3 {
                let r = direct_correlation(&q.col_vec(c), &k.col_vec(c)).unwrap();
                for (a, x) in lags.iter_mut().zip(r) {
                    *a += x / 3.0;
                }
            }
            let direct = Matrix::from_fn(len, len, |i, j| lags[i.abs_diff(j)]);
            assert!(m.max_abs_diff(&direct) < 1e-9);
            assert!(m.max_abs_diff(&m.transpose()) == 0.0);

            let v = random(len, 2, &mut rng);
            let fast = autocorr_apply(&q, &k, &v).unwrap();
            assert!(fast.max_abs_diff(&matmul(&m, &v).unwrap()) < 1e-9);
        }
    }
}
