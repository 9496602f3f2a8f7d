use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Linear cross-correlation `r[τ] = Σ_t q[t+τ]·k[t]` for lags `0..L`,
/// computed as `IFFT(FFT(q) ⊙ conj(FFT(k)))` on buffers zero-padded to the
/// next power of two at or above `2L` so the circular result has no wrap.
pub fn fft_autocorrelation(q: &[f64], k: &[f64]) -> Result<Vec<f64>> {
    if q.len() != k.len() {
        return Err(Error::invalid(format!(
            "autocorrelation inputs differ in length ({} vs {})",
            q.len(),
            k.len()
        )));
    }
    let len = q.len();
    if len == 0 {
        return Err(Error::invalid("autocorrelation needs at least one sample"));
    }
    let padded = (2 * len).next_power_of_two();

    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(padded);
    let inverse = planner.plan_fft_inverse(padded);

    let load = |x: &[f64]| {
        let mut buf = vec![Complex::new(0.0, 0.0); padded];
        for (b, &v) in buf.iter_mut().zip(x) {
            b.re = v;
        }
        buf
    };
    let mut fq = load(q);
    let mut fk = load(k);
    forward.process(&mut fq);
    forward.process(&mut fk);
    let mut prod: Vec<Complex<f64>> = fq.iter().zip(&fk).map(|(a, b)| a * b.conj()).collect();
    inverse.process(&mut prod);

    let scale = 1.0 / padded as f64;
    Ok(prod[..len].iter().map(|c| c.re * scale).collect())
}

/// Direct `O(L²)` evaluation of the same lags.
pub fn direct_correlation(q: &[f64], k: &[f64]) -> Result<Vec<f64>> {
    if q.len() != k.len() {
        return Err(Error::invalid(format!(
            "correlation inputs differ in length ({} vs {})",
            q.len(),
            k.len()
        )));
    }
    let len = q.len();
    Ok((0..len)
        .map(|tau| (0..len - tau).map(|t| q[t + tau] * k[t]).sum())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(q: &[f64], k: &[f64]) -> Vec<f64> {
        let l = q.len();
        let mut out = vec![0.0; l];
        for (tau, o) in out.iter_mut().enumerate() {
            for t in 0..l {
                if t + tau < l {
                    *o += q[t + tau] * k[t];
                }
            }
        }
        out
    }

    #[test]
    fn delta_is_preserved() {
        let mut d = vec![0.0; 5];
        d[0] = 1.0;
        let r = fft_autocorrelation(&d, &d).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-12);
        assert!(r[1..].iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn constant_ones_give_triangular_lags() {
        let ones = vec![1.0; 4];
        let r = fft_autocorrelation(&ones, &ones).unwrap();
        for (got, want) in r.iter().zip([4.0, 3.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(fft_autocorrelation(&[1.0, 2.0], &[1.0]).is_err());
        assert!(fft_autocorrelation(&[], &[]).is_err());
    }

    #[test]
    fn matches_direct_sum_for_all_small_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for len in 1..=64 {
            let q: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = fft_autocorrelation(&q, &k).unwrap();
            let slow = naive(&q, &k);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-9, "len {len}: {a} vs {b}");
            }
            assert_eq!(direct_correlation(&q, &k).unwrap().len(), len);
        }
    }
}
