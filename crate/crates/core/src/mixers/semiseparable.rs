use serde::{Deserialize, Serialize};

use super::check_shape;
use crate::autodiff::phi1;
use crate::error::{Error, Result};
use crate::tensor::{matmul, Matrix};

/// Below this `|Δ·A|` the zero-order-hold input factor uses its limit `Δ`.
pub const DISCRETIZE_LIMIT: f64 = 1e-8;

/// Per-step discretised transitions; entry `t` of each vector is `D × N`.
#[derive(Clone, Debug, PartialEq)]
pub struct Discretized {
    pub a_bar: Vec<Matrix>,
    pub b_bar: Vec<Matrix>,
}

/// Zero-order-hold discretisation of a diagonal state space model:
/// `Ā = exp(ΔA)`, `B̄ = (exp(ΔA) − 1)/(ΔA) · Δ · B`, elementwise per `(t,d,n)`.
pub fn discretize_ssm(a: &Matrix, delta: &Matrix, b: &Matrix) -> Result<Discretized> {
    let (width, state) = a.shape();
    let len = delta.rows();
    check_shape("discretize_ssm delta", delta, len, width)?;
    check_shape("discretize_ssm b", b, len, state)?;
    if !delta.is_finite() {
        return Err(Error::invalid("discretisation step Δ has non-finite entries"));
    }
    let mut a_bar = Vec::with_capacity(len);
    let mut b_bar = Vec::with_capacity(len);
    for t in 0..len {
        a_bar.push(Matrix::from_fn(width, state, |d, n| (delta[(t, d)] * a[(d, n)]).exp()));
        b_bar.push(Matrix::from_fn(width, state, |d, n| {
            let z = delta[(t, d)] * a[(d, n)];
            let factor = if z.abs() < DISCRETIZE_LIMIT { 1.0 } else { phi1(z) };
            factor * delta[(t, d)] * b[(t, n)]
        }));
    }
    Ok(Discretized { a_bar, b_bar })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Transition {
    /// Undiscretised per-step diagonal transitions `A_k` (`L × N`), one head.
    Raw { a: Matrix },
    /// Input-dependent discretisation with one head per channel:
    /// `Δ = softplus(X·W_Δ)` (`C × D`), continuous `A` is `D × N`.
    Selective { a: Matrix, w_delta: Matrix },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemiseparableParams {
    pub w_b: Matrix,
    pub w_c: Matrix,
    pub transition: Transition,
}

/// The three `L × N` sequences that define one head's semiseparable matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadFactors {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
}

impl SemiseparableParams {
    pub fn state_size(&self) -> usize {
        self.w_b.cols()
    }

    pub fn heads(&self) -> usize {
        match &self.transition {
            Transition::Raw { .. } => 1,
            Transition::Selective { a, .. } => a.rows(),
        }
    }

    pub fn head_factors(&self, x: &Matrix, head: usize) -> Result<HeadFactors> {
        let (len, channels) = x.shape();
        let state = self.state_size();
        check_shape("semiseparable w_b", &self.w_b, channels, state)?;
        check_shape("semiseparable w_c", &self.w_c, channels, state)?;
        if head >= self.heads() {
            return Err(Error::invalid(format!(
                "head {head} out of range ({} heads)",
                self.heads()
            )));
        }
        let b = matmul(x, &self.w_b)?;
        let c = matmul(x, &self.w_c)?;
        match &self.transition {
            Transition::Raw { a } => {
                check_shape("semiseparable transitions", a, len, state)?;
                Ok(HeadFactors { a: a.clone(), b, c })
            }
            Transition::Selective { a, w_delta } => {
                check_shape("semiseparable w_delta", w_delta, channels, a.rows())?;
                let pre = matmul(x, &w_delta.col_block(head, 1)?)?;
                let delta = pre.map(softplus);
                let a_head = a.block(head, head + 1, 0, state);
                let disc = discretize_ssm(&a_head, &delta, &b)?;
                let gather = |m: &[Matrix]| Matrix::from_fn(len, state, |t, n| m[t][(0, n)]);
                Ok(HeadFactors {
                    a: gather(&disc.a_bar),
                    b: gather(&disc.b_bar),
                    c,
                })
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Lower-triangular `m_ij = c_iᵀ (Π_{k=j+1}^{i−1} A_k) b_j`, the empty
/// product being the identity (so `m_ii = c_iᵀ b_i`, `m_{j+1,j} = c_{j+1}ᵀ b_j`).
pub fn build_semiseparable_mixer(
    params: &SemiseparableParams,
    x: &Matrix,
    head: usize,
) -> Result<Matrix> {
    Ok(semiseparable_from_factors(&params.head_factors(x, head)?))
}

/// Materialises one head from its `(A, b, c)` sequences.
pub fn semiseparable_from_factors(f: &HeadFactors) -> Matrix {
    let (len, state) = f.a.shape();
    let mut m = Matrix::zeros(len, len);
    let mut prod = vec![0.0; state];
    for j in 0..len {
        let bj = f.b.row(j);
        m[(j, j)] = dot(f.c.row(j), bj);
        prod.fill(1.0);
        for i in (j + 1)..len {
            m[(i, j)] = f
                .c
                .row(i)
                .iter()
                .zip(&prod)
                .zip(bj)
                .map(|((c, p), b)| c * p * b)
                .sum();
            for (p, a) in prod.iter_mut().zip(f.a.row(i)) {
                *p *= a;
            }
        }
    }
    m
}

/// Recurrent evaluation of `build_semiseparable_mixer(..)·U`:
/// `y_t = c_tᵀ(h_{t−1} + b_t u_t)`, `h_t = A_t ⊙ h_{t−1} + b_t u_t`.
pub fn scan_semiseparable(
    params: &SemiseparableParams,
    x: &Matrix,
    head: usize,
    u: &Matrix,
) -> Result<Matrix> {
    let f = params.head_factors(x, head)?;
    let (len, state) = f.a.shape();
    if u.rows() != len {
        return Err(Error::ShapeMismatch {
            op: "scan_semiseparable",
            left: (len, len),
            right: u.shape(),
        });
    }
    let width = u.cols();
    let mut h = Matrix::zeros(state, width);
    let mut y = Matrix::zeros(len, width);
    for t in 0..len {
        for n in 0..state {
            let (a, b, c) = (f.a[(t, n)], f.b[(t, n)], f.c[(t, n)]);
            for p in 0..width {
                let inject = b * u[(t, p)];
                y[(t, p)] += c * (h[(n, p)] + inject);
                h[(n, p)] = a * h[(n, p)] + inject;
            }
        }
    }
    Ok(y)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
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

    fn raw(a: Matrix, w_b: Matrix, w_c: Matrix) -> SemiseparableParams {
        SemiseparableParams {
            w_b,
            w_c,
            transition: Transition::Raw { a },
        }
    }

    /// `(exp(z) − 1)/z` by its Taylor series.
    fn phi1_series(z: f64) -> f64 {
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 2..=21 {
            term *= z / k as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn discretisation_cases() {
        let d = discretize_ssm(&Matrix::zeros(1, 1), &Matrix::filled(1, 1, 0.7), &Matrix::filled(1, 1, 2.0))
            .unwrap();
        assert_eq!(d.a_bar[0][(0, 0)], 1.0);
        assert!((d.b_bar[0][(0, 0)] - 1.4).abs() < 1e-15);

        let d = discretize_ssm(&Matrix::filled(1, 1, -1.0), &Matrix::ones(1, 1), &Matrix::ones(1, 1)).unwrap();
        let e = (-1.0f64).exp();
        assert!((d.a_bar[0][(0, 0)] - e).abs() < 1e-15);
        assert!((d.b_bar[0][(0, 0)] - (1.0 - e)).abs() < 1e-15);
    }

    #[test]
    fn discretisation_matches_series_for_small_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Matrix::from_fn(3, 4, |_, _| -rng.random_range(0.01..1.0));
        let delta = Matrix::from_fn(5, 3, |_, _| rng.random_range(0.0..0.1));
        let b = random(5, 4, &mut rng);
        let disc = discretize_ssm(&a, &delta, &b).unwrap();
        for t in 0..5 {
            for d in 0..3 {
                for n in 0..4 {
                    let z = delta[(t, d)] * a[(d, n)];
                    let want = phi1_series(z) * delta[(t, d)] * b[(t, n)];
                    assert!((disc.b_bar[t][(d, n)] - want).abs() < 1e-10);
                    let abar = disc.a_bar[t][(d, n)];
                    assert!(abar > 0.0 && abar <= 1.0);
                }
            }
        }
    }

    #[test]
    fn unit_and_zero_transitions() {
        let x = Matrix::ones(5, 1);
        let ones = raw(Matrix::ones(5, 1), Matrix::ones(1, 1), Matrix::ones(1, 1));
        let m = build_semiseparable_mixer(&ones, &x, 0).unwrap();
        assert_eq!(m, Matrix::lower_triangular_mask(5));

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(6, 2, &mut rng);
        let zero = raw(Matrix::zeros(6, 1), random(2, 1, &mut rng), random(2, 1, &mut rng));
        let m = build_semiseparable_mixer(&zero, &x, 0).unwrap();
        let f = zero.head_factors(&x, 0).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let want = match i as isize - j as isize {
                    0 => f.c[(i, 0)] * f.b[(i, 0)],
                    1 => f.c[(i, 0)] * f.b[(j, 0)],
                    _ => 0.0,
                };
                assert!((m[(i, j)] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn strictly_lower_blocks_have_rank_at_most_state_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random(16, 3, &mut rng);
        for _ in 0..20 {
            let p = raw(
                Matrix::from_fn(16, 2, |_, _| rng.random_range(0.3..1.2)),
                random(3, 2, &mut rng),
                random(3, 2, &mut rng),
            );
            let m = build_semiseparable_mixer(&p, &x, 0).unwrap();
            assert!(m.is_lower_triangular());
            for s in 1..16 {
                let block = m.block(s, 16, 0, s);
                assert!(numerical_rank(&block, DEFAULT_RANK_TOL).unwrap() <= 2);
            }
        }
    }

    #[test]
    fn scan_matches_materialisation() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = random(32, 3, &mut rng);
        let u = random(32, 2, &mut rng);
        let raw_p = raw(
            Matrix::from_fn(32, 4, |_, _| rng.random_range(-1.0..1.0)),
            random(3, 4, &mut rng),
            random(3, 4, &mut rng),
        );
        let sel = SemiseparableParams {
            w_b: random(3, 4, &mut rng),
            w_c: random(3, 4, &mut rng),
            transition: Transition::Selective {
                a: Matrix::from_fn(5, 4, |_, _| -rng.random_range(0.1..2.0)),
                w_delta: random(3, 5, &mut rng),
            },
        };
        for (p, heads) in [(&raw_p, 1), (&sel, 5)] {
            for h in 0..heads {
                let m = build_semiseparable_mixer(p, &x, h).unwrap();
                let want = matmul(&m, &u).unwrap();
                let got = scan_semiseparable(p, &x, h, &u).unwrap();
                assert!(got.max_abs_diff(&want) < 1e-9);
            }
            assert!(build_semiseparable_mixer(p, &x, heads).is_err());
        }
        assert_eq!(
            scan_semiseparable(&raw_p, &x, 0, &Matrix::zeros(32, 2)).unwrap(),
            Matrix::zeros(32, 2)
        );
    }

    #[test]
    fn single_step_scan() {
        let p = raw(Matrix::filled(1, 1, 0.3), Matrix::filled(1, 1, 2.0), Matrix::filled(1, 1, -1.5));
        let x = Matrix::filled(1, 1, 1.0);
        let y = scan_semiseparable(&p, &x, 0, &Matrix::filled(1, 1, 4.0)).unwrap();
        assert_eq!(y[(0, 0)], -1.5 * 2.0 * 4.0);
    }
}
