use super::Matrix;
use crate::error::{Error, Result};

/// Relative threshold (against the largest singular value) used by
/// [`numerical_rank`] when callers have no better choice.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Sweep budget for the one-sided Jacobi iteration.
pub const MAX_SWEEPS: usize = 80;

const ORTHO_TOL: f64 = 1e-15;

/// Singular values in descending order, via one-sided Jacobi (Hestenes)
/// rotations on the columns of the taller orientation.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    if m.is_empty() {
        return Ok(Vec::new());
    }
    let tall = if m.rows() >= m.cols() {
        m.clone()
    } else {
        m.transpose()
    };
    let n = tall.cols();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| tall.col_vec(j)).collect();

    // Columns whose squared norm falls below this are numerically zero;
    // rotating them against large columns only churns roundoff.
    let negligible = (f64::EPSILON * m.frobenius_norm()).powi(2);
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if alpha <= negligible || beta <= negligible || gamma.abs() <= ORTHO_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let xp = *x;
                    let yq = *y;
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence { sweeps: MAX_SWEEPS });
    }

    let mut sigma: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    Ok(sigma)
}

/// Number of singular values strictly above `rel_tol · σ_max`; zero for the
/// zero matrix.
pub fn numerical_rank(m: &Matrix, rel_tol: f64) -> Result<usize> {
    if !(rel_tol > 0.0) {
        return Err(Error::invalid(format!(
            "rank tolerance must be positive, got {rel_tol}"
        )));
    }
    let sigma = singular_values(m)?;
    let Some(&top) = sigma.first() else {
        return Ok(0);
    };
    if top == 0.0 {
        return Ok(0);
    }
    Ok(sigma.iter().filter(|&&s| s > rel_tol * top).count())
}
