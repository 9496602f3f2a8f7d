use super::param::ParamStore;
use super::tape::{Bindings, Tape, Var};
use crate::error::Result;
use crate::tensor::Matrix;

/// Central differences `(f(θ+εe) − f(θ−εe)) / 2ε`, one entry at a time.
pub fn finite_diff_grad(mut f: impl FnMut(&Matrix) -> f64, theta: &Matrix, eps: f64) -> Matrix {
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut probe = theta.clone();
    let mut out = Matrix::zeros(theta.rows(), theta.cols());
    for k in 0..theta.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[k] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[k] = orig;
        out.data_mut()[k] = (up - down) / (2.0 * eps);
    }
    out
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest per-parameter `‖analytic − numeric‖∞ / (‖numeric‖∞ + 1e-12)`.
    pub max_rel_error: f64,
    pub per_param: Vec<(String, f64)>,
}

/// Compares tape gradients against central differences for every trainable
/// parameter of `store`. `loss` must build the same deterministic scalar on
/// every call.
pub fn grad_check<F>(store: &ParamStore, eps: f64, loss: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &Bindings, &ParamStore) -> Result<Var>,
{
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    {
        let mut tape = Tape::new();
        let b = tape.bind(&analytic_store);
        let l = loss(&mut tape, &b, &analytic_store)?;
        tape.backward_into(l, &mut analytic_store)?;
    }

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let b = tape.bind(s);
        let l = loss(&mut tape, &b, s)?;
        Ok(tape.value(l)[(0, 0)])
    };

    let mut work = store.clone();
    let mut per_param = Vec::new();
    let mut max_rel_error: f64 = 0.0;
    for idx in 0..store.len() {
        if !store.params()[idx].trainable() {
            continue;
        }
        let n = store.params()[idx].value.len();
        let mut numeric = vec![0.0; n];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = work.params()[idx].value.data()[k];
            work.params_mut()[idx].value.data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work.params_mut()[idx].value.data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work.params_mut()[idx].value.data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * eps);
        }
        let analytic = analytic_store.params()[idx].grad.data();
        let diff = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let rel = diff / (scale + 1e-12);
        max_rel_error = max_rel_error.max(rel);
        per_param.push((store.params()[idx].name.clone(), rel));
    }
    Ok(GradCheck {
        max_rel_error,
        per_param,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamRole;
    use crate::tensor::softmax_rows;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_and_sine() {
        let g = finite_diff_grad(|t| t[(0, 0)].powi(2), &Matrix::filled(1, 1, 3.0), 1e-6);
        assert!((g[(0, 0)] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|t| t[(0, 0)].sin(), &Matrix::zeros(1, 1), 1e-6);
        assert!((g[(0, 0)] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let logits = Matrix::from_fn(1, 6, |_, _| rng.random_range(-3.0..3.0));
        let label = 4;
        let ce = |z: &Matrix| -softmax_rows(z)[(0, label)].ln();
        let numeric = finite_diff_grad(ce, &logits, 1e-6);
        let mut closed = softmax_rows(&logits);
        closed[(0, label)] -= 1.0;
        assert!(numeric.max_abs_diff(&closed) < 1e-6);
    }

    #[test]
    fn grad_check_on_dense_mixer_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store
            .add("m", Matrix::from_fn(6, 6, |_, _| rng.random_range(-0.4..0.4)), ParamRole::SequenceMixer)
            .unwrap();
        let v = Matrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let target = Matrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let report = grad_check(&store, 1e-6, |t, b, s| {
            let m = b.by_name(s, "m")?;
            let vv = t.constant(v.clone());
            let y = t.matmul(m, vv)?;
            let tt = t.constant(target.clone());
            let d = t.sub(y, tt)?;
            let sq = t.mul(d, d)?;
            Ok(t.mean(sq))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }
}
