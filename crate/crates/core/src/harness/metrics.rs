use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub fn mse(pred: &Matrix, truth: &Matrix) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch { op: "mse", left: pred.shape(), right: truth.shape() });
    }
    if pred.is_empty() {
        return Err(Error::invalid("mse of empty matrices"));
    }
    Ok(pred.sub(truth)?.map(|v| v * v).mean())
}

/// Which series supplies the naive one-step error in the MASE denominator.
#[derive(Clone, Copy, Debug)]
pub enum MaseScaling<'a> {
    /// The forecast window's own truth values.
    InWindow,
    /// A separate history, such as the lookback window.
    InSample(&'a [f64]),
}

pub fn mase(pred: &[f64], truth: &[f64], scaling: MaseScaling<'_>) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch { op: "mase", left: (pred.len(), 1), right: (truth.len(), 1) });
    }
    let scale_series = match scaling {
        MaseScaling::InWindow => truth,
        MaseScaling::InSample(h) => h,
    };
    if truth.is_empty() || scale_series.len() < 2 {
        return Err(Error::invalid("mase needs a non-empty forecast and a scaling series of length ≥ 2"));
    }
    let denom = scale_series.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (scale_series.len() - 1) as f64;
    if denom == 0.0 {
        return Err(Error::Undefined("MASE denominator is zero (constant scaling series)".into()));
    }
    let mae = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / truth.len() as f64;
    Ok(mae / denom)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths("accuracy", pred.len(), truth.len())?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Binary F1 treating `positive` as the positive class; 0 when precision
/// and recall are both 0 (or undefined).
pub fn f1(pred: &[usize], truth: &[usize], positive: usize) -> Result<f64> {
    check_lengths("f1", pred.len(), truth.len())?;
    let mut counts = [0usize; 3]; // tp, fp, fn
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == positive, t == positive) {
            (true, true) => counts[0] += 1,
            (true, false) => counts[1] += 1,
            (false, true) => counts[2] += 1,
            _ => {}
        }
    }
    Ok(f1_from_counts(counts[0], counts[1], counts[2]))
}

pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Unweighted mean of per-class F1 scores.
pub fn macro_f1(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    let scores = (0..classes).map(|k| f1(pred, truth, k)).collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().sum::<f64>() / classes.max(1) as f64)
}

/// Anomaly flags from scores: `score > threshold`.
pub fn threshold_anomalies(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s > threshold).collect()
}

/// F1 of binary anomaly flags against ground truth.
pub fn anomaly_f1(flags: &[bool], truth: &[bool]) -> Result<f64> {
    let as_labels = |v: &[bool]| v.iter().map(|&b| b as usize).collect::<Vec<_>>();
    f1(&as_labels(flags), &as_labels(truth), 1)
}

fn check_lengths(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch { op, left: (a, 1), right: (b, 1) });
    }
    if a == 0 {
        return Err(Error::invalid(format!("{op} of empty label sets")));
    }
    Ok(())
}

/// Test-split summary; fields that do not apply to the task are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    /// Mean MASE over (window, channel) series with a defined denominator.
    pub mase: Option<f64>,
    /// Series skipped because their MASE denominator was zero.
    pub mase_undefined: usize,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub windows: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_cases() {
        let t = Matrix::from_rows(&[vec![3.0, 2.0]]).unwrap();
        assert_eq!(mse(&t, &t).unwrap(), 0.0);
        assert_eq!(mse(&t.map(|v| v + 1.0), &t).unwrap(), 1.0);
        assert_eq!(mse(&Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap(), &t).unwrap(), 2.0);
        assert!(mse(&t, &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn mase_cases() {
        assert_eq!(mase(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], MaseScaling::InWindow).unwrap(), 1.0);
        assert_eq!(mase(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], MaseScaling::InWindow).unwrap(), 0.0);
        assert!(matches!(mase(&[0.0; 3], &[2.0; 3], MaseScaling::InWindow), Err(Error::Undefined(_))));
        let history = [0.0, 2.0, 4.0];
        assert_eq!(mase(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], MaseScaling::InSample(&history)).unwrap(), 0.5);
    }

    #[test]
    fn persistence_forecast_has_unit_mase_on_its_own_series() {
        // Predicting x_{j-1} for x_j over a window: the numerator mean runs
        // over the T−1 comparable steps, matching the denominator.
        let truth = [0.3, 1.1, -0.4, 2.0, 2.5, 1.0];
        let pred: Vec<f64> = truth[..truth.len() - 1].to_vec();
        let m = mase(&pred, &truth[1..], MaseScaling::InSample(&truth)).unwrap();
        assert!((m - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classification_cases() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(f1(&[1, 0, 1], &[1, 0, 1], 1).unwrap(), 1.0);
        assert_eq!(f1(&[0, 0, 0], &[1, 0, 1], 1).unwrap(), 0.0);
        // TP=2, FP=1, FN=1.
        let f = f1(&[1, 1, 1, 0, 0], &[1, 1, 0, 1, 0], 1).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
        assert!(accuracy(&[1], &[1, 2]).is_err());
        assert_eq!(macro_f1(&[0, 1], &[0, 1], 2).unwrap(), 1.0);
    }

    #[test]
    fn anomaly_flags() {
        let flags = threshold_anomalies(&[0.1, 3.0, 0.2, 4.0], 1.0);
        assert_eq!(flags, vec![false, true, false, true]);
        assert_eq!(anomaly_f1(&flags, &[false, true, false, true]).unwrap(), 1.0);
    }
}
