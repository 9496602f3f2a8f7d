//! Windowed datasets: synthetic AR series, a toy classification set, CSV
//! ingestion, and masking for imputation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// `T × C` future values.
    Horizon(Matrix),
    Class(usize),
    /// The unmasked `L × C` window and a 0/1 mask (1 = hidden, scored).
    Imputation { values: Matrix, mask: Matrix },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lookback: Matrix,
    pub target: Target,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowedDataset {
    pub lookback: usize,
    /// Forecast horizon; 0 for classification and imputation.
    pub horizon: usize,
    pub channels: usize,
    pub windows: Vec<Window>,
}

impl WindowedDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Window> + '_ {
        self.windows.iter().filter(move |w| w.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

/// Fractions of the series (or of the windows, for unordered data) given to
/// train / val / test; test takes the remainder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.7, val: 0.1 }
    }
}

impl SplitFractions {
    pub const TRAIN_ONLY: SplitFractions = SplitFractions { train: 1.0, val: 0.0 };

    fn validate(&self) -> Result<()> {
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        if !ok(self.train) || !ok(self.val) || self.train + self.val > 1.0 + 1e-12 || self.train <= 0.0 {
            return Err(Error::invalid(format!("invalid split fractions {self:?}")));
        }
        Ok(())
    }

    /// Partition of `n` items into three contiguous counts.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let train = ((self.train * n as f64).round() as usize).min(n);
        let val = ((self.val * n as f64).round() as usize).min(n - train);
        [train, val, n - train - val]
    }
}

/// Largest modulus among the roots of `z^p − a₁z^{p−1} − … − a_p`
/// (Durand–Kerner iteration).
pub fn ar_spectral_radius(coeffs: &[f64]) -> f64 {
    let p = coeffs.len();
    if p == 0 {
        return 0.0;
    }
    if p == 1 {
        return coeffs[0].abs();
    }
    type C = (f64, f64);
    let mul = |a: C, b: C| (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0);
    let sub = |a: C, b: C| (a.0 - b.0, a.1 - b.1);
    let div = |a: C, b: C| {
        let d = b.0 * b.0 + b.1 * b.1;
        ((a.0 * b.0 + a.1 * b.1) / d, (a.1 * b.0 - a.0 * b.1) / d)
    };
    let eval = |z: C| {
        let mut acc: C = (1.0, 0.0);
        for &a in coeffs {
            acc = sub(mul(acc, z), (a, 0.0));
        }
        acc
    };
    let scale = 1.0 + coeffs.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let mut roots: Vec<C> = (0..p)
        .map(|k| {
            let th = 0.4 + std::f64::consts::TAU * k as f64 / p as f64;
            (scale * th.cos(), scale * th.sin())
        })
        .collect();
    for _ in 0..500 {
        let mut moved = 0.0f64;
        for i in 0..p {
            let mut den: C = (1.0, 0.0);
            for j in 0..p {
                if i != j {
                    den = mul(den, sub(roots[i], roots[j]));
                }
            }
            let step = div(eval(roots[i]), den);
            roots[i] = sub(roots[i], step);
            moved = moved.max(step.0.hypot(step.1));
        }
        if moved < 1e-14 {
            break;
        }
    }
    roots.iter().map(|z| z.0.hypot(z.1)).fold(0.0, f64::max)
}

/// Steps discarded so a noisy AR process forgets its all-ones start.
pub const AR_BURN_IN: usize = 200;

/// Synthetic AR(p) forecasting data: one independent series per channel,
/// split contiguously in time and windowed with stride 1 so that exactly
/// `n_windows` windows result.
///
/// Coefficients with a characteristic root outside the unit circle are
/// rejected; roots on it (e.g. `[1]`, a random walk or a constant) are
/// allowed. With `noise_std = 0` every channel is the constant 1.
#[allow(clippy::too_many_arguments)]
pub fn gen_synthetic_ar(
    lookback: usize,
    channels: usize,
    horizon: usize,
    coeffs: &[f64],
    noise_std: f64,
    n_windows: usize,
    seed: u64,
) -> Result<WindowedDataset> {
    if lookback == 0 || horizon == 0 || channels == 0 || n_windows == 0 {
        return Err(Error::invalid("lookback, horizon, channels and window count must be positive"));
    }
    if coeffs.is_empty() || coeffs.iter().any(|a| !a.is_finite()) {
        return Err(Error::invalid("AR coefficients must be finite and non-empty"));
    }
    let radius = ar_spectral_radius(coeffs);
    if radius > 1.0 + 1e-9 {
        return Err(Error::invalid(format!(
            "unstable AR coefficients {coeffs:?}: characteristic root of modulus {radius:.6}"
        )));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::invalid("noise_std must be finite and non-negative"));
    }
    let counts = SplitFractions::default().counts(n_windows);
    let span = lookback + horizon - 1;
    let len: usize = counts.iter().map(|&c| if c > 0 { c + span } else { 0 }).sum();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let p = coeffs.len();
    let burn = if noise_std == 0.0 { 0 } else { AR_BURN_IN };
    let mut series = Matrix::zeros(len, channels);
    for c in 0..channels {
        // Deterministic start: ones, so the noiseless process is constant
        // for unit-sum coefficients.
        let mut hist = vec![1.0; p];
        let mut out = Vec::with_capacity(len);
        for t in 0..burn + len {
            let eps = if noise_std == 0.0 { 0.0 } else { noise.sample(&mut rng) };
            let x: f64 = coeffs.iter().zip(hist.iter().rev()).map(|(a, h)| a * h).sum::<f64>() + eps;
            hist.remove(0);
            hist.push(x);
            if t >= burn {
                out.push(x);
            }
        }
        for (t, x) in out.into_iter().enumerate() {
            series[(t, c)] = x;
        }
    }

    let mut windows = Vec::with_capacity(n_windows);
    let mut start = 0;
    for (split, &count) in Split::ALL.iter().zip(&counts) {
        if count == 0 {
            continue;
        }
        windows.extend(forecast_windows(&series, start, count + span, lookback, horizon, *split));
        start += count + span;
    }
    Ok(WindowedDataset { lookback, horizon, channels, windows })
}

fn forecast_windows(series: &Matrix, start: usize, len: usize, l: usize, t: usize, split: Split) -> Vec<Window> {
    let c = series.cols();
    (start..=start + len - l - t)
        .map(|s| Window {
            lookback: series.block(s, s + l, 0, c),
            target: Target::Horizon(series.block(s + l, s + l + t, 0, c)),
            split,
        })
        .collect()
}

/// Toy classification: class `k` is the sinusoid with `k + 1` cycles per
/// window, channel `c` phase-shifted by `π c / (2C)`, plus Gaussian noise.
/// Labels are balanced (counts differ by at most one), shuffled, and split
/// 70/10/20.
pub fn gen_classification_toy(
    lookback: usize,
    channels: usize,
    classes: usize,
    n_windows: usize,
    noise_std: f64,
    seed: u64,
) -> Result<WindowedDataset> {
    if classes < 2 {
        return Err(Error::invalid("classification needs at least two classes"));
    }
    if lookback == 0 || channels == 0 || n_windows == 0 {
        return Err(Error::invalid("lookback, channels and window count must be positive"));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::invalid("noise_std must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut labels: Vec<usize> = (0..n_windows).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let counts = SplitFractions::default().counts(n_windows);
    let windows = labels
        .into_iter()
        .enumerate()
        .map(|(i, k)| {
            let lookback = Matrix::from_fn(lookback, channels, |t, c| {
                let e = if noise_std == 0.0 { 0.0 } else { noise.sample(&mut rng) };
                class_signature(k, t, c, lookback, channels) + e
            });
            let split = if i < counts[0] {
                Split::Train
            } else if i < counts[0] + counts[1] {
                Split::Val
            } else {
                Split::Test
            };
            Window { lookback, target: Target::Class(k), split }
        })
        .collect();
    Ok(WindowedDataset { lookback, horizon: 0, channels, windows })
}

/// Noise-free value of class `k` at step `t`, channel `c`.
pub fn class_signature(k: usize, t: usize, c: usize, lookback: usize, channels: usize) -> f64 {
    let phase = std::f64::consts::PI * c as f64 / (2.0 * channels as f64);
    (std::f64::consts::TAU * (k + 1) as f64 * t as f64 / lookback as f64 + phase).sin()
}

/// Converts each window's lookback into an imputation problem: entries are
/// hidden independently with probability `ratio` (at least one per window),
/// hidden inputs are zeroed, and the target is the full window.
pub fn mask_for_imputation(dataset: &WindowedDataset, ratio: f64, seed: u64) -> Result<WindowedDataset> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid("mask ratio must lie in (0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let windows = dataset
        .windows
        .iter()
        .map(|w| {
            let (l, c) = w.lookback.shape();
            let mut mask = Matrix::from_fn(l, c, |_, _| if rng.random::<f64>() < ratio { 1.0 } else { 0.0 });
            if mask.sum() == 0.0 {
                let k = rng.random_range(0..l * c);
                mask.data_mut()[k] = 1.0;
            }
            let input = w.lookback.zip_with(&mask, "mask", |v, m| v * (1.0 - m)).expect("same shape");
            Window {
                lookback: input,
                target: Target::Imputation { values: w.lookback.clone(), mask },
                split: w.split,
            }
        })
        .collect();
    Ok(WindowedDataset { lookback: dataset.lookback, horizon: 0, channels: dataset.channels, windows })
}

/// Per-channel affine map fitted on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population statistics of `rows`; a zero variance falls back to 1.
    pub fn fit(rows: &Matrix) -> Standardizer {
        let n = rows.rows().max(1) as f64;
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for j in 0..rows.cols() {
            let col = rows.col_vec(j);
            let mu = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
            mean.push(mu);
            std.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Standardizer { mean, std }
    }

    pub fn apply(&self, m: &Matrix) -> Matrix {
        Matrix::from_fn(m.rows(), m.cols(), |i, j| (m[(i, j)] - self.mean[j]) / self.std[j])
    }
}

/// Parsed numeric contents of a CSV file (timestamps dropped).
#[derive(Clone, Debug, PartialEq)]
pub struct CsvSeries {
    pub channel_names: Vec<String>,
    pub values: Matrix,
}

/// Reads a CSV with a header row whose first column is a timestamp.
pub fn read_csv_series(path: &Path) -> Result<CsvSeries> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: u64, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.len() < 2 {
        return Err(parse_err(1, "need a timestamp column and at least one channel".into()));
    }
    let channel_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(parse_err(line, format!("expected {} fields, found {}", header.len(), record.len())));
        }
        for (j, cell) in record.iter().enumerate().skip(1) {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("non-numeric value `{cell}` in column `{}`", &header[j])))?;
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_err(1, "no data rows".into()));
    }
    Ok(CsvSeries { values: Matrix::from_vec(rows, channel_names.len(), data)?, channel_names })
}

/// Sliding forecasting windows (stride 1) over a CSV, split contiguously by
/// rows and standardised with training-split statistics only. Empty splits
/// are allowed; a non-empty split shorter than `L + T` is an error naming
/// its first line.
pub fn load_csv(path: &Path, lookback: usize, horizon: usize, splits: SplitFractions) -> Result<WindowedDataset> {
    splits.validate()?;
    if lookback == 0 || horizon == 0 {
        return Err(Error::invalid("lookback and horizon must be positive"));
    }
    let series = read_csv_series(path)?;
    let (n, c) = series.values.shape();
    let counts = splits.counts(n);
    let scaler = Standardizer::fit(&series.values.block(0, counts[0], 0, c));
    let scaled = scaler.apply(&series.values);
    let mut windows = Vec::new();
    let mut start = 0;
    for (split, &count) in Split::ALL.iter().zip(&counts) {
        if count == 0 {
            continue;
        }
        if count < lookback + horizon {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: start as u64 + 2,
                msg: format!(
                    "{split:?} split starting here has {count} rows, fewer than lookback + horizon = {}",
                    lookback + horizon
                ),
            });
        }
        windows.extend(forecast_windows(&scaled, start, count, lookback, horizon, *split));
        start += count;
    }
    Ok(WindowedDataset { lookback, horizon, channels: c, windows })
}

/// Writes a series as CSV with a `step` timestamp column, in the format
/// [`load_csv`] reads.
pub fn write_series_csv(path: &Path, names: &[String], values: &Matrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut header = vec!["step".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(|e| Error::io(path, e.into()))?;
    for i in 0..values.rows() {
        let mut rec = vec![i.to_string()];
        rec.extend(values.row(i).iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reassembles the contiguous series underlying a forecasting dataset (first
/// window's lookback, then each following window's last horizon row, per
/// split).
pub fn forecast_series(dataset: &WindowedDataset) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for split in Split::ALL {
        let mut first = true;
        for w in dataset.split(split) {
            let Target::Horizon(h) = &w.target else {
                return Err(Error::invalid("not a forecasting dataset"));
            };
            if first {
                rows.extend((0..w.lookback.rows()).map(|i| w.lookback.row(i).to_vec()));
                rows.extend((0..h.rows()).map(|i| h.row(i).to_vec()));
                first = false;
            } else {
                rows.push(h.row(h.rows() - 1).to_vec());
            }
        }
    }
    Matrix::from_rows(&rows)
}
