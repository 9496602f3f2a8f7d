//! Adam with global-norm clipping, and the model training/evaluation loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{Split, Target, Window, WindowedDataset};
use super::metrics::{self, MaseScaling, Metrics};
use crate::autodiff::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::models::{Mode, SequenceModel, Targets, Task};
use crate::tensor::Matrix;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const CLIP_NORM: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Seeds the batch order.
    pub seed: u64,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() || self.batch_size == 0 {
            return Err(Error::invalid("learning rate must be finite and ≥ 0, batch size positive"));
        }
        Ok(())
    }
}

/// Adam state over the trainable parameters of one store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Adam {
        let zeros = || store.iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        Adam { lr, m: zeros(), v: zeros(), t: 0 }
    }

    /// One update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::invalid("optimizer state does not match the parameter store"));
        }
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (k, p) in store.iter_mut().enumerate() {
            if !p.trainable() {
                continue;
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, (w, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Rescales all trainable gradients so their joint L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter(|p| p.trainable())
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut().filter(|p| p.trainable()) {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Generic Adam loop with clipping. `step_loss` gets the store with zeroed
/// gradients, accumulates fresh ones into it and returns the loss. Aborts on
/// a non-finite loss, reporting the step.
pub fn fit_adam(
    store: &mut ParamStore,
    lr: f64,
    steps: usize,
    mut step_loss: impl FnMut(usize, &mut ParamStore) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut adam = Adam::new(store, lr);
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        store.zero_grad();
        let loss = step_loss(step, store)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        clip_global_norm(store, CLIP_NORM);
        adam.step(store)?;
        history.push(loss);
    }
    Ok(history)
}

/// Deterministic batch order: a fresh shuffle of the training indices each
/// epoch, consumed in `batch_size` chunks (the last chunk of an epoch may be
/// short).
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    n: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch == 0 {
            return Err(Error::invalid("batch sampler needs items and a positive batch size"));
        }
        Ok(BatchSampler { rng: ChaCha8Rng::seed_from_u64(seed), order: Vec::new(), pos: n, n, batch: batch.min(n) })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.n {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.n);
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub losses: Vec<f64>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

/// Supervision owned by a batch, convertible to [`Targets`].
enum BatchTargets {
    Forecast(Vec<Matrix>),
    Masked(Vec<Matrix>, Vec<Matrix>),
    Classes(Vec<usize>),
}

impl BatchTargets {
    fn collect(windows: &[&Window]) -> Result<BatchTargets> {
        let mismatch = || Error::invalid("dataset mixes target kinds");
        match &windows[0].target {
            Target::Horizon(_) => windows
                .iter()
                .map(|w| match &w.target {
                    Target::Horizon(h) => Ok(h.clone()),
                    _ => Err(mismatch()),
                })
                .collect::<Result<_>>()
                .map(BatchTargets::Forecast),
            Target::Imputation { .. } => {
                let (mut values, mut masks) = (Vec::new(), Vec::new());
                for w in windows {
                    let Target::Imputation { values: v, mask } = &w.target else {
                        return Err(mismatch());
                    };
                    values.push(v.clone());
                    masks.push(mask.clone());
                }
                Ok(BatchTargets::Masked(values, masks))
            }
            Target::Class(_) => windows
                .iter()
                .map(|w| match w.target {
                    Target::Class(k) => Ok(k),
                    _ => Err(mismatch()),
                })
                .collect::<Result<_>>()
                .map(BatchTargets::Classes),
        }
    }

    fn as_targets(&self) -> Targets<'_> {
        match self {
            BatchTargets::Forecast(ys) => Targets::Forecast(ys),
            BatchTargets::Masked(values, masks) => Targets::Masked { values, masks },
            BatchTargets::Classes(ys) => Targets::Classes(ys),
        }
    }
}

/// Trains on the dataset's training split with Adam, clipping, and
/// batch-norm running-statistic updates. Deterministic given `config.seed`.
pub fn train(model: &mut SequenceModel, dataset: &WindowedDataset, config: &TrainConfig) -> Result<TrainHistory> {
    config.validate()?;
    let train: Vec<&Window> = dataset.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::invalid("dataset has no training windows"));
    }
    let mut sampler = BatchSampler::new(train.len(), config.batch_size, config.seed)?;
    let mut adam = Adam::new(&model.params, config.lr);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx = sampler.next_batch();
        let batch: Vec<&Window> = idx.iter().map(|&i| train[i]).collect();
        let inputs: Vec<Matrix> = batch.iter().map(|w| w.lookback.clone()).collect();
        let targets = BatchTargets::collect(&batch)?;

        model.params.zero_grad();
        let mut tape = Tape::new();
        let bind = tape.bind(&model.params);
        let (loss, fwd) = model.loss(&mut tape, &bind, &model.params, &inputs, &targets.as_targets(), Mode::Train)?;
        let value = tape.value(loss)[(0, 0)];
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        tape.backward_into(loss, &mut model.params)?;
        clip_global_norm(&mut model.params, CLIP_NORM);
        adam.step(&mut model.params)?;
        model.update_running_stats(&fwd.batch_stats)?;
        losses.push(value);
    }
    Ok(TrainHistory { losses, steps: config.steps, batch_size: config.batch_size, lr: config.lr })
}

/// Windows scored per evaluation forward pass.
pub const EVAL_CHUNK: usize = 256;

/// Evaluation-mode predictions for every window of a split, chunked.
pub fn predict_split<'d>(model: &SequenceModel, dataset: &'d WindowedDataset, split: Split) -> Result<(Vec<&'d Window>, Matrix)> {
    let windows: Vec<&Window> = dataset.split(split).collect();
    if windows.is_empty() {
        return Err(Error::invalid(format!("dataset has no {split:?} windows")));
    }
    let mut parts = Vec::new();
    for chunk in windows.chunks(EVAL_CHUNK) {
        let inputs: Vec<Matrix> = chunk.iter().map(|w| w.lookback.clone()).collect();
        parts.push(model.predict(&inputs)?);
    }
    Ok((windows, Matrix::vstack(&parts)?))
}

/// Task metrics on one split. `mase_in_sample` scales MASE by each
/// window's lookback instead of its own forecast window.
pub fn evaluate(model: &SequenceModel, dataset: &WindowedDataset, split: Split, mase_in_sample: bool) -> Result<Metrics> {
    let (windows, pred) = predict_split(model, dataset, split)?;
    let mut out = Metrics { windows: windows.len(), ..Metrics::default() };
    match model.config.task {
        Task::Classification { classes } => {
            let mut truth = Vec::new();
            for w in &windows {
                let Target::Class(k) = w.target else {
                    return Err(Error::invalid("classification model on non-class targets"));
                };
                truth.push(k);
            }
            let labels: Vec<usize> = (0..pred.rows()).map(|i| argmax(pred.row(i))).collect();
            out.accuracy = Some(metrics::accuracy(&labels, &truth)?);
            out.macro_f1 = Some(metrics::macro_f1(&labels, &truth, classes)?);
        }
        Task::Forecast { horizon } => {
            let c = dataset.channels;
            let (mut se, mut ae, mut count) = (0.0, 0.0, 0.0);
            let (mut mase_sum, mut mase_n) = (0.0, 0usize);
            for (i, w) in windows.iter().enumerate() {
                let p = Matrix::from_vec(horizon, c, pred.row(i).to_vec())?;
                match &w.target {
                    Target::Horizon(truth) => {
                        let d = p.sub(truth)?;
                        se += d.data().iter().map(|v| v * v).sum::<f64>();
                        ae += d.data().iter().map(|v| v.abs()).sum::<f64>();
                        count += d.len() as f64;
                        for ch in 0..c {
                            let (pc, tc, hc) = (p.col_vec(ch), truth.col_vec(ch), w.lookback.col_vec(ch));
                            let scaling = if mase_in_sample { MaseScaling::InSample(&hc) } else { MaseScaling::InWindow };
                            match metrics::mase(&pc, &tc, scaling) {
                                Ok(m) => {
                                    mase_sum += m;
                                    mase_n += 1;
                                }
                                Err(Error::Undefined(_)) => out.mase_undefined += 1,
                                Err(Error::InvalidArgument(_)) => out.mase_undefined += 1,
                                Err(e) => return Err(e),
                            }
                        }
                    }
                    Target::Imputation { values, mask } => {
                        let d = p.sub(values)?.hadamard(mask)?;
                        se += d.data().iter().map(|v| v * v).sum::<f64>();
                        ae += d.data().iter().map(|v| v.abs()).sum::<f64>();
                        count += mask.sum();
                    }
                    Target::Class(_) => return Err(Error::invalid("forecasting model on class targets")),
                }
            }
            out.mse = Some(se / count);
            out.mae = Some(ae / count);
            out.mase = (mase_n > 0).then(|| mase_sum / mase_n as f64);
        }
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
