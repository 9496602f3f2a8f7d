//! The original-versus-dense comparison pipeline and its JSON report.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DataSource, ExperimentConfig, TaskKind};
use super::data::{gen_classification_toy, gen_synthetic_ar, load_csv, mask_for_imputation, Split, SplitFractions, WindowedDataset};
use super::metrics::Metrics;
use super::train::{evaluate, train, TrainConfig, TrainHistory};
use crate::analysis::{jsd, rank_report, similarity, MixerSnapshot, RankReport, SimilarityReport};
use crate::error::{Error, Result};
use crate::mixers::{MixerFamily, MixerSpec};
use crate::models::{census, convert_to_dense, Census, SequenceModel};
use crate::tensor::Matrix;

pub const SCHEMA_VERSION: u32 = 1;

/// Fixed offsets from the master seed; both arms share the data and batch
/// streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedStreams {
    pub data: u64,
    pub init: u64,
    pub dense_init: u64,
    pub batches: u64,
    pub baseline: u64,
    pub mask: u64,
}

impl SeedStreams {
    pub fn from_master(seed: u64) -> SeedStreams {
        SeedStreams {
            data: seed,
            init: seed.wrapping_add(1),
            dense_init: seed.wrapping_add(2),
            batches: seed.wrapping_add(3),
            baseline: seed.wrapping_add(4),
            mask: seed.wrapping_add(5),
        }
    }
}

/// Mixing matrices of one model, one snapshot per (block, head), with the
/// block specs needed for rank bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSet {
    pub model: String,
    pub specs: Vec<MixerSpec>,
    pub snapshots: Vec<MixerSnapshot>,
}

impl SnapshotSet {
    /// Mean mixing matrices of `model` over `windows` in evaluation mode.
    pub fn capture(model: &SequenceModel, name: &str, windows: &[Matrix], epoch: usize) -> Result<SnapshotSet> {
        let trace = model.trace(windows)?;
        let normalization = format!("mean over {} evaluation-mode windows", windows.len());
        let mut snapshots = Vec::new();
        for (b, heads) in trace.blocks.into_iter().enumerate() {
            for (h, m) in heads.into_iter().enumerate() {
                snapshots.push(MixerSnapshot::new(name, b, h, epoch, m, normalization.clone())?);
            }
        }
        Ok(SnapshotSet { model: name.to_string(), specs: model.blocks.iter().map(|b| b.mixer.clone()).collect(), snapshots })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SnapshotSet> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAnalysis {
    pub block: usize,
    pub head: usize,
    pub orig_family: MixerFamily,
    pub similarity: SimilarityReport,
    pub rank_orig: RankReport,
    pub rank_dense: RankReport,
    /// JSD between the original snapshot and a U[0,1) random matrix.
    pub jsd_random_baseline: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub pairs: Vec<PairAnalysis>,
    pub mean_jsd: f64,
    pub mean_jsd_random_baseline: f64,
    /// Mean over pairs with finite PSNR; `None` if none is finite.
    pub mean_psnr_finite: Option<f64>,
    pub baseline_seed: u64,
}

/// Pairs snapshots by (block, head) and computes similarity, rank
/// diagnostics and the random-matrix JSD baseline.
pub fn analyze_snapshots(orig: &SnapshotSet, dense: &SnapshotSet, baseline_seed: u64) -> Result<AnalysisReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(baseline_seed);
    let mut pairs = Vec::new();
    for o in &orig.snapshots {
        let d = dense
            .snapshots
            .iter()
            .find(|d| d.block == o.block && d.head == o.head)
            .ok_or_else(|| Error::invalid(format!("no dense snapshot for block {} head {}", o.block, o.head)))?;
        let spec_of = |set: &SnapshotSet, block: usize| {
            set.specs.get(block).cloned().ok_or_else(|| Error::invalid(format!("snapshot set lacks a spec for block {block}")))
        };
        let (so, sd) = (spec_of(orig, o.block)?, spec_of(dense, d.block)?);
        let n = o.matrix.rows();
        let random = Matrix::from_fn(n, n, |_, _| rng.random::<f64>());
        pairs.push(PairAnalysis {
            block: o.block,
            head: o.head,
            orig_family: so.family(),
            similarity: similarity(&o.matrix, &d.matrix)?,
            rank_orig: rank_report(o, &so)?,
            rank_dense: rank_report(d, &sd)?,
            jsd_random_baseline: jsd(&o.matrix, &random)?,
        });
    }
    if pairs.is_empty() {
        return Err(Error::invalid("no snapshots to analyze"));
    }
    let k = pairs.len() as f64;
    let finite: Vec<f64> = pairs.iter().map(|p| p.similarity.psnr.db).filter(|v| v.is_finite()).collect();
    Ok(AnalysisReport {
        mean_jsd: pairs.iter().map(|p| p.similarity.jsd).sum::<f64>() / k,
        mean_jsd_random_baseline: pairs.iter().map(|p| p.jsd_random_baseline).sum::<f64>() / k,
        mean_psnr_finite: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
        pairs,
        baseline_seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    pub mixers: Vec<MixerFamily>,
    pub history: TrainHistory,
    pub val: Option<Metrics>,
    pub test: Metrics,
    pub census: Census,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    /// False when a stage failed; `error` then says which and why.
    pub complete: bool,
    pub error: Option<String>,
    pub seed: u64,
    pub seeds: SeedStreams,
    pub config: ExperimentConfig,
    pub config_echo: BTreeMap<String, String>,
    pub dataset: DatasetSummary,
    pub orig: Option<ArmReport>,
    pub jd: Option<ArmReport>,
    pub analysis: Option<AnalysisReport>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Everything a run produces beyond the report.
pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub orig: Option<SequenceModel>,
    pub jd: Option<SequenceModel>,
    pub snapshots_orig: Option<SnapshotSet>,
    pub snapshots_jd: Option<SnapshotSet>,
}

pub fn build_dataset(cfg: &ExperimentConfig, seeds: &SeedStreams) -> Result<WindowedDataset> {
    let forecast_horizon = match cfg.task {
        TaskKind::Forecast => cfg.horizon,
        _ => 1,
    };
    let base = match cfg.data {
        DataSource::Ar => {
            gen_synthetic_ar(cfg.seq_len, cfg.channels, forecast_horizon, &cfg.ar_coeffs, cfg.noise_std, cfg.windows, seeds.data)?
        }
        DataSource::Csv => {
            let path = cfg.csv_path.as_ref().ok_or_else(|| Error::invalid("data = csv needs csv_path"))?;
            let ds = load_csv(path, cfg.seq_len, forecast_horizon, SplitFractions::default())?;
            if ds.channels != cfg.channels {
                return Err(Error::invalid(format!("{} has {} channels, config says {}", path.display(), ds.channels, cfg.channels)));
            }
            ds
        }
        DataSource::Toy => gen_classification_toy(cfg.seq_len, cfg.channels, cfg.classes, cfg.windows, cfg.noise_std, seeds.data)?,
    };
    match cfg.task {
        TaskKind::Imputation => mask_for_imputation(&base, cfg.mask_ratio, seeds.mask),
        _ => Ok(base),
    }
}

fn summary(ds: &WindowedDataset) -> DatasetSummary {
    DatasetSummary { train: ds.count(Split::Train), val: ds.count(Split::Val), test: ds.count(Split::Test) }
}

fn lookbacks(ds: &WindowedDataset, split: Split, k: usize) -> Vec<Matrix> {
    ds.split(split).take(k).map(|w| w.lookback.clone()).collect()
}

fn train_config(cfg: &ExperimentConfig, seeds: &SeedStreams) -> TrainConfig {
    TrainConfig { lr: cfg.lr, steps: cfg.steps, batch_size: cfg.batch_size, seed: seeds.batches }
}

fn run_arm(name: &str, model: &mut SequenceModel, ds: &WindowedDataset, cfg: &ExperimentConfig, seeds: &SeedStreams) -> Result<ArmReport> {
    let start = Instant::now();
    let history = train(model, ds, &train_config(cfg, seeds))?;
    let val = if ds.count(Split::Val) > 0 { Some(evaluate(model, ds, Split::Val, cfg.mase_in_sample)?) } else { None };
    let test = evaluate(model, ds, Split::Test, cfg.mase_in_sample)?;
    Ok(ArmReport {
        name: name.to_string(),
        mixers: model.blocks.iter().map(|b| b.mixer.family()).collect(),
        history,
        val,
        test,
        census: census(&model.params),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

fn empty_report(cfg: &ExperimentConfig) -> ExperimentReport {
    ExperimentReport {
        schema_version: SCHEMA_VERSION,
        complete: false,
        error: None,
        seed: cfg.seed,
        seeds: SeedStreams::from_master(cfg.seed),
        config: cfg.clone(),
        config_echo: cfg.echo(),
        dataset: DatasetSummary::default(),
        orig: None,
        jd: None,
        analysis: None,
    }
}

/// Trains one arm only (`dense`: the converted arm, built from a fresh copy
/// of the original's initialisation).
pub fn run_single_arm(cfg: &ExperimentConfig, dense: bool) -> Result<ExperimentRun> {
    cfg.validate()?;
    let mut report = empty_report(cfg);
    let seeds = report.seeds;
    let ds = build_dataset(cfg, &seeds)?;
    report.dataset = summary(&ds);
    let mut model = SequenceModel::new(&cfg.model_config(), &mut ChaCha8Rng::seed_from_u64(seeds.init))?;
    if dense {
        let calibration = lookbacks(&ds, Split::Train, cfg.calibration_windows);
        model = convert_to_dense(&model, cfg.dense_init, &calibration, &mut ChaCha8Rng::seed_from_u64(seeds.dense_init))?;
    }
    let name = if dense { "jd" } else { "orig" };
    let mut run = ExperimentRun { report, orig: None, jd: None, snapshots_orig: None, snapshots_jd: None };
    match run_arm(name, &mut model, &ds, cfg, &seeds) {
        Ok(arm) => {
            let snaps = SnapshotSet::capture(&model, name, &lookbacks(&ds, Split::Test, cfg.calibration_windows), cfg.steps)?;
            if dense {
                (run.report.jd, run.jd, run.snapshots_jd) = (Some(arm), Some(model), Some(snaps));
            } else {
                (run.report.orig, run.orig, run.snapshots_orig) = (Some(arm), Some(model), Some(snaps));
            }
            run.report.complete = true;
        }
        Err(e) => run.report.error = Some(format!("{name} arm: {e}")),
    }
    Ok(run)
}

/// Full pipeline: train the original arm, convert to dense, train the dense
/// arm under the same budget and batch order, evaluate both on the test
/// split, and compare their mixing matrices.
///
/// Configuration and data errors are returned as `Err`; failures during
/// training or analysis yield a report with `complete = false`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    cfg.validate()?;
    let mut report = empty_report(cfg);
    let seeds = report.seeds;
    let ds = build_dataset(cfg, &seeds)?;
    report.dataset = summary(&ds);
    let initial = SequenceModel::new(&cfg.model_config(), &mut ChaCha8Rng::seed_from_u64(seeds.init))?;
    let mut run = ExperimentRun { report, orig: None, jd: None, snapshots_orig: None, snapshots_jd: None };
    if let Err(e) = pipeline(cfg, &seeds, &ds, initial, &mut run) {
        run.report.error = Some(e.to_string());
        return Ok(run);
    }
    run.report.complete = true;
    Ok(run)
}

fn pipeline(cfg: &ExperimentConfig, seeds: &SeedStreams, ds: &WindowedDataset, initial: SequenceModel, run: &mut ExperimentRun) -> Result<()> {
    let stage = |what: &'static str| move |e: Error| Error::invalid(format!("{what}: {e}"));
    let mut orig = initial.clone();
    run.report.orig = Some(run_arm("orig", &mut orig, ds, cfg, seeds).map_err(stage("orig arm"))?);

    let source = if cfg.jd_from_orig { &orig } else { &initial };
    let calibration = lookbacks(ds, Split::Train, cfg.calibration_windows);
    let mut jd = convert_to_dense(source, cfg.dense_init, &calibration, &mut ChaCha8Rng::seed_from_u64(seeds.dense_init))
        .map_err(stage("conversion"))?;
    let jd_arm = run_arm("jd", &mut jd, ds, cfg, seeds);
    run.orig = Some(orig);
    run.report.jd = Some(jd_arm.map_err(stage("jd arm"))?);

    let probe = lookbacks(ds, Split::Test, cfg.calibration_windows);
    let orig = run.orig.as_ref().expect("set above");
    let so = SnapshotSet::capture(orig, "orig", &probe, cfg.steps).map_err(stage("snapshots"))?;
    let sd = SnapshotSet::capture(&jd, "jd", &probe, cfg.steps).map_err(stage("snapshots"))?;
    run.jd = Some(jd);
    run.report.analysis = Some(analyze_snapshots(&so, &sd, seeds.baseline).map_err(stage("analysis"))?);
    run.snapshots_orig = Some(so);
    run.snapshots_jd = Some(sd);
    Ok(())
}
