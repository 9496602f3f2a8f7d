//! Experiment configuration and its `key = value` text format.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixers::MixerFamily;
use crate::models::{DenseInit, ModelConfig, Norm, Task, Template};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Forecast,
    Imputation,
    Classification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Synthetic AR(p) series.
    Ar,
    /// A CSV file in the `load_csv` format.
    Csv,
    /// Sinusoid classification toy.
    Toy,
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, $($name:literal => $v:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($v),)+
                    _ => Err(Error::invalid(format!(concat!("unknown ", $what, " `{}`"), s))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $v { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

keyword_enum!(TaskKind, "task", "forecast" => TaskKind::Forecast, "imputation" => TaskKind::Imputation, "classification" => TaskKind::Classification);
keyword_enum!(DataSource, "data source", "ar" => DataSource::Ar, "csv" => DataSource::Csv, "toy" => DataSource::Toy);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub data: DataSource,
    pub csv_path: Option<PathBuf>,
    pub ar_coeffs: Vec<f64>,
    pub noise_std: f64,
    pub windows: usize,
    pub classes: usize,
    pub mask_ratio: f64,

    pub template: Template,
    pub mixer: Option<MixerFamily>,
    pub seq_len: usize,
    pub horizon: usize,
    pub channels: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub blocks: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub state_size: usize,
    pub discretized: bool,
    pub patch_len: usize,
    pub downsample: Vec<(usize, usize)>,
    pub norm: Option<Norm>,

    pub seed: u64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,

    pub dense_init: DenseInit,
    pub causal_dense: bool,
    /// Convert the trained original instead of a fresh copy of its
    /// initialisation (fine-tuning rather than training from scratch).
    pub jd_from_orig: bool,
    pub mase_in_sample: bool,
    /// Windows used for distillation and for mixer snapshots.
    pub calibration_windows: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskKind::Forecast,
            data: DataSource::Ar,
            csv_path: None,
            ar_coeffs: vec![1.2, -0.5],
            noise_std: 0.5,
            windows: 2000,
            classes: 3,
            mask_ratio: 0.25,
            template: Template::Transformer,
            mixer: None,
            seq_len: 32,
            horizon: 8,
            channels: 2,
            width: 4,
            heads: 2,
            ffn_hidden: 8,
            blocks: 2,
            kernel_size: 3,
            dilation: 1,
            state_size: 4,
            discretized: true,
            patch_len: 4,
            downsample: vec![(2, 2)],
            norm: None,
            seed: 0,
            lr: 3e-4,
            steps: 3000,
            batch_size: 32,
            dense_init: DenseInit::Scaled,
            causal_dense: false,
            jd_from_orig: false,
            mase_in_sample: false,
            calibration_windows: 32,
        }
    }
}

/// Every recognised key, in echo order.
pub const CONFIG_KEYS: &[&str] = &[
    "task", "data", "csv_path", "ar_coeffs", "noise_std", "windows", "classes", "mask_ratio",
    "template", "mixer", "seq_len", "horizon", "channels", "width", "heads", "ffn_hidden", "blocks",
    "kernel_size", "dilation", "state_size", "discretized", "patch_len", "downsample", "norm",
    "seed", "lr", "steps", "batch_size", "dense_init", "causal_dense", "jd_from_orig",
    "mase_in_sample", "calibration_windows",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::invalid(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::invalid(format!("bad boolean `{v}` for `{key}`"))),
    }
}

fn norm_name(n: Norm) -> &'static str {
    match n {
        Norm::LayerNorm => "layer",
        Norm::BatchNorm => "batch",
        Norm::None => "none",
    }
}

impl ExperimentConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "task" => self.task = v.parse()?,
            "data" => self.data = v.parse()?,
            "csv_path" => self.csv_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "ar_coeffs" => {
                self.ar_coeffs = v.split(',').map(|c| parse(key, c.trim())).collect::<Result<_>>()?;
            }
            "noise_std" => self.noise_std = parse(key, v)?,
            "windows" => self.windows = parse(key, v)?,
            "classes" => self.classes = parse(key, v)?,
            "mask_ratio" => self.mask_ratio = parse(key, v)?,
            "template" => self.template = v.parse()?,
            "mixer" => self.mixer = if v == "default" { None } else { Some(v.parse()?) },
            "seq_len" => self.seq_len = parse(key, v)?,
            "horizon" => self.horizon = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "ffn_hidden" => self.ffn_hidden = parse(key, v)?,
            "blocks" => self.blocks = parse(key, v)?,
            "kernel_size" => self.kernel_size = parse(key, v)?,
            "dilation" => self.dilation = parse(key, v)?,
            "state_size" => self.state_size = parse(key, v)?,
            "discretized" => self.discretized = parse_bool(key, v)?,
            "patch_len" => self.patch_len = parse(key, v)?,
            "downsample" => {
                self.downsample = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|stage| {
                            let (k, s) = stage
                                .trim()
                                .split_once('x')
                                .ok_or_else(|| Error::invalid(format!("downsample stage `{stage}` is not KxS")))?;
                            Ok((parse(key, k)?, parse(key, s)?))
                        })
                        .collect::<Result<_>>()?
                };
            }
            "norm" => self.norm = if v == "default" { None } else { Some(v.parse()?) },
            "seed" => self.seed = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "dense_init" => self.dense_init = v.parse()?,
            "causal_dense" => self.causal_dense = parse_bool(key, v)?,
            "jd_from_orig" => self.jd_from_orig = parse_bool(key, v)?,
            "mase_in_sample" => self.mase_in_sample = parse_bool(key, v)?,
            "calibration_windows" => self.calibration_windows = parse(key, v)?,
            _ => return Err(Error::invalid(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Textual value of one key, in the form [`ExperimentConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Result<String> {
        let list = |xs: &[f64]| xs.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
        Ok(match key {
            "task" => self.task.to_string(),
            "data" => self.data.to_string(),
            "csv_path" => self.csv_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "ar_coeffs" => list(&self.ar_coeffs),
            "noise_std" => format!("{}", self.noise_std),
            "windows" => self.windows.to_string(),
            "classes" => self.classes.to_string(),
            "mask_ratio" => format!("{}", self.mask_ratio),
            "template" => self.template.to_string(),
            "mixer" => self.mixer.map_or("default".into(), |m| m.to_string()),
            "seq_len" => self.seq_len.to_string(),
            "horizon" => self.horizon.to_string(),
            "channels" => self.channels.to_string(),
            "width" => self.width.to_string(),
            "heads" => self.heads.to_string(),
            "ffn_hidden" => self.ffn_hidden.to_string(),
            "blocks" => self.blocks.to_string(),
            "kernel_size" => self.kernel_size.to_string(),
            "dilation" => self.dilation.to_string(),
            "state_size" => self.state_size.to_string(),
            "discretized" => self.discretized.to_string(),
            "patch_len" => self.patch_len.to_string(),
            "downsample" => self.downsample.iter().map(|(k, s)| format!("{k}x{s}")).collect::<Vec<_>>().join(","),
            "norm" => self.norm.map_or("default", norm_name).to_string(),
            "seed" => self.seed.to_string(),
            "lr" => format!("{}", self.lr),
            "steps" => self.steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "dense_init" => self.dense_init.to_string(),
            "causal_dense" => self.causal_dense.to_string(),
            "jd_from_orig" => self.jd_from_orig.to_string(),
            "mase_in_sample" => self.mase_in_sample.to_string(),
            "calibration_windows" => self.calibration_windows.to_string(),
            _ => return Err(Error::invalid(format!("unknown config key `{key}`"))),
        })
    }

    /// All keys with their effective values.
    pub fn echo(&self) -> BTreeMap<String, String> {
        CONFIG_KEYS.iter().map(|&k| (k.to_string(), self.get(k).expect("known key"))).collect()
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    /// `origin` names the source in error messages.
    pub fn parse_str(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { path: origin.to_path_buf(), line: i as u64 + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            cfg.set(k.trim(), v).map_err(|e| err(e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, path)
    }

    /// Renders the effective configuration in the text format.
    pub fn to_text(&self) -> String {
        self.echo().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn model_config(&self) -> ModelConfig {
        let task = match self.task {
            TaskKind::Forecast => Task::Forecast { horizon: self.horizon },
            TaskKind::Imputation => Task::Forecast { horizon: self.seq_len },
            TaskKind::Classification => Task::Classification { classes: self.classes },
        };
        ModelConfig {
            template: self.template,
            seq_len: self.seq_len,
            channels: self.channels,
            width: self.width,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            blocks: self.blocks,
            task,
            mixer: self.mixer,
            kernel_size: self.kernel_size,
            dilation: self.dilation,
            state_size: self.state_size,
            discretized: self.discretized,
            patch_len: self.patch_len,
            downsample: self.downsample.clone(),
            norm: self.norm,
            residual: true,
            causal_dense: self.causal_dense,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.batch_size == 0 || !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("batch size must be positive and the learning rate finite, ≥ 0"));
        }
        if self.calibration_windows == 0 {
            return Err(Error::invalid("calibration_windows must be positive"));
        }
        match (self.task, self.data) {
            (TaskKind::Classification, DataSource::Toy) => {}
            (TaskKind::Classification, _) | (_, DataSource::Toy) => {
                return Err(Error::invalid("classification runs exactly on the toy data source"))
            }
            (_, DataSource::Csv) if self.csv_path.is_none() => {
                return Err(Error::invalid("data = csv needs csv_path"))
            }
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("template", "moderntcn").unwrap();
        cfg.set("ar_coeffs", "0.5, -0.25").unwrap();
        cfg.set("downsample", "2x2,3x1").unwrap();
        cfg.set("mixer", "ssm").unwrap();
        cfg.set("norm", "none").unwrap();
        cfg.set("csv_path", "data/x.csv").unwrap();
        let back = ExperimentConfig::parse_str(&cfg.to_text(), Path::new("mem")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.echo().len(), CONFIG_KEYS.len());
    }

    #[test]
    fn comments_and_errors() {
        let text = "# header\nsteps = 10  # short\n\nseed=7\n";
        let cfg = ExperimentConfig::parse_str(text, Path::new("c.cfg")).unwrap();
        assert_eq!((cfg.steps, cfg.seed), (10, 7));
        let err = ExperimentConfig::parse_str("steps = 1\nbogus = 2\n", Path::new("c.cfg")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = ExperimentConfig::parse_str("steps = many\n", Path::new("c.cfg")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        assert!(ExperimentConfig::parse_str("steps\n", Path::new("c.cfg")).is_err());
    }
}
