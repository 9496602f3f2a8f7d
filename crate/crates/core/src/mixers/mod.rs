//! Every mixer family as (a) an explicit `n × n` matrix and (b) a structured
//! application that never forms it, plus the trainable dense replacement.

mod attention;
mod lowrank;
mod semiseparable;
mod toeplitz;

pub use attention::{attention_apply, build_attention_mixer, AttentionParams};
pub use lowrank::{build_masked_lowrank_mixer, masked_lowrank_apply, MaskedLowRankParams};
pub use semiseparable::{
    build_semiseparable_mixer, discretize_ssm, scan_semiseparable, semiseparable_from_factors, Discretized, HeadFactors,
    SemiseparableParams, Transition, DISCRETIZE_LIMIT,
};
pub use toeplitz::{
    autocorr_apply, autocorr_lags, build_autocorr_mixer, build_toeplitz_mixer, conv_apply,
    ToeplitzParams,
};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamRole, Parameter};
use crate::error::{Error, Result};
use crate::tensor::{matmul, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerFamily {
    Dense,
    Attention,
    Toeplitz,
    Autocorrelation,
    Semiseparable,
    MaskedLowRank,
}

impl MixerFamily {
    pub fn name(self) -> &'static str {
        match self {
            MixerFamily::Dense => "dense",
            MixerFamily::Attention => "attention",
            MixerFamily::Toeplitz => "toeplitz",
            MixerFamily::Autocorrelation => "autocorrelation",
            MixerFamily::Semiseparable => "semiseparable",
            MixerFamily::MaskedLowRank => "masked_lowrank",
        }
    }
}

impl fmt::Display for MixerFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MixerFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "dense" => MixerFamily::Dense,
            "attention" => MixerFamily::Attention,
            "toeplitz" => MixerFamily::Toeplitz,
            "autocorrelation" | "autocorr" => MixerFamily::Autocorrelation,
            "semiseparable" | "ssm" => MixerFamily::Semiseparable,
            "masked_lowrank" | "masked-lowrank" => MixerFamily::MaskedLowRank,
            other => return Err(Error::invalid(format!("unknown mixer family `{other}`"))),
        })
    }
}

/// Hyperparameters of one block's sequence mixer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MixerSpec {
    Dense { heads: usize },
    Attention { heads: usize, head_dim: usize },
    Toeplitz { heads: usize, kernel_size: usize, dilation: usize },
    Autocorrelation { heads: usize, head_dim: usize },
    /// One head per model channel (`heads = D`, head width 1).
    Semiseparable { state_size: usize, discretized: bool },
    MaskedLowRank { hidden: usize },
}

impl MixerSpec {
    pub fn family(&self) -> MixerFamily {
        match self {
            MixerSpec::Dense { .. } => MixerFamily::Dense,
            MixerSpec::Attention { .. } => MixerFamily::Attention,
            MixerSpec::Toeplitz { .. } => MixerFamily::Toeplitz,
            MixerSpec::Autocorrelation { .. } => MixerFamily::Autocorrelation,
            MixerSpec::Semiseparable { .. } => MixerFamily::Semiseparable,
            MixerSpec::MaskedLowRank { .. } => MixerFamily::MaskedLowRank,
        }
    }

    /// Number of independent mixing matrices for a block of width `width`.
    pub fn heads(&self, width: usize) -> usize {
        match *self {
            MixerSpec::Dense { heads }
            | MixerSpec::Attention { heads, .. }
            | MixerSpec::Toeplitz { heads, .. }
            | MixerSpec::Autocorrelation { heads, .. } => heads,
            MixerSpec::Semiseparable { .. } => width,
            MixerSpec::MaskedLowRank { .. } => 1,
        }
    }
}

/// `Y = M·V` for a square mixer `M`.
pub fn apply_mixer(m: &Matrix, v: &Matrix) -> Result<Matrix> {
    if !m.is_square() || m.cols() != v.rows() {
        return Err(Error::ShapeMismatch {
            op: "apply_mixer",
            left: m.shape(),
            right: v.shape(),
        });
    }
    matmul(m, v)
}

/// Initialisation of a dense replacement mixer.
#[derive(Clone, Debug, PartialEq)]
pub enum InitPolicy {
    Zero,
    /// Uniform on `[−1/√n, 1/√n]`.
    ScaledUniform,
    /// Exact copy of a given `n × n` matrix.
    Distill(Matrix),
}

/// Creates a trainable `n × n` dense mixer parameter.
pub fn make_dense_mixer<R: Rng + ?Sized>(
    name: impl Into<String>,
    n: usize,
    init: &InitPolicy,
    rng: &mut R,
) -> Result<Parameter> {
    if n == 0 {
        return Err(Error::invalid("dense mixer dimension must be at least 1"));
    }
    let value = match init {
        InitPolicy::Zero => Matrix::zeros(n, n),
        InitPolicy::ScaledUniform => {
            let bound = 1.0 / (n as f64).sqrt();
            Matrix::from_fn(n, n, |_, _| rng.random_range(-bound..=bound))
        }
        InitPolicy::Distill(m) => {
            if m.shape() != (n, n) {
                return Err(Error::ShapeMismatch {
                    op: "make_dense_mixer",
                    left: (n, n),
                    right: m.shape(),
                });
            }
            m.clone()
        }
    };
    Ok(Parameter::new(name, value, ParamRole::SequenceMixer))
}

pub(crate) fn check_shape(op: &'static str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::ShapeMismatch {
            op,
            left: (rows, cols),
            right: m.shape(),
        });
    }
    Ok(())
}
