use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SequenceModel;
use crate::autodiff::{ParamRole, ParamStore};
use crate::error::{Error, Result};
use crate::mixers::{make_dense_mixer, InitPolicy, MixerSpec};
use crate::tensor::Matrix;

/// How dense replacements are initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseInit {
    Zero,
    Scaled,
    /// Copy of the source model's mean mixing matrix on a calibration batch.
    Distill,
}

impl fmt::Display for DenseInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DenseInit::Zero => "zero",
            DenseInit::Scaled => "scaled",
            DenseInit::Distill => "distill",
        })
    }
}

impl FromStr for DenseInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(DenseInit::Zero),
            "scaled" => Ok(DenseInit::Scaled),
            "distill" => Ok(DenseInit::Distill),
            _ => Err(Error::invalid(format!("unknown dense init `{s}`"))),
        }
    }
}

/// Replaces every block's structured mixer with independent trainable
/// `n × n` matrices, one per head, copying all other parameters.
/// `calibration` windows are required for [`DenseInit::Distill`].
pub fn convert_to_dense<R: Rng + ?Sized>(
    model: &SequenceModel,
    init: DenseInit,
    calibration: &[Matrix],
    rng: &mut R,
) -> Result<SequenceModel> {
    let trace = match init {
        DenseInit::Distill => {
            if calibration.is_empty() {
                return Err(Error::invalid("distill initialisation needs calibration windows"));
            }
            Some(model.trace(calibration)?)
        }
        _ => None,
    };
    let mut out = model.clone();
    for (i, blk) in out.blocks.iter_mut().enumerate() {
        let tag = match blk.mixer {
            MixerSpec::Attention { .. } => "attn",
            MixerSpec::Autocorrelation { .. } => "acorr",
            MixerSpec::Toeplitz { .. } => "conv",
            MixerSpec::Semiseparable { .. } => "ssm",
            MixerSpec::Dense { .. } | MixerSpec::MaskedLowRank { .. } => {
                return Err(Error::invalid(format!(
                    "block {i} has no structured sequence mixer to convert ({:?})",
                    blk.mixer.family()
                )))
            }
        };
        let heads = blk.mixer.heads(blk.shape.width);
        let prefix = format!("block{i}.{tag}.");
        out.params.remove_where(|p| p.name.starts_with(&prefix));
        let n = blk.shape.seq_len;
        for h in 0..heads {
            let policy = match (&trace, init) {
                (Some(t), _) => InitPolicy::Distill(t.blocks[i][h].clone()),
                (None, DenseInit::Zero) => InitPolicy::Zero,
                (None, _) => InitPolicy::ScaledUniform,
            };
            out.params.insert(make_dense_mixer(format!("block{i}.dense.h{h}"), n, &policy, rng)?)?;
        }
        blk.mixer = MixerSpec::Dense { heads };
    }
    Ok(out)
}

/// Trainable scalar counts by role.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub embedding: usize,
    pub sequence_mixer: usize,
    pub channel_mixer: usize,
    pub head: usize,
    pub total: usize,
}

pub fn census(params: &ParamStore) -> Census {
    let mut c = Census::default();
    for p in params.iter() {
        let k = p.value.len();
        match p.role {
            ParamRole::Embedding => c.embedding += k,
            ParamRole::SequenceMixer => c.sequence_mixer += k,
            ParamRole::ChannelMixer => c.channel_mixer += k,
            ParamRole::Head => c.head += k,
            ParamRole::Buffer => continue,
        }
        c.total += k;
    }
    c
}
