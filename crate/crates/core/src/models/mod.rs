//! Small sequence models assembled from a front-end, post-norm mixer blocks
//! and a flatten-linear head, plus the dense conversion pass.

mod checkpoint;
mod convert;
pub mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use convert::{census, convert_to_dense, Census, DenseInit};
pub use layers::{channel_mixer_ffn, downsample_embed, embed, patchify, DownsampleStage};

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Bindings, ParamRole, ParamStore, Tape, Unary, Var};
use crate::error::{Error, Result};
use crate::mixers::{build_toeplitz_mixer, semiseparable_from_factors, HeadFactors, MixerFamily, MixerSpec, ToeplitzParams};
use crate::tensor::{Matrix, Shape};

use layers::{
    batch_norm_eval, batch_norm_train, broadcast_row, layer_norm, reverse_index, seq_major_index,
    stacked_index, tile_rows, window_index,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Transformer,
    PatchTst,
    ITransformer,
    ModernTcn,
    Mamba,
    SMamba,
}

impl Template {
    pub const ALL: [Template; 6] = [
        Template::Transformer,
        Template::PatchTst,
        Template::ITransformer,
        Template::ModernTcn,
        Template::Mamba,
        Template::SMamba,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::Transformer => "transformer",
            Template::PatchTst => "patchtst",
            Template::ITransformer => "itransformer",
            Template::ModernTcn => "moderntcn",
            Template::Mamba => "mamba",
            Template::SMamba => "smamba",
        }
    }

    pub fn default_mixer(self) -> MixerFamily {
        match self {
            Template::Transformer | Template::PatchTst | Template::ITransformer => MixerFamily::Attention,
            Template::ModernTcn => MixerFamily::Toeplitz,
            Template::Mamba | Template::SMamba => MixerFamily::Semiseparable,
        }
    }

    pub fn default_norm(self) -> Norm {
        match self {
            Template::PatchTst | Template::ModernTcn => Norm::BatchNorm,
            _ => Norm::LayerNorm,
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Template::ALL
            .into_iter()
            .find(|t| t.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown template `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    LayerNorm,
    BatchNorm,
    None,
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" | "layernorm" | "layer_norm" => Ok(Norm::LayerNorm),
            "batch" | "batchnorm" | "batch_norm" => Ok(Norm::BatchNorm),
            "none" => Ok(Norm::None),
            _ => Err(Error::invalid(format!("unknown normalisation `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    Forecast { horizon: usize },
    Classification { classes: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FrontEnd {
    LinearEmbed,
    Patchify { patch_len: usize },
    /// `(kernel, stride)` per stage, one sequence per input channel.
    DownsampleEmbed { stages: Vec<(usize, usize)> },
    /// Channels become tokens; each channel's whole series is embedded.
    Transpose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub template: Template,
    pub seq_len: usize,
    pub channels: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub blocks: usize,
    pub task: Task,
    /// Overrides the template's structured mixer family.
    pub mixer: Option<MixerFamily>,
    pub kernel_size: usize,
    pub dilation: usize,
    pub state_size: usize,
    /// Use the discretised (Δ-dependent) semiseparable form.
    pub discretized: bool,
    pub patch_len: usize,
    pub downsample: Vec<(usize, usize)>,
    pub norm: Option<Norm>,
    pub residual: bool,
    /// Lower-triangular mask on dense replacement mixers.
    pub causal_dense: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            template: Template::Transformer,
            seq_len: 32,
            channels: 2,
            width: 8,
            heads: 2,
            ffn_hidden: 16,
            blocks: 2,
            task: Task::Forecast { horizon: 8 },
            mixer: None,
            kernel_size: 3,
            dilation: 1,
            state_size: 4,
            discretized: true,
            patch_len: 4,
            downsample: vec![(2, 2)],
            norm: None,
            residual: true,
            causal_dense: false,
        }
    }
}

impl ModelConfig {
    pub fn front_end(&self) -> FrontEnd {
        match self.template {
            Template::Transformer | Template::Mamba => FrontEnd::LinearEmbed,
            Template::PatchTst => FrontEnd::Patchify { patch_len: self.patch_len },
            Template::ITransformer | Template::SMamba => FrontEnd::Transpose,
            Template::ModernTcn => FrontEnd::DownsampleEmbed { stages: self.downsample.clone() },
        }
    }

    /// Mixing dimension `n` of every block.
    pub fn tokens(&self) -> Result<usize> {
        let l = self.seq_len;
        match self.front_end() {
            FrontEnd::LinearEmbed => Ok(l),
            FrontEnd::Patchify { patch_len } => {
                if patch_len == 0 || l % patch_len != 0 {
                    return Err(Error::invalid(format!(
                        "patch length {patch_len} does not divide lookback {l}"
                    )));
                }
                Ok(l / patch_len)
            }
            FrontEnd::Transpose => Ok(self.channels),
            FrontEnd::DownsampleEmbed { stages } => {
                let mut len = l;
                for &(k, s) in &stages {
                    if k == 0 || s == 0 || len % s != 0 {
                        return Err(Error::invalid(format!(
                            "downsampling stage (kernel {k}, stride {s}) does not divide length {len}"
                        )));
                    }
                    len /= s;
                }
                Ok(len)
            }
        }
    }

    /// Sequences per input window (one per channel for the per-variable
    /// front-end).
    pub fn seqs_per_sample(&self) -> usize {
        match self.front_end() {
            FrontEnd::DownsampleEmbed { .. } => self.channels,
            _ => 1,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self.task {
            Task::Forecast { horizon } => horizon * self.channels,
            Task::Classification { classes } => classes,
        }
    }

    pub fn bidirectional(&self) -> bool {
        self.template == Template::SMamba
    }

    pub fn norm(&self) -> Norm {
        self.norm.unwrap_or_else(|| self.template.default_norm())
    }

    pub fn mixer_spec(&self) -> Result<MixerSpec> {
        let family = self.mixer.unwrap_or_else(|| self.template.default_mixer());
        let head_dim = self.width / self.heads.max(1);
        Ok(match family {
            MixerFamily::Attention => MixerSpec::Attention { heads: self.heads, head_dim },
            MixerFamily::Autocorrelation => MixerSpec::Autocorrelation { heads: self.heads, head_dim },
            MixerFamily::Toeplitz => MixerSpec::Toeplitz {
                heads: self.heads,
                kernel_size: self.kernel_size,
                dilation: self.dilation,
            },
            MixerFamily::Semiseparable => MixerSpec::Semiseparable {
                state_size: self.state_size,
                discretized: self.discretized,
            },
            MixerFamily::Dense | MixerFamily::MaskedLowRank => {
                return Err(Error::invalid(format!(
                    "`{family}` is not a structured block mixer; use convert_to_dense for dense blocks"
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.channels == 0 || self.blocks == 0 || self.ffn_hidden == 0 {
            return Err(Error::invalid("lookback, channels, blocks and FFN width must be positive"));
        }
        match self.task {
            Task::Forecast { horizon: 0 } => return Err(Error::invalid("horizon must be positive")),
            Task::Classification { classes } if classes < 2 => {
                return Err(Error::invalid("classification needs at least two classes"))
            }
            _ => {}
        }
        let n = self.tokens()?;
        Shape::new(n, self.channels, self.width, self.heads)?;
        let spec = self.mixer_spec()?;
        match spec {
            MixerSpec::Toeplitz { kernel_size, dilation, .. } => {
                ToeplitzParams::new(vec![0.0; kernel_size], dilation).validate(n)?;
            }
            MixerSpec::Semiseparable { state_size: 0, .. } => {
                return Err(Error::invalid("state size must be positive"))
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub shape: Shape,
    pub mixer: MixerSpec,
    pub ffn_hidden: usize,
    pub norm: Norm,
    pub residual: bool,
    pub causal_dense: bool,
    pub bidirectional: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalisation layers.
    Train,
    /// Running statistics in normalisation layers.
    Eval,
}

/// Per-block, per-head mixing matrices averaged over every sequence of a
/// forward pass (forward direction only for bidirectional blocks).
#[derive(Clone, Debug, PartialEq)]
pub struct MixerTrace {
    pub families: Vec<MixerFamily>,
    pub blocks: Vec<Vec<Matrix>>,
}

pub struct Forward {
    pub output: Var,
    pub trace: Option<MixerTrace>,
    /// `(buffer prefix, batch mean, batch variance)` from training-mode
    /// batch normalisation, in evaluation order.
    pub batch_stats: Vec<(String, Matrix, Matrix)>,
}

/// Running-statistic momentum for batch normalisation.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceModel {
    pub config: ModelConfig,
    pub blocks: Vec<BlockConfig>,
    pub params: ParamStore,
}

fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

struct Ctx {
    mode: Mode,
    trace: Option<Vec<Vec<Matrix>>>,
    stats: Vec<(String, Matrix, Matrix)>,
}

impl SequenceModel {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let n = config.tokens()?;
        let d = config.width;
        let shape = Shape::new(n, config.channels, d, config.heads)?;
        let mixer = config.mixer_spec()?;
        let norm = config.norm();
        let mut params = ParamStore::new();

        match config.front_end() {
            FrontEnd::LinearEmbed | FrontEnd::Patchify { .. } | FrontEnd::Transpose => {
                let input = match config.front_end() {
                    FrontEnd::LinearEmbed => config.channels,
                    FrontEnd::Patchify { patch_len } => patch_len * config.channels,
                    _ => config.seq_len,
                };
                params.add("embed.w_v", uniform(input, d, fan_in_bound(input), rng), ParamRole::Embedding)?;
                params.add("embed.w_pos", uniform(n, d, 0.1, rng), ParamRole::Embedding)?;
            }
            FrontEnd::DownsampleEmbed { stages } => {
                let mut input = 1;
                for (i, &(k, _)) in stages.iter().enumerate() {
                    let fan = k * input;
                    params.add(format!("front.stage{i}.w"), uniform(fan, d, fan_in_bound(fan), rng), ParamRole::Embedding)?;
                    add_bn_buffers(&mut params, &format!("front.stage{i}.bn"), d)?;
                    input = d;
                }
            }
        }

        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let p = format!("block{i}");
            match &mixer {
                MixerSpec::Attention { heads, head_dim } | MixerSpec::Autocorrelation { heads, head_dim } => {
                    let tag = if mixer.family() == MixerFamily::Attention { "attn" } else { "acorr" };
                    for h in 0..*heads {
                        for w in ["w_q", "w_k"] {
                            params.add(
                                format!("{p}.{tag}.h{h}.{w}"),
                                uniform(d, *head_dim, fan_in_bound(d), rng),
                                ParamRole::SequenceMixer,
                            )?;
                        }
                    }
                }
                MixerSpec::Toeplitz { heads, kernel_size, .. } => {
                    params.add(
                        format!("{p}.conv.kernel"),
                        uniform(*heads, *kernel_size, fan_in_bound(*kernel_size), rng),
                        ParamRole::SequenceMixer,
                    )?;
                }
                MixerSpec::Semiseparable { state_size, discretized } => {
                    let s = *state_size;
                    params.add(format!("{p}.ssm.w_b"), uniform(d, s, fan_in_bound(d), rng), ParamRole::SequenceMixer)?;
                    params.add(format!("{p}.ssm.w_c"), uniform(d, s, fan_in_bound(d), rng), ParamRole::SequenceMixer)?;
                    if *discretized {
                        params.add(format!("{p}.ssm.w_delta"), uniform(d, d, fan_in_bound(d), rng), ParamRole::SequenceMixer)?;
                        let a_log = Matrix::from_fn(d, s, |_, k| ((k + 1) as f64).ln());
                        params.add(format!("{p}.ssm.a_log"), a_log, ParamRole::SequenceMixer)?;
                    } else {
                        let a = Matrix::from_fn(n, s, |_, _| rng.random_range(0.5..1.0));
                        params.add(format!("{p}.ssm.a"), a, ParamRole::SequenceMixer)?;
                    }
                }
                MixerSpec::Dense { .. } | MixerSpec::MaskedLowRank { .. } => unreachable!("validated"),
            }
            let u = config.ffn_hidden;
            params.add(format!("{p}.ffn.w_up"), uniform(d, u, fan_in_bound(d), rng), ParamRole::ChannelMixer)?;
            params.add(format!("{p}.ffn.w_down"), uniform(u, d, fan_in_bound(u), rng), ParamRole::ChannelMixer)?;
            if norm == Norm::BatchNorm {
                add_bn_buffers(&mut params, &format!("{p}.norm1"), d)?;
                add_bn_buffers(&mut params, &format!("{p}.norm2"), d)?;
            }
            blocks.push(BlockConfig {
                shape,
                mixer: mixer.clone(),
                ffn_hidden: u,
                norm,
                residual: config.residual,
                causal_dense: config.causal_dense,
                bidirectional: config.bidirectional(),
            });
        }

        let flat = config.seqs_per_sample() * n * d;
        let out = config.out_dim();
        params.add("head.w", uniform(flat, out, fan_in_bound(flat), rng), ParamRole::Head)?;
        params.add("head.b", Matrix::zeros(1, out), ParamRole::Head)?;

        Ok(SequenceModel { config: config.clone(), blocks, params })
    }

    pub fn tokens(&self) -> usize {
        self.blocks[0].shape.seq_len
    }

    /// Full forward pass over a batch of `L × C` windows; output is
    /// `B × out_dim` (forecasts flattened step-major: entry `t·C + c`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        store: &ParamStore,
        batch: &[Matrix],
        mode: Mode,
        trace: bool,
    ) -> Result<Forward> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let (l, c) = (self.config.seq_len, self.config.channels);
        if let Some(bad) = batch.iter().find(|x| x.shape() != (l, c)) {
            return Err(Error::ShapeMismatch { op: "forward", left: (l, c), right: bad.shape() });
        }
        let mut ctx = Ctx {
            mode,
            trace: trace.then(Vec::new),
            stats: Vec::new(),
        };
        let mut v = self.front(tape, bind, store, batch, &mut ctx)?;
        let seqs = batch.len() * self.config.seqs_per_sample();
        for (i, blk) in self.blocks.iter().enumerate() {
            v = self.apply_block(tape, bind, store, i, blk, v, seqs, &mut ctx)?;
        }
        let b = batch.len();
        let flat_cols = tape.value(v).len() / b;
        let flat = tape.reshape(v, b, flat_cols)?;
        let w = bind.by_name(store, "head.w")?;
        let bias = bind.by_name(store, "head.b")?;
        let proj = tape.matmul(flat, w)?;
        let bias_b = broadcast_row(tape, bias, b)?;
        let output = tape.add(proj, bias_b)?;
        Ok(Forward {
            output,
            trace: ctx.trace.map(|blocks| MixerTrace {
                families: self.blocks.iter().map(|b| b.mixer.family()).collect(),
                blocks,
            }),
            batch_stats: ctx.stats,
        })
    }

    /// Evaluation-mode predictions without gradients.
    pub fn predict(&self, batch: &[Matrix]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let bind = tape.bind(&self.params);
        let f = self.forward(&mut tape, &bind, &self.params, batch, Mode::Eval, false)?;
        Ok(tape.value(f.output).clone())
    }

    /// Mean mixing matrices per block and head at `batch` (evaluation mode).
    pub fn trace(&self, batch: &[Matrix]) -> Result<MixerTrace> {
        let mut tape = Tape::new();
        let bind = tape.bind(&self.params);
        let f = self.forward(&mut tape, &bind, &self.params, batch, Mode::Eval, true)?;
        Ok(f.trace.expect("trace requested"))
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[(String, Matrix, Matrix)]) -> Result<()> {
        for (prefix, mean, var) in stats {
            for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
                let p = self.params.get_mut(&format!("{prefix}.{suffix}"))?;
                let blended = p.value.scale(1.0 - BN_MOMENTUM).add(&batch.scale(BN_MOMENTUM))?;
                p.value = blended;
            }
        }
        Ok(())
    }

    /// Applies block `index` alone to one `n × D` token sequence (evaluation
    /// mode), including the bidirectional composition where configured.
    pub fn forward_block(&self, index: usize, v: &Matrix) -> Result<Matrix> {
        let blk = self
            .blocks
            .get(index)
            .ok_or_else(|| Error::invalid(format!("block {index} out of range")))?;
        let n = blk.shape.seq_len;
        if v.cols() != blk.shape.width || v.rows() % n != 0 || v.is_empty() {
            return Err(Error::ShapeMismatch { op: "forward_block", left: (n, blk.shape.width), right: v.shape() });
        }
        let mut tape = Tape::new();
        let bind = tape.bind(&self.params);
        let mut ctx = Ctx { mode: Mode::Eval, trace: None, stats: Vec::new() };
        let x = tape.constant(v.clone());
        let y = self.apply_block(&mut tape, &bind, &self.params, index, blk, x, v.rows() / n, &mut ctx)?;
        Ok(tape.value(y).clone())
    }

    fn front(&self, tape: &mut Tape, bind: &Bindings, store: &ParamStore, batch: &[Matrix], ctx: &mut Ctx) -> Result<Var> {
        let b = batch.len();
        match self.config.front_end() {
            FrontEnd::LinearEmbed | FrontEnd::Patchify { .. } | FrontEnd::Transpose => {
                let rows: Vec<Matrix> = match self.config.front_end() {
                    FrontEnd::LinearEmbed => batch.to_vec(),
                    FrontEnd::Patchify { patch_len } => {
                        batch.iter().map(|x| patchify(x, patch_len)).collect::<Result<_>>()?
                    }
                    _ => batch.iter().map(Matrix::transpose).collect(),
                };
                let x = tape.constant(Matrix::vstack(&rows)?);
                let w_v = bind.by_name(store, "embed.w_v")?;
                let w_pos = bind.by_name(store, "embed.w_pos")?;
                let proj = tape.matmul(x, w_v)?;
                let pos = tile_rows(tape, w_pos, b)?;
                tape.add(proj, pos)
            }
            FrontEnd::DownsampleEmbed { stages } => {
                let (l, c) = (self.config.seq_len, self.config.channels);
                let seqs = b * c;
                let stacked = Matrix::from_fn(seqs * l, 1, |r, _| {
                    let (s, t) = (r / l, r % l);
                    batch[s / c][(t, s % c)]
                });
                let mut cur = tape.constant(stacked);
                let mut len = l;
                for (i, &(k, stride)) in stages.iter().enumerate() {
                    let width = tape.value(cur).cols();
                    let index = window_index(seqs, len, width, k, stride)?;
                    len /= stride;
                    let windows = tape.gather(cur, seqs * len, k * width, Rc::from(index))?;
                    let w = bind.by_name(store, &format!("front.stage{i}.w"))?;
                    let proj = tape.matmul(windows, w)?;
                    cur = self.norm(tape, bind, store, Norm::BatchNorm, &format!("front.stage{i}.bn"), proj, ctx)?;
                }
                Ok(cur)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn norm(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        store: &ParamStore,
        norm: Norm,
        prefix: &str,
        x: Var,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        match norm {
            Norm::None => Ok(x),
            Norm::LayerNorm => layer_norm(tape, x),
            Norm::BatchNorm => match ctx.mode {
                Mode::Train => {
                    let (out, mean, var) = batch_norm_train(tape, x)?;
                    ctx.stats.push((prefix.to_string(), mean, var));
                    Ok(out)
                }
                Mode::Eval => {
                    let mean = bind.by_name(store, &format!("{prefix}.running_mean"))?;
                    let var = bind.by_name(store, &format!("{prefix}.running_var"))?;
                    batch_norm_eval(tape, x, mean, var)
                }
            },
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_block(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        store: &ParamStore,
        index: usize,
        blk: &BlockConfig,
        v: Var,
        seqs: usize,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let fwd = self.block_once(tape, bind, store, index, blk, v, seqs, ctx, true)?;
        if !blk.bidirectional {
            return Ok(fwd);
        }
        let (rows, width) = tape.value(v).shape();
        let n = rows / seqs;
        let rev = reverse_index(seqs, n, width);
        let vr = tape.gather(v, rows, width, rev.clone())?;
        let back = self.block_once(tape, bind, store, index, blk, vr, seqs, ctx, false)?;
        let back_r = tape.gather(back, rows, width, rev)?;
        tape.add(fwd, back_r)
    }

    #[allow(clippy::too_many_arguments)]
    fn block_once(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        store: &ParamStore,
        index: usize,
        blk: &BlockConfig,
        v: Var,
        seqs: usize,
        ctx: &mut Ctx,
        record: bool,
    ) -> Result<Var> {
        let p = format!("block{index}");
        let mut heads_trace = (record && ctx.trace.is_some()).then(Vec::new);
        let mixed = self.mixer(tape, bind, store, &p, blk, v, seqs, &mut heads_trace)?;
        if let (Some(t), Some(h)) = (ctx.trace.as_mut(), heads_trace) {
            t.push(h);
        }
        let a1 = if blk.residual { tape.add(v, mixed)? } else { mixed };
        let a1n = self.norm(tape, bind, store, blk.norm, &format!("{p}.norm1"), a1, ctx)?;
        let w_up = bind.by_name(store, &format!("{p}.ffn.w_up"))?;
        let w_down = bind.by_name(store, &format!("{p}.ffn.w_down"))?;
        let hidden = tape.matmul(a1n, w_up)?;
        let act = tape.relu(hidden);
        let f = tape.matmul(act, w_down)?;
        let a2 = if blk.residual { tape.add(a1n, f)? } else { f };
        self.norm(tape, bind, store, blk.norm, &format!("{p}.norm2"), a2, ctx)
    }

    #[allow(clippy::too_many_arguments)]
    fn mixer(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        store: &ParamStore,
        p: &str,
        blk: &BlockConfig,
        v: Var,
        seqs: usize,
        trace: &mut Option<Vec<Matrix>>,
    ) -> Result<Var> {
        let (rows, d) = tape.value(v).shape();
        let n = rows / seqs;
        let scale_mean = 1.0 / seqs as f64;
        match &blk.mixer {
            MixerSpec::Attention { heads, head_dim } | MixerSpec::Autocorrelation { heads, head_dim } => {
                let is_attn = blk.mixer.family() == MixerFamily::Attention;
                let tag = if is_attn { "attn" } else { "acorr" };
                let pd = *head_dim;
                // Lag selector: r[τ] = (1/P) Σ_t G[t+τ, t] for G = Q·Kᵀ.
                let selector = (!is_attn).then(|| {
                    tape.constant(Matrix::from_fn(n * n, n, |k, tau| {
                        let (a, b) = (k / n, k % n);
                        if a >= b && a - b == tau { 1.0 / pd as f64 } else { 0.0 }
                    }))
                });
                let toeplitz_index: Rc<[usize]> = (0..n * n).map(|k| (k / n).abs_diff(k % n)).collect();
                let mut outs = Vec::with_capacity(*heads);
                for h in 0..*heads {
                    let wq = bind.by_name(store, &format!("{p}.{tag}.h{h}.w_q"))?;
                    let wk = bind.by_name(store, &format!("{p}.{tag}.h{h}.w_k"))?;
                    let q = tape.matmul(v, wq)?;
                    let k = tape.matmul(v, wk)?;
                    let vh = tape.slice_cols(v, h * pd, pd)?;
                    let mut mean = trace.as_ref().map(|_| Matrix::zeros(n, n));
                    let mut ys = Vec::with_capacity(seqs);
                    for s in 0..seqs {
                        let qs = tape.slice_rows(q, s * n, n)?;
                        let ks = tape.slice_rows(k, s * n, n)?;
                        let kt = tape.transpose(ks)?;
                        let g = tape.matmul(qs, kt)?;
                        let m = if is_attn {
                            let scaled = tape.scale(g, 1.0 / (pd as f64).sqrt());
                            tape.softmax_rows(scaled)
                        } else {
                            let flat = tape.reshape(g, 1, n * n)?;
                            let lags = tape.matmul(flat, selector.expect("autocorrelation selector"))?;
                            tape.gather(lags, n, n, toeplitz_index.clone())?
                        };
                        if let Some(acc) = mean.as_mut() {
                            acc.add_assign(&tape.value(m).scale(scale_mean))?;
                        }
                        let vs = tape.slice_rows(vh, s * n, n)?;
                        ys.push(tape.matmul(m, vs)?);
                    }
                    if let (Some(t), Some(m)) = (trace.as_mut(), mean) {
                        t.push(m);
                    }
                    outs.push(tape.concat(&ys, Axis::Rows)?);
                }
                tape.concat(&outs, Axis::Cols)
            }
            MixerSpec::Toeplitz { heads, dilation, .. } => {
                let kernels = bind.by_name(store, &format!("{p}.conv.kernel"))?;
                if let Some(t) = trace.as_mut() {
                    let kv = tape.value(kernels);
                    for h in 0..*heads {
                        t.push(build_toeplitz_mixer(&ToeplitzParams::new(kv.row(h).to_vec(), *dilation), n)?);
                    }
                }
                tape.depthwise_conv(kernels, v, n, *dilation)
            }
            MixerSpec::Semiseparable { state_size, discretized } => {
                let s = *state_size;
                let cols = d * s;
                let w_b = bind.by_name(store, &format!("{p}.ssm.w_b"))?;
                let w_c = bind.by_name(store, &format!("{p}.ssm.w_c"))?;
                let b = tape.matmul(v, w_b)?;
                let c = tape.matmul(v, w_c)?;
                let per_state: Rc<[usize]> = (0..rows * cols).map(|k| (k / cols) * s + (k % cols) % s).collect();
                let b_e = tape.gather(b, rows, cols, per_state)?;
                let (abar, bbar) = if *discretized {
                    let w_delta = bind.by_name(store, &format!("{p}.ssm.w_delta"))?;
                    let a_log = bind.by_name(store, &format!("{p}.ssm.a_log"))?;
                    let pre = tape.matmul(v, w_delta)?;
                    let delta = tape.unary(pre, Unary::Softplus);
                    let per_channel: Rc<[usize]> = (0..rows * cols).map(|k| (k / cols) * d + (k % cols) / s).collect();
                    let delta_e = tape.gather(delta, rows, cols, per_channel)?;
                    let a_pos = tape.exp(a_log);
                    let a = tape.scale(a_pos, -1.0);
                    let a_row = tape.reshape(a, 1, cols)?;
                    let a_b = broadcast_row(tape, a_row, rows)?;
                    let z = tape.mul(delta_e, a_b)?;
                    let abar = tape.exp(z);
                    let phi = tape.unary(z, Unary::Phi1);
                    let scaled = tape.mul(phi, delta_e)?;
                    (abar, tape.mul(scaled, b_e)?)
                } else {
                    let a = bind.by_name(store, &format!("{p}.ssm.a"))?;
                    let tiled: Rc<[usize]> = (0..rows * cols).map(|k| ((k / cols) % n) * s + (k % cols) % s).collect();
                    (tape.gather(a, rows, cols, tiled)?, b_e)
                };
                if let Some(t) = trace.as_mut() {
                    let (av, bv, cv) = (tape.value(abar), tape.value(bbar), tape.value(c));
                    for h in 0..d {
                        let mut mean = Matrix::zeros(n, n);
                        for q in 0..seqs {
                            let f = HeadFactors {
                                a: Matrix::from_fn(n, s, |i, k| av[(q * n + i, h * s + k)]),
                                b: Matrix::from_fn(n, s, |i, k| bv[(q * n + i, h * s + k)]),
                                c: Matrix::from_fn(n, s, |i, k| cv[(q * n + i, k)]),
                            };
                            mean.add_assign(&semiseparable_from_factors(&f).scale(scale_mean))?;
                        }
                        t.push(mean);
                    }
                }
                tape.selective_scan(abar, bbar, c, v, n)
            }
            MixerSpec::Dense { heads } => {
                let pd = d / heads;
                let mask = blk.causal_dense.then(|| tape.constant(Matrix::lower_triangular_mask(n)));
                let to_seq = seq_major_index(seqs, n, pd);
                let back = stacked_index(seqs, n, pd);
                let mut outs = Vec::with_capacity(*heads);
                for h in 0..*heads {
                    let raw = bind.by_name(store, &format!("{p}.dense.h{h}"))?;
                    let m = match mask {
                        Some(mk) => tape.mul(raw, mk)?,
                        None => raw,
                    };
                    if let Some(t) = trace.as_mut() {
                        t.push(tape.value(m).clone());
                    }
                    let vh = tape.slice_cols(v, h * pd, pd)?;
                    let sm = tape.gather(vh, n, seqs * pd, to_seq.clone())?;
                    let y = tape.matmul(m, sm)?;
                    outs.push(tape.gather(y, rows, pd, back.clone())?);
                }
                tape.concat(&outs, Axis::Cols)
            }
            MixerSpec::MaskedLowRank { .. } => Err(Error::invalid(
                "the masked low-rank map acts on channels; it is not a block sequence mixer",
            )),
        }
    }

    /// Scalar training loss: MSE against flattened forecast targets (over
    /// the masked entries only for imputation) or mean softmax cross-entropy
    /// against class labels.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        store: &ParamStore,
        inputs: &[Matrix],
        targets: &Targets<'_>,
        mode: Mode,
    ) -> Result<(Var, Forward)> {
        let fwd = self.forward(tape, bind, store, inputs, mode, false)?;
        let out = fwd.output;
        let (b, k) = tape.value(out).shape();
        let loss = match targets {
            Targets::Forecast(ys) => {
                if ys.len() != b {
                    return Err(Error::invalid("target count differs from batch size"));
                }
                let flat: Vec<f64> = ys.iter().flat_map(|y| y.data().iter().copied()).collect();
                let target = tape.constant(Matrix::from_vec(b, k, flat)?);
                let diff = tape.sub(out, target)?;
                let sq = tape.mul(diff, diff)?;
                tape.mean(sq)
            }
            Targets::Masked { values, masks } => {
                if values.len() != b || masks.len() != b {
                    return Err(Error::invalid("target count differs from batch size"));
                }
                let flat = |ms: &[Matrix]| Matrix::from_vec(b, k, ms.iter().flat_map(|m| m.data().iter().copied()).collect());
                let (target, mask) = (flat(values)?, flat(masks)?);
                let count = mask.sum();
                if count <= 0.0 {
                    return Err(Error::invalid("imputation mask selects no entries"));
                }
                let target = tape.constant(target);
                let mask = tape.constant(mask);
                let diff = tape.sub(out, target)?;
                let masked = tape.mul(diff, mask)?;
                let sq = tape.mul(masked, masked)?;
                let total = tape.sum(sq);
                tape.scale(total, 1.0 / count)
            }
            Targets::Classes(labels) => {
                if labels.len() != b {
                    return Err(Error::invalid("label count differs from batch size"));
                }
                if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
                    return Err(Error::invalid(format!("label {bad} outside {k} classes")));
                }
                let probs = tape.softmax_rows(out);
                let logp = tape.unary(probs, Unary::Ln);
                let index: Rc<[usize]> = labels.iter().enumerate().map(|(i, &y)| i * k + y).collect();
                let picked = tape.gather(logp, 1, b, index)?;
                let m = tape.mean(picked);
                tape.scale(m, -1.0)
            }
        };
        Ok((loss, fwd))
    }
}

/// Supervision for [`SequenceModel::loss`].
pub enum Targets<'a> {
    /// One `T × C` horizon per window.
    Forecast(&'a [Matrix]),
    /// Reconstruction targets scored only where the 0/1 mask is 1.
    Masked { values: &'a [Matrix], masks: &'a [Matrix] },
    Classes(&'a [usize]),
}

fn add_bn_buffers(params: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    params.add(format!("{prefix}.running_mean"), Matrix::zeros(1, d), ParamRole::Buffer)?;
    params.add(format!("{prefix}.running_var"), Matrix::ones(1, d), ParamRole::Buffer)?;
    Ok(())
}

#[cfg(test)]
mod tests;
