//! Matrix-level comparison of mixers: PSNR, JSD, rank diagnostics, nuclear
//! norm, the dense least-squares fit, and heatmap export.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamRole, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::mixers::MixerSpec;
use crate::tensor::{numerical_rank, singular_values, Matrix, DEFAULT_RANK_TOL};

/// A mixing matrix together with where it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerSnapshot {
    pub model: String,
    pub block: usize,
    pub head: usize,
    pub epoch: usize,
    pub matrix: Matrix,
    /// How the matrix was obtained, e.g. "mean over 32 calibration windows".
    pub normalization: String,
}

impl MixerSnapshot {
    pub fn new(model: impl Into<String>, block: usize, head: usize, epoch: usize, matrix: Matrix, normalization: impl Into<String>) -> Result<Self> {
        let (model, normalization) = (model.into(), normalization.into());
        if !matrix.is_square() || matrix.is_empty() {
            return Err(Error::invalid(format!("snapshot matrix must be square, got {:?}", matrix.shape())));
        }
        if model.is_empty() || normalization.is_empty() {
            return Err(Error::invalid("snapshot provenance fields must be non-empty"));
        }
        Ok(MixerSnapshot { model, block, head, epoch, matrix, normalization })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    /// Decibels; `+∞` when the matrices are identical.
    #[serde(with = "extended_f64")]
    pub db: f64,
    /// Both matrices were min-max rescaled because the original's maximum
    /// entry was not positive.
    pub rescaled: bool,
}

/// `10·log₁₀(M_max² / MSE)` with `M_max` the largest entry of `m`.
pub fn psnr(m: &Matrix, m_tilde: &Matrix) -> Result<Psnr> {
    same_shape("psnr", m, m_tilde)?;
    if m.is_empty() {
        return Err(Error::invalid("psnr of empty matrices"));
    }
    let (a, b, rescaled) = if m.max() > 0.0 {
        (m.clone(), m_tilde.clone(), false)
    } else {
        let lo = m.min().min(m_tilde.min());
        let hi = m.max().max(m_tilde.max());
        if hi == lo {
            return Ok(Psnr { db: f64::INFINITY, rescaled: true });
        }
        let f = |v: f64| (v - lo) / (hi - lo);
        (m.map(f), m_tilde.map(f), true)
    };
    let mse = a.sub(&b)?.map(|v| v * v).mean();
    if mse == 0.0 {
        return Ok(Psnr { db: f64::INFINITY, rescaled });
    }
    let peak = a.max();
    if peak <= 0.0 {
        return Err(Error::Undefined("psnr peak is not positive after rescaling".into()));
    }
    Ok(Psnr { db: 10.0 * (peak * peak / mse).log10(), rescaled })
}

/// Jensen–Shannon divergence (natural log) between the entry distributions
/// `|M| / Σ|M|` and `|M̃| / Σ|M̃|`.
pub fn jsd(m: &Matrix, m_tilde: &Matrix) -> Result<f64> {
    same_shape("jsd", m, m_tilde)?;
    let p = abs_distribution(m)?;
    let q = abs_distribution(m_tilde)?;
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(&q) {
        // Ordered pair so that swapping the arguments is bit-for-bit symmetric.
        let (lo, hi) = if pi <= qi { (pi, qi) } else { (qi, pi) };
        let mi = 0.5 * (lo + hi);
        let half_kl = |x: f64| if x > 0.0 { 0.5 * x * (x / mi).ln() } else { 0.0 };
        acc += half_kl(lo) + half_kl(hi);
    }
    Ok(acc.clamp(0.0, std::f64::consts::LN_2))
}

/// Normalisation used by [`jsd`], recorded in reports.
pub const JSD_NORMALIZATION: &str = "absolute values normalised to unit sum";

fn abs_distribution(m: &Matrix) -> Result<Vec<f64>> {
    let total: f64 = m.data().iter().map(|v| v.abs()).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::invalid("jsd needs a matrix with a finite, nonzero entry mass"));
    }
    Ok(m.data().iter().map(|v| v.abs() / total).collect())
}

pub fn nuclear_norm(m: &Matrix) -> Result<f64> {
    Ok(singular_values(m)?.iter().sum())
}

/// Theoretical rank ceiling of a family's `n × n` mixing matrix.
pub fn rank_bound(spec: &MixerSpec, n: usize) -> usize {
    let bound = match *spec {
        MixerSpec::Attention { head_dim, .. } => head_dim,
        MixerSpec::Toeplitz { kernel_size, .. } => kernel_size + 1,
        MixerSpec::Semiseparable { state_size, .. } => state_size * n.div_ceil(state_size.max(1)),
        MixerSpec::MaskedLowRank { hidden } => hidden,
        MixerSpec::Dense { .. } | MixerSpec::Autocorrelation { .. } => n,
    };
    bound.min(n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankReport {
    pub rank: usize,
    pub bound: usize,
    pub pass: bool,
}

pub fn rank_report(snapshot: &MixerSnapshot, spec: &MixerSpec) -> Result<RankReport> {
    let rank = numerical_rank(&snapshot.matrix, DEFAULT_RANK_TOL)?;
    let bound = rank_bound(spec, snapshot.matrix.rows());
    Ok(RankReport { rank, bound, pass: rank <= bound })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub psnr: Psnr,
    pub jsd: f64,
    pub jsd_normalization: String,
    pub rank_orig: usize,
    pub rank_dense: usize,
    pub nuclear_norm_orig: f64,
    pub nuclear_norm_dense: f64,
}

pub fn similarity(orig: &Matrix, dense: &Matrix) -> Result<SimilarityReport> {
    Ok(SimilarityReport {
        psnr: psnr(orig, dense)?,
        jsd: jsd(orig, dense)?,
        jsd_normalization: JSD_NORMALIZATION.to_string(),
        rank_orig: numerical_rank(orig, DEFAULT_RANK_TOL)?,
        rank_dense: numerical_rank(dense, DEFAULT_RANK_TOL)?,
        nuclear_norm_orig: nuclear_norm(orig)?,
        nuclear_norm_dense: nuclear_norm(dense)?,
    })
}

/// Step budget and rate of [`fit_dense_to_structured`].
pub const FIT_STEPS: usize = 500;
pub const FIT_LR: f64 = 0.25;

/// Gradient descent from zero on `Σ (M̃ − M_target)²` through the tape;
/// returns the fit and its Frobenius residual.
pub fn fit_dense_to_structured(target: &Matrix) -> Result<(Matrix, f64)> {
    let mut store = ParamStore::new();
    store.add("m", Matrix::zeros(target.rows(), target.cols()), ParamRole::SequenceMixer)?;
    for _ in 0..FIT_STEPS {
        if store.value("m")?.sub(target)?.max_abs() == 0.0 {
            break;
        }
        store.zero_grad();
        let mut tape = Tape::new();
        let bind = tape.bind(&store);
        let t = tape.constant(target.clone());
        let diff = tape.sub(bind.get(0), t)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.sum(sq);
        tape.backward_into(loss, &mut store)?;
        let p = &mut store.params_mut()[0];
        let step = p.grad.scale(FIT_LR);
        p.value = p.value.sub(&step)?;
    }
    let fit = store.value("m")?.clone();
    let residual = fit.sub(target)?.frobenius_norm();
    Ok((fit, residual))
}

/// Writes `<base>.pgm` (binary 8-bit grayscale, min-max scaled, constant
/// matrices all white) and `<base>.csv` (one row per line, shortest
/// round-trip decimal form). Returns both paths.
pub fn export_heatmap(m: &Matrix, base: &Path) -> Result<(PathBuf, PathBuf)> {
    let pgm = base.with_extension("pgm");
    let csv = base.with_extension("csv");
    if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (lo, hi) = (m.min(), m.max());
    let mut bytes = format!("P5\n{} {}\n255\n", m.cols(), m.rows()).into_bytes();
    bytes.extend(m.data().iter().map(|&v| {
        if hi > lo {
            (255.0 * (v - lo) / (hi - lo)).round() as u8
        } else {
            255
        }
    }));
    fs::write(&pgm, bytes).map_err(|e| Error::io(&pgm, e))?;

    let mut f = fs::File::create(&csv).map_err(|e| Error::io(&csv, e))?;
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{}", line.join(",")).map_err(|e| Error::io(&csv, e))?;
    }
    Ok((pgm, csv))
}

/// Reads a headerless numeric CSV matrix as written by [`export_heatmap`].
pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|c| {
                c.trim().parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: i as u64 + 1,
                    msg: format!("not a number: `{c}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op, left: a.shape(), right: b.shape() });
    }
    Ok(())
}

/// Serialises non-finite floats as the strings `"inf"`, `"-inf"`, `"nan"`
/// (JSON has no literal for them); finite values stay numbers.
pub mod extended_f64 {
    use serde::de::{self, Deserializer, Visitor};
    use serde::Serializer;
    use std::fmt;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = f64;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a number or one of \"inf\", \"-inf\", \"nan\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
                Ok(v)
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
                Ok(v as f64)
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
                Ok(v as f64)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
                match v {
                    "inf" => Ok(f64::INFINITY),
                    "-inf" => Ok(f64::NEG_INFINITY),
                    "nan" => Ok(f64::NAN),
                    _ => Err(E::custom(format!("unexpected float string `{v}`"))),
                }
            }
        }
        d.deserialize_any(V)
    }
}
