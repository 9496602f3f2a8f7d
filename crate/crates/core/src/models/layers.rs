//! Building blocks as plain matrix functions (reference semantics) and their
//! tape counterparts used by the models.

use std::rc::Rc;

use crate::autodiff::{Tape, Unary, Var, ZERO};
use crate::error::{Error, Result};
use crate::tensor::{matmul, Matrix};

pub const NORM_EPS: f64 = 1e-5;

/// `X·W_V + W_pos`.
pub fn embed(x: &Matrix, w_v: &Matrix, w_pos: &Matrix) -> Result<Matrix> {
    matmul(x, w_v)?.add(w_pos)
}

/// Non-overlapping patches: row `p` holds steps `pℓ..(p+1)ℓ` of every
/// channel, step-major then channel.
pub fn patchify(x: &Matrix, patch_len: usize) -> Result<Matrix> {
    let (len, ch) = x.shape();
    if patch_len == 0 || len % patch_len != 0 {
        return Err(Error::invalid(format!(
            "patch length {patch_len} does not divide sequence length {len}"
        )));
    }
    let patches = len / patch_len;
    Ok(Matrix::from_fn(patches, patch_len * ch, |p, k| {
        x[(p * patch_len + k / ch, k % ch)]
    }))
}

/// `relu(Y·W_up)·W_down` row by row.
pub fn channel_mixer_ffn(y: &Matrix, w_up: &Matrix, w_down: &Matrix) -> Result<Matrix> {
    matmul(&matmul(y, w_up)?.map(|v| v.max(0.0)), w_down)
}

/// One strided convolution stage of the downsampling front-end; `weight`
/// is `(kernel · in) × out`, row `k·in + f` pairing tap `k` with feature `f`.
#[derive(Clone, Debug, PartialEq)]
pub struct DownsampleStage {
    pub weight: Matrix,
    pub kernel: usize,
    pub stride: usize,
}

/// Row index (into a stacked `(S·len) × in` input) read by each entry of the
/// strided-window matrix `(S·len/stride) × (kernel·in)`; taps running past
/// the end of a sequence read zero.
pub(crate) fn window_index(
    seqs: usize,
    len: usize,
    width: usize,
    kernel: usize,
    stride: usize,
) -> Result<Vec<usize>> {
    if stride == 0 || kernel == 0 || len % stride != 0 {
        return Err(Error::invalid(format!(
            "stride {stride} (kernel {kernel}) does not divide length {len}"
        )));
    }
    let out_len = len / stride;
    let mut index = Vec::with_capacity(seqs * out_len * kernel * width);
    for s in 0..seqs {
        for t in 0..out_len {
            for k in 0..kernel {
                let src = t * stride + k;
                for f in 0..width {
                    index.push(if src < len {
                        (s * len + src) * width + f
                    } else {
                        ZERO
                    });
                }
            }
        }
    }
    Ok(index)
}

/// Per-feature standardisation over all rows.
pub fn standardize_columns(x: &Matrix) -> Matrix {
    let (r, c) = x.shape();
    let mut out = x.clone();
    for j in 0..c {
        let mean = (0..r).map(|i| x[(i, j)]).sum::<f64>() / r as f64;
        let var = (0..r).map(|i| (x[(i, j)] - mean).powi(2)).sum::<f64>() / r as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        for i in 0..r {
            out[(i, j)] = (x[(i, j)] - mean) * inv;
        }
    }
    out
}

/// Embeds every channel of `x` (`L × C`) as its own sequence through the
/// strided stages, standardising features after each one. Returns one
/// `L′ × D` matrix per channel.
pub fn downsample_embed(x: &Matrix, stages: &[DownsampleStage]) -> Result<Vec<Matrix>> {
    let (len, ch) = x.shape();
    // Stack channels as sequences: row c·L + t.
    let mut cur = Matrix::from_fn(ch * len, 1, |r, _| x[(r % len, r / len)]);
    let mut cur_len = len;
    for st in stages {
        let width = cur.cols();
        if st.weight.rows() != st.kernel * width {
            return Err(Error::ShapeMismatch {
                op: "downsample_embed",
                left: (st.kernel * width, st.weight.cols()),
                right: st.weight.shape(),
            });
        }
        let index = window_index(ch, cur_len, width, st.kernel, st.stride)?;
        let out_len = cur_len / st.stride;
        let src = cur.data();
        let windows = Matrix::from_vec(
            ch * out_len,
            st.kernel * width,
            index.iter().map(|&i| if i == ZERO { 0.0 } else { src[i] }).collect(),
        )?;
        cur = standardize_columns(&matmul(&windows, &st.weight)?);
        cur_len = out_len;
    }
    Ok((0..ch).map(|c| cur.block(c * cur_len, (c + 1) * cur_len, 0, cur.cols())).collect())
}

/// Index that flips each of `seqs` consecutive `len`-row blocks.
pub(crate) fn reverse_index(seqs: usize, len: usize, width: usize) -> Rc<[usize]> {
    (0..seqs * len * width)
        .map(|k| {
            let (row, col) = (k / width, k % width);
            let (s, t) = (row / len, row % len);
            (s * len + len - 1 - t) * width + col
        })
        .collect()
}

/// `(S·n) × W` stacked → `n × (S·W)` with sequence `s` in columns `s·W..`.
pub(crate) fn seq_major_index(seqs: usize, len: usize, width: usize) -> Rc<[usize]> {
    let cols = seqs * width;
    (0..len * cols)
        .map(|k| {
            let (t, j) = (k / cols, k % cols);
            let (s, w) = (j / width, j % width);
            (s * len + t) * width + w
        })
        .collect()
}

/// Inverse of [`seq_major_index`].
pub(crate) fn stacked_index(seqs: usize, len: usize, width: usize) -> Rc<[usize]> {
    let cols = seqs * width;
    (0..seqs * len * width)
        .map(|k| {
            let (row, w) = (k / width, k % width);
            let (s, t) = (row / len, row % len);
            t * cols + s * width + w
        })
        .collect()
}

/// Repeats a `1 × c` row `rows` times.
pub(crate) fn broadcast_row(tape: &mut Tape, row: Var, rows: usize) -> Result<Var> {
    let c = tape.value(row).cols();
    let index: Rc<[usize]> = (0..rows * c).map(|k| k % c).collect();
    tape.gather(row, rows, c, index)
}

/// Repeats an `r × 1` column `cols` times.
pub(crate) fn broadcast_col(tape: &mut Tape, col: Var, cols: usize) -> Result<Var> {
    let r = tape.value(col).rows();
    let index: Rc<[usize]> = (0..r * cols).map(|k| k / cols).collect();
    tape.gather(col, r, cols, index)
}

/// Tiles an `n × c` block `times` times down the rows.
pub(crate) fn tile_rows(tape: &mut Tape, block: Var, times: usize) -> Result<Var> {
    let (n, c) = tape.value(block).shape();
    let index: Rc<[usize]> = (0..times * n * c).map(|k| k % (n * c)).collect();
    tape.gather(block, times * n, c, index)
}

/// Row-wise normalisation to zero mean, unit variance (no affine part).
pub(crate) fn layer_norm(tape: &mut Tape, x: Var) -> Result<Var> {
    let (r, c) = tape.value(x).shape();
    let avg = tape.constant(Matrix::filled(c, 1, 1.0 / c as f64));
    let mu = tape.matmul(x, avg)?;
    let mu_b = broadcast_col(tape, mu, c)?;
    let xc = tape.sub(x, mu_b)?;
    let sq = tape.mul(xc, xc)?;
    let var = tape.matmul(sq, avg)?;
    let inv = tape.unary(var, Unary::InvSqrt(NORM_EPS));
    let inv_b = broadcast_col(tape, inv, c)?;
    debug_assert_eq!(tape.value(inv_b).rows(), r);
    tape.mul(xc, inv_b)
}

/// Column-wise standardisation with batch statistics; also returns the
/// batch mean and (biased) variance for running-statistic updates.
pub(crate) fn batch_norm_train(tape: &mut Tape, x: Var) -> Result<(Var, Matrix, Matrix)> {
    let r = tape.value(x).rows();
    let avg = tape.constant(Matrix::filled(1, r, 1.0 / r as f64));
    let mu = tape.matmul(avg, x)?;
    let mu_b = broadcast_row(tape, mu, r)?;
    let xc = tape.sub(x, mu_b)?;
    let sq = tape.mul(xc, xc)?;
    let var = tape.matmul(avg, sq)?;
    let inv = tape.unary(var, Unary::InvSqrt(NORM_EPS));
    let inv_b = broadcast_row(tape, inv, r)?;
    let out = tape.mul(xc, inv_b)?;
    Ok((out, tape.value(mu).clone(), tape.value(var).clone()))
}

/// Column-wise standardisation with fixed statistics.
pub(crate) fn batch_norm_eval(tape: &mut Tape, x: Var, mean: Var, var: Var) -> Result<Var> {
    let r = tape.value(x).rows();
    let mu_b = broadcast_row(tape, mean, r)?;
    let xc = tape.sub(x, mu_b)?;
    let inv = tape.unary(var, Unary::InvSqrt(NORM_EPS));
    let inv_b = broadcast_row(tape, inv, r)?;
    tape.mul(xc, inv_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn embed_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let x = random(8, 3, &mut rng);
        let id = embed(&x, &Matrix::identity(3), &Matrix::zeros(8, 3)).unwrap();
        assert_eq!(id, x);
        let pos = random(8, 4, &mut rng);
        let z = embed(&Matrix::zeros(8, 3), &random(3, 4, &mut rng), &pos).unwrap();
        assert_eq!(z, pos);
        let w = random(3, 4, &mut rng);
        let e = embed(&x, &w, &pos).unwrap();
        for i in 0..8 {
            for j in 0..4 {
                let want = (0..3).map(|k| x[(i, k)] * w[(k, j)]).sum::<f64>() + pos[(i, j)];
                assert!((e[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn patchify_cases() {
        let x = Matrix::column(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            patchify(&x, 2).unwrap(),
            Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()
        );
        assert_eq!(patchify(&x, 1).unwrap(), x);
        assert_eq!(patchify(&x, 4).unwrap().shape(), (1, 4));
        assert!(patchify(&x, 3).is_err());

        let two = Matrix::from_rows(&[vec![1.0, 10.0], vec![2.0, 20.0]]).unwrap();
        assert_eq!(patchify(&two, 2).unwrap().data(), &[1.0, 10.0, 2.0, 20.0]);
    }

    #[test]
    fn ffn_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (up, down) = (random(3, 5, &mut rng), random(5, 3, &mut rng));
        assert_eq!(channel_mixer_ffn(&Matrix::zeros(4, 3), &up, &down).unwrap(), Matrix::zeros(4, 3));
        let neg = channel_mixer_ffn(&Matrix::ones(2, 3), &Matrix::filled(3, 5, -1.0), &down).unwrap();
        assert_eq!(neg, Matrix::zeros(2, 3));
        let y = random(4, 3, &mut rng);
        let z = channel_mixer_ffn(&y, &up, &down).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut want = 0.0;
                for u in 0..5 {
                    let pre: f64 = (0..3).map(|k| y[(i, k)] * up[(k, u)]).sum();
                    want += pre.max(0.0) * down[(u, j)];
                }
                assert!((z[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn downsample_single_stage_is_standardised_linear_map() {
        let x = Matrix::from_fn(8, 2, |t, c| (t * (c + 1)) as f64);
        let st = DownsampleStage { weight: Matrix::filled(1, 1, 1.0), kernel: 1, stride: 1 };
        let out = downsample_embed(&x, &[st]).unwrap();
        assert_eq!(out.len(), 2);
        let stacked = Matrix::vstack(&[Matrix::column(&x.col_vec(0)), Matrix::column(&x.col_vec(1))]).unwrap();
        let want = standardize_columns(&stacked);
        assert!(Matrix::vstack(&out).unwrap().max_abs_diff(&want) < 1e-12);

        let half = DownsampleStage { weight: Matrix::ones(2, 3), kernel: 2, stride: 2 };
        assert_eq!(downsample_embed(&x, &[half]).unwrap()[0].shape(), (4, 3));
        let bad = DownsampleStage { weight: Matrix::ones(3, 1), kernel: 3, stride: 3 };
        assert!(downsample_embed(&x, &[bad]).is_err());
    }

    #[test]
    fn downsample_two_stages_match_hand_unrolled_convolution() {
        let x = Matrix::column(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let s1 = DownsampleStage { weight: Matrix::column(&[1.0, 2.0]), kernel: 2, stride: 2 };
        let s2 = DownsampleStage { weight: Matrix::column(&[1.0, -1.0]), kernel: 2, stride: 2 };
        let out = downsample_embed(&x, &[s1, s2]).unwrap();
        // Stage 1: y_t = x_{2t} + 2·x_{2t+1} = [2, 8, 14, 20], then standardised.
        let y = standardize_columns(&Matrix::column(&[2.0, 8.0, 14.0, 20.0]));
        // Stage 2: z_t = y_{2t} − y_{2t+1}.
        let z = Matrix::column(&[y[(0, 0)] - y[(1, 0)], y[(2, 0)] - y[(3, 0)]]);
        assert!(out[0].max_abs_diff(&standardize_columns(&z)) < 1e-12);
    }

    #[test]
    fn index_helpers_are_inverse() {
        let (s, n, w) = (3, 4, 2);
        let data: Vec<usize> = (0..s * n * w).collect();
        let fwd = seq_major_index(s, n, w);
        let back = stacked_index(s, n, w);
        let moved: Vec<usize> = fwd.iter().map(|&i| data[i]).collect();
        let restored: Vec<usize> = back.iter().map(|&i| moved[i]).collect();
        assert_eq!(restored, data);
        let rev = reverse_index(s, n, w);
        let twice: Vec<usize> = rev.iter().map(|&i| rev[i]).collect();
        assert_eq!(twice, data);
    }
}
