use super::*;
use crate::autodiff::grad_check;
use crate::mixers::{build_attention_mixer, build_semiseparable_mixer, AttentionParams, SemiseparableParams, Transition};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn windows(count: usize, l: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<Matrix> {
    (0..count)
        .map(|_| Matrix::from_fn(l, c, |_, _| rng.random_range(-1.0..1.0)))
        .collect()
}

fn small(template: Template) -> ModelConfig {
    ModelConfig {
        template,
        seq_len: 8,
        channels: 2,
        width: 8,
        heads: 2,
        ffn_hidden: 6,
        blocks: 2,
        task: Task::Forecast { horizon: 2 },
        kernel_size: 3,
        state_size: 2,
        patch_len: 2,
        downsample: vec![(2, 2)],
        ..ModelConfig::default()
    }
}

#[test]
fn template_names_round_trip() {
    for t in Template::ALL {
        assert_eq!(t.name().parse::<Template>().unwrap(), t);
    }
    assert!("lstm".parse::<Template>().is_err());
}

#[test]
fn every_template_maps_batches_to_the_head_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let xs = windows(3, 8, 2, &mut rng);
    for t in Template::ALL {
        let m = SequenceModel::new(&small(t), &mut rng).unwrap();
        let y = m.predict(&xs).unwrap();
        assert_eq!(y.shape(), (3, 4), "{t}");
        assert!(y.is_finite());
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let bad_heads = ModelConfig { heads: 3, ..small(Template::Transformer) };
    assert!(SequenceModel::new(&bad_heads, &mut rng).is_err());
    let bad_patch = ModelConfig { patch_len: 3, ..small(Template::PatchTst) };
    assert!(SequenceModel::new(&bad_patch, &mut rng).is_err());
    let bad_band = ModelConfig { kernel_size: 4, dilation: 2, ..small(Template::ModernTcn) };
    assert!(SequenceModel::new(&bad_band, &mut rng).is_err());
    let dense = ModelConfig { mixer: Some(MixerFamily::Dense), ..small(Template::Transformer) };
    assert!(SequenceModel::new(&dense, &mut rng).is_err());
}

#[test]
fn identity_dense_block_without_norm_doubles_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let cfg = ModelConfig { norm: Some(Norm::None), ..small(Template::Transformer) };
    let m = SequenceModel::new(&cfg, &mut rng).unwrap();
    let mut jd = convert_to_dense(&m, DenseInit::Zero, &[], &mut rng).unwrap();
    for p in jd.params.iter_mut() {
        if p.name.starts_with("block0.dense.") {
            p.value = Matrix::identity(8);
        }
        if p.name.starts_with("block0.ffn.") {
            p.value = Matrix::zeros(p.value.rows(), p.value.cols());
        }
    }
    let v = windows(1, 8, 8, &mut rng).remove(0);
    let y = jd.forward_block(0, &v).unwrap();
    assert!(y.max_abs_diff(&v.scale(2.0)) < 1e-15);

    for p in jd.params.iter_mut() {
        p.value = Matrix::zeros(p.value.rows(), p.value.cols());
    }
    assert_eq!(jd.forward_block(1, &Matrix::zeros(8, 8)).unwrap(), Matrix::zeros(8, 8));
    assert_eq!(jd.forward_block(0, &v).unwrap().shape(), (8, 8));
}

#[test]
fn bidirectional_block_matches_hand_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let cfg = ModelConfig { channels: 6, ..small(Template::SMamba) };
    let m = SequenceModel::new(&cfg, &mut rng).unwrap();
    let mut single = m.clone();
    for b in &mut single.blocks {
        b.bidirectional = false;
    }
    let v = windows(1, 6, 8, &mut rng).remove(0);
    let fwd = single.forward_block(0, &v).unwrap();
    let back = single.forward_block(0, &v.reverse_rows()).unwrap().reverse_rows();
    let want = fwd.add(&back).unwrap();
    assert!(m.forward_block(0, &v).unwrap().max_abs_diff(&want) < 1e-12);

    let half = windows(1, 3, 8, &mut rng).remove(0);
    let pal = Matrix::vstack(&[half.clone(), half.reverse_rows()]).unwrap();
    let out = m.forward_block(0, &pal).unwrap();
    assert!(out.max_abs_diff(&out.reverse_rows()) < 1e-12);
    assert_eq!(v.reverse_rows().reverse_rows(), v);
}

#[test]
fn attention_trace_matches_standalone_construction() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let m = SequenceModel::new(&small(Template::Transformer), &mut rng).unwrap();
    let x = windows(1, 8, 2, &mut rng);
    let trace = m.trace(&x).unwrap();
    let p = &m.params;
    let emb = embed(&x[0], p.value("embed.w_v").unwrap(), p.value("embed.w_pos").unwrap()).unwrap();
    let ap = AttentionParams {
        w_q: (0..2).map(|h| p.value(&format!("block0.attn.h{h}.w_q")).unwrap().clone()).collect(),
        w_k: (0..2).map(|h| p.value(&format!("block0.attn.h{h}.w_k")).unwrap().clone()).collect(),
    };
    for h in 0..2 {
        let want = build_attention_mixer(&emb, &ap, h).unwrap();
        assert!(trace.blocks[0][h].max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn semiseparable_trace_matches_standalone_construction() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let m = SequenceModel::new(&small(Template::Mamba), &mut rng).unwrap();
    let x = windows(1, 8, 2, &mut rng);
    let trace = m.trace(&x).unwrap();
    let p = &m.params;
    let emb = embed(&x[0], p.value("embed.w_v").unwrap(), p.value("embed.w_pos").unwrap()).unwrap();
    let sp = SemiseparableParams {
        w_b: p.value("block0.ssm.w_b").unwrap().clone(),
        w_c: p.value("block0.ssm.w_c").unwrap().clone(),
        transition: Transition::Selective {
            a: p.value("block0.ssm.a_log").unwrap().map(|v| -v.exp()),
            w_delta: p.value("block0.ssm.w_delta").unwrap().clone(),
        },
    };
    assert_eq!(trace.blocks[0].len(), 8);
    for h in 0..8 {
        let want = build_semiseparable_mixer(&sp, &emb, h).unwrap();
        assert!(trace.blocks[0][h].max_abs_diff(&want) < 1e-12);
        assert!(trace.blocks[0][h].is_lower_triangular());
    }
}

#[test]
fn conversion_preserves_everything_but_the_mixers() {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let xs = windows(4, 8, 2, &mut rng);
    for t in Template::ALL {
        let m = SequenceModel::new(&small(t), &mut rng).unwrap();
        let jd = convert_to_dense(&m, DenseInit::Scaled, &[], &mut rng).unwrap();
        assert_eq!(jd.blocks.len(), m.blocks.len());
        for (a, b) in m.blocks.iter().zip(&jd.blocks) {
            assert_eq!(a.mixer.heads(8), b.mixer.heads(8));
            assert_eq!(b.mixer.family(), MixerFamily::Dense);
        }
        for p in m.params.iter().filter(|p| p.role != ParamRole::SequenceMixer) {
            assert_eq!(jd.params.value(&p.name).unwrap(), &p.value);
        }
        assert_eq!(jd.predict(&xs).unwrap().shape(), m.predict(&xs).unwrap().shape());
        assert!(convert_to_dense(&jd, DenseInit::Zero, &[], &mut rng).is_err());
    }
}

#[test]
fn attention_census_delta() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let cfg = small(Template::Transformer);
    let m = SequenceModel::new(&cfg, &mut rng).unwrap();
    let jd = convert_to_dense(&m, DenseInit::Zero, &[], &mut rng).unwrap();
    let (before, after) = (census(&m.params), census(&jd.params));
    let (d, h, pd, n) = (8i64, 2i64, 4i64, 8i64);
    let per_block = -2 * d * pd * h + h * n * n;
    assert_eq!(after.total as i64 - before.total as i64, cfg.blocks as i64 * per_block);
    assert_eq!(after.channel_mixer, before.channel_mixer);
    assert_eq!(after.head, before.head);
}

#[test]
fn distilled_toeplitz_model_is_exact_everywhere() {
    let mut rng = ChaCha8Rng::seed_from_u64(48);
    let m = SequenceModel::new(&small(Template::ModernTcn), &mut rng).unwrap();
    let calib = windows(3, 8, 2, &mut rng);
    let jd = convert_to_dense(&m, DenseInit::Distill, &calib, &mut rng).unwrap();
    let other = windows(5, 8, 2, &mut rng);
    assert!(jd.predict(&other).unwrap().max_abs_diff(&m.predict(&other).unwrap()) < 1e-9);
}

#[test]
fn distilled_input_dependent_models_are_exact_at_the_calibration_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(49);
    for t in [Template::Transformer, Template::ITransformer, Template::PatchTst, Template::Mamba] {
        let m = SequenceModel::new(&small(t), &mut rng).unwrap();
        let calib = windows(1, 8, 2, &mut rng);
        let jd = convert_to_dense(&m, DenseInit::Distill, &calib, &mut rng).unwrap();
        let diff = jd.predict(&calib).unwrap().max_abs_diff(&m.predict(&calib).unwrap());
        assert!(diff < 1e-9, "{t}: {diff}");
    }
}

fn check_template(cfg: &ModelConfig, rng: &mut ChaCha8Rng, dense: bool) -> f64 {
    let mut m = SequenceModel::new(cfg, rng).unwrap();
    if dense {
        m = convert_to_dense(&m, DenseInit::Scaled, &[], rng).unwrap();
    }
    let xs = windows(2, cfg.seq_len, cfg.channels, rng);
    let ys = windows(2, 2, cfg.channels, rng);
    let model = m.clone();
    let report = grad_check(&m.params, 1e-6, |tape, bind, store| {
        let (loss, _) = model.loss(tape, bind, store, &xs, &Targets::Forecast(&ys), Mode::Train)?;
        Ok(loss)
    })
    .unwrap();
    report.max_rel_error
}

#[test]
fn every_template_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for t in Template::ALL {
        for dense in [false, true] {
            let err = check_template(&small(t), &mut rng, dense);
            assert!(err <= 1e-5, "{t} dense={dense}: {err}");
        }
    }
}

#[test]
fn alternative_mixers_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let acorr = ModelConfig { mixer: Some(MixerFamily::Autocorrelation), ..small(Template::Transformer) };
    let raw = ModelConfig { discretized: false, ..small(Template::Mamba) };
    let causal = ModelConfig { causal_dense: true, ..small(Template::Mamba) };
    for (cfg, dense) in [(acorr, false), (raw, false), (causal, true)] {
        let err = check_template(&cfg, &mut rng, dense);
        assert!(err <= 1e-5, "{cfg:?}: {err}");
    }
}

#[test]
fn classification_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let cfg = ModelConfig { task: Task::Classification { classes: 3 }, ..small(Template::Transformer) };
    let m = SequenceModel::new(&cfg, &mut rng).unwrap();
    let xs = windows(3, 8, 2, &mut rng);
    let labels = [0usize, 2, 1];
    let report = grad_check(&m.params, 1e-6, |tape, bind, store| {
        Ok(m.loss(tape, bind, store, &xs, &Targets::Classes(&labels), Mode::Train)?.0)
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-5, "{}", report.max_rel_error);
    let mut tape = Tape::new();
    let bind = tape.bind(&m.params);
    assert!(m.loss(&mut tape, &bind, &m.params, &xs, &Targets::Classes(&[0, 3, 1]), Mode::Eval).is_err());
}

#[test]
fn causal_dense_mixer_ignores_the_future() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let cfg = ModelConfig { causal_dense: true, norm: Some(Norm::None), ..small(Template::Transformer) };
    let m = convert_to_dense(&SequenceModel::new(&cfg, &mut rng).unwrap(), DenseInit::Scaled, &[], &mut rng).unwrap();
    let v = windows(1, 8, 8, &mut rng).remove(0);
    let mut w = v.clone();
    w.row_mut(7).fill(5.0);
    let (a, b) = (m.forward_block(0, &v).unwrap(), m.forward_block(0, &w).unwrap());
    assert!(a.block(0, 7, 0, 8).max_abs_diff(&b.block(0, 7, 0, 8)) == 0.0);
}

#[test]
fn running_statistics_follow_momentum() {
    let mut rng = ChaCha8Rng::seed_from_u64(54);
    let mut m = SequenceModel::new(&small(Template::PatchTst), &mut rng).unwrap();
    let stats = vec![("block0.norm1".to_string(), Matrix::ones(1, 8), Matrix::filled(1, 8, 3.0))];
    m.update_running_stats(&stats).unwrap();
    assert!(m.params.value("block0.norm1.running_mean").unwrap().data().iter().all(|&v| (v - 0.1).abs() < 1e-15));
    assert!(m.params.value("block0.norm1.running_var").unwrap().data().iter().all(|&v| (v - 1.2).abs() < 1e-15));
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let m = SequenceModel::new(&small(Template::Mamba), &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &m.params).unwrap();
    let entries = load_checkpoint(&path).unwrap();
    let mut fresh = SequenceModel::new(&small(Template::Mamba), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_ne!(fresh.params, m.params);
    fresh.load_values(entries).unwrap();
    assert_eq!(fresh.params, m.params);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint(&path).is_err());
    std::fs::write(&path, b"nope").unwrap();
    assert!(load_checkpoint(&path).is_err());
}
