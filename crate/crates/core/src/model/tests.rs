use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_config(channels: Vec<usize>, residual: usize) -> EncoderConfig {
    EncoderConfig {
        arch: Arch::Small,
        channels_per_stage: channels,
        residual_blocks_per_stage: residual,
        head_widths: vec![6, 5],
        description_size: 128,
    }
}

fn random_input(h: usize, w: usize, seed: u64) -> Tensor3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * h * w).map(|_| rng.random::<f64>()).collect();
    Tensor3::from_vec(3, h, w, data)
}

fn randomize(model: &mut Model, seed: u64, positive: bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for values in model.parameter_values_mut() {
        for v in values.iter_mut() {
            *v = if positive {
                rng.random_range(0.05..0.5)
            } else {
                rng.random_range(-0.5..0.5)
            };
        }
    }
}

#[test]
fn zero_image_gives_finite_unit_projection() {
    let model = Model::new(EncoderConfig::small(128), 1).unwrap();
    let trace = model.forward(&ImageBuffer::new(64, 64, "zero")).unwrap();
    assert!(trace.latent.iter().all(|v| v.is_finite()));
    let norm: f64 = trace.projection.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-5);
}

#[test]
fn forward_is_deterministic_and_pools_feature_maps() {
    let model = Model::new(EncoderConfig::small(256), 2).unwrap();
    let img = crate::data::synthetic_scene(80, 64, 0);
    let a = model.forward(&img).unwrap();
    let b = model.forward(&img).unwrap();
    assert_eq!(a.feature_maps, b.feature_maps);
    assert_eq!(a.projection, b.projection);
    let fm = &a.feature_maps;
    for c in 0..fm.channels {
        let mut total = 0.0;
        for y in 0..fm.height {
            for x in 0..fm.width {
                total += fm.at(c, y, x);
            }
        }
        assert!((total / (fm.height * fm.width) as f64 - a.latent[c]).abs() < 1e-5);
    }
    assert_eq!(a.projection.len(), 256);
    assert_eq!((fm.height, fm.width), (8, 10));
}

#[test]
fn rejects_wrong_channel_count() {
    let model = Model::new(toy_config(vec![2], 0), 0).unwrap();
    let err = model.forward_tensor(Tensor3::zeros(1, 8, 8)).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch(_)));
}

#[test]
fn config_rejects_unsupported_description_size() {
    assert!(EncoderConfig::small(64).validate().is_err());
    assert!(EncoderConfig::large(512).validate().is_ok());
    assert_eq!(EncoderConfig::large(512).latent_size(), 2048);
    assert_eq!(EncoderConfig::small(128).latent_size(), 128);
}

#[test]
fn guided_equals_standard_when_no_gate_fires() {
    let mut model = Model::zeroed(toy_config(vec![3, 4], 0)).unwrap();
    randomize(&mut model, 3, true);
    let trace = model.forward_tensor(random_input(9, 9, 4)).unwrap();
    for n in 0..4 {
        let standard = model.input_gradient(&trace, Target::Latent(n), Gating::Standard).unwrap();
        let guided = model.backward_guided(&trace, Target::Latent(n)).unwrap();
        assert_eq!(standard, guided);
    }
}

#[test]
fn negative_preactivation_blocks_its_path() {
    let mut model = Model::zeroed(toy_config(vec![2], 0)).unwrap();
    randomize(&mut model, 5, true);
    if let Block::Plain(conv) = &mut model.blocks[0] {
        conv.bias[1] = -100.0;
    }
    let trace = model.forward_tensor(random_input(6, 6, 1)).unwrap();
    assert_eq!(trace.latent[1], 0.0);
    assert!(matches!(
        model.backward_guided(&trace, Target::Latent(1)),
        Err(Error::NoGradientPath)
    ));
    assert!(matches!(
        model.input_gradient(&trace, Target::Latent(1), Gating::Standard),
        Err(Error::NoGradientPath)
    ));
    assert!(model.backward_guided(&trace, Target::Latent(0)).is_ok());
}

/// Direct-summation 3x3 convolution, padding 1.
fn oracle_conv(x: &Tensor3, w: &[f64], b: &[f64], out_c: usize, stride: usize) -> Tensor3 {
    let oh = (x.height - 1) / stride + 1;
    let ow = (x.width - 1) / stride + 1;
    let mut out = Tensor3::zeros(out_c, oh, ow);
    for o in 0..out_c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[o];
                for ci in 0..x.channels {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * stride + ky) as isize - 1;
                            let ix = (ox * stride + kx) as isize - 1;
                            if iy >= 0 && ix >= 0 && (iy as usize) < x.height && (ix as usize) < x.width {
                                acc += w[((o * x.channels + ci) * 3 + ky) * 3 + kx] * x.at(ci, iy as usize, ix as usize);
                            }
                        }
                    }
                }
                *out.at_mut(o, oy, ox) = acc;
            }
        }
    }
    out
}

/// Transposed direct-summation convolution: scatters `g` back to an input
/// of shape `in_c x h x w`.
fn oracle_conv_transpose(g: &Tensor3, w: &[f64], in_c: usize, h: usize, wd: usize, stride: usize) -> Tensor3 {
    let mut out = Tensor3::zeros(in_c, h, wd);
    for o in 0..g.channels {
        for oy in 0..g.height {
            for ox in 0..g.width {
                let gv = g.at(o, oy, ox);
                for ci in 0..in_c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * stride + ky) as isize - 1;
                            let ix = (ox * stride + kx) as isize - 1;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                *out.at_mut(ci, iy as usize, ix as usize) +=
                                    w[((o * in_c + ci) * 3 + ky) * 3 + kx] * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn double_gate(g: &mut Tensor3, pre: &Tensor3) {
    for (gv, &p) in g.data.iter_mut().zip(&pre.data) {
        let forward_open = p > 0.0;
        let backward_open = *gv > 0.0;
        if !(forward_open && backward_open) {
            *gv = 0.0;
        }
    }
}

#[test]
fn guided_matches_hand_rolled_two_layer_chain_rule() {
    let mut model = Model::zeroed(toy_config(vec![2, 3], 0)).unwrap();
    for seed in 0..10u64 {
        randomize(&mut model, 100 + seed, false);
        let x = random_input(7, 6, seed);
        let trace = model.forward_tensor(x.clone()).unwrap();
        let params: Vec<Vec<f64>> = model.parameters().iter().map(|p| p.values.to_vec()).collect();
        let (w1, b1, w2, b2) = (&params[0], &params[1], &params[2], &params[3]);

        let pre1 = oracle_conv(&x, w1, b1, 2, 1);
        let mut a1 = pre1.clone();
        a1.data.iter_mut().for_each(|v| *v = v.max(0.0));
        let pre2 = oracle_conv(&a1, w2, b2, 3, 2);
        for n in 0..3 {
            let mut g2 = Tensor3::zeros(3, pre2.height, pre2.width);
            let p = (pre2.height * pre2.width) as f64;
            g2.plane_mut(n).fill(1.0 / p);
            double_gate(&mut g2, &pre2);
            let mut g1 = oracle_conv_transpose(&g2, w2, 2, a1.height, a1.width, 2);
            double_gate(&mut g1, &pre1);
            let want = oracle_conv_transpose(&g1, w1, 3, 7, 6, 1);

            match model.backward_guided(&trace, Target::Latent(n)) {
                Ok(got) => {
                    for (a, b) in got.data.iter().zip(&want.data) {
                        assert!((a - b).abs() < 1e-6, "seed {seed} neuron {n}: {a} vs {b}");
                    }
                }
                Err(Error::NoGradientPath) => assert!(want.data.iter().all(|v| *v == 0.0)),
                Err(e) => panic!("{e}"),
            }
        }
    }
}

fn scalar(model: &Model, x: &Tensor3, target: Target) -> f64 {
    let t = model.forward_tensor(x.clone()).unwrap();
    match target {
        Target::Latent(i) => t.latent[i],
        Target::Projection(i) => t.projection[i],
    }
}

fn assert_matches_finite_differences(model: &Model, x: &Tensor3, target: Target) {
    let trace = model.forward_tensor(x.clone()).unwrap();
    let grad = model.input_gradient(&trace, target, Gating::Standard).unwrap();
    let eps = 1e-6;
    let mut fd = vec![0.0; x.data.len()];
    for i in 0..x.data.len() {
        let (mut plus, mut minus) = (x.clone(), x.clone());
        plus.data[i] += eps;
        minus.data[i] -= eps;
        fd[i] = (scalar(model, &plus, target) - scalar(model, &minus, target)) / (2.0 * eps);
    }
    let diff: f64 = grad.data.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm > 0.0);
    assert!(diff / norm < 1e-3, "relative error {} for {target:?}", diff / norm);
}

#[test]
fn small_encoder_input_gradient_matches_finite_differences() {
    let model = Model::new(EncoderConfig::small(128), 9).unwrap();
    let x = random_input(16, 16, 2);
    let trace = model.forward_tensor(x.clone()).unwrap();
    let n = (0..trace.latent.len())
        .max_by(|&a, &b| trace.latent[a].partial_cmp(&trace.latent[b]).unwrap())
        .unwrap();
    assert_matches_finite_differences(&model, &x, Target::Latent(n));
    assert_matches_finite_differences(&model, &x, Target::Projection(3));
}

#[test]
fn residual_encoder_input_gradient_matches_finite_differences() {
    let cfg = EncoderConfig {
        head_widths: vec![16, 16],
        ..toy_config(vec![4, 6], 1)
    };
    let model = Model::new(cfg, 4).unwrap();
    let x = random_input(9, 8, 3);
    assert_matches_finite_differences(&model, &x, Target::Projection(0));
    assert_matches_finite_differences(&model, &x, Target::Projection(77));
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let model = Model::new(toy_config(vec![3, 4], 1), 6).unwrap();
    let x = random_input(8, 8, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gz: Vec<f64> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
    let objective = |m: &Model| -> f64 {
        let t = m.forward_tensor(x.clone()).unwrap();
        t.projection.iter().zip(&gz).map(|(a, b)| a * b).sum()
    };
    let trace = model.forward_tensor(x.clone()).unwrap();
    let mut grads = Gradients::zeros_like(&model);
    model.accumulate_parameter_gradients(&trace, &gz, &mut grads);
    let n_tensors = grads.tensors.len();
    for t in 0..n_tensors {
        let len = grads.tensors[t].len();
        for i in [0, len / 2, len - 1] {
            let (mut plus, mut minus) = (model.clone(), model.clone());
            plus.parameter_values_mut()[t][i] += 1e-6;
            minus.parameter_values_mut()[t][i] -= 1e-6;
            let fd = (objective(&plus) - objective(&minus)) / 2e-6;
            let got = grads.tensors[t][i];
            assert!(
                (fd - got).abs() <= 1e-3 * fd.abs().max(1e-3),
                "tensor {t} entry {i}: {got} vs {fd}"
            );
        }
    }
}

#[test]
fn guided_gate_only_removes_signal_at_last_rectifier() {
    let model = Model::new(EncoderConfig::small(128), 12).unwrap();
    let trace = model.forward(&crate::data::synthetic_scene(32, 32, 1)).unwrap();
    let head = &trace.head;
    let mut gz = vec![0.0; 128];
    gz[5] = 1.0;
    let dot: f64 = head.output.iter().zip(&gz).map(|(a, b)| a * b).sum();
    let gu: Vec<f64> = gz.iter().zip(&head.output).map(|(g, z)| (g - z * dot) / head.norm).collect();
    let input: Vec<f64> = head.pre[1].iter().map(|v| v.max(0.0)).collect();
    let signal = model.head[2].backward(&input, &gu, None);
    let mut standard = signal.clone();
    let mut guided = signal;
    relu_backward(&mut standard, &head.pre[1], Gating::Standard);
    relu_backward(&mut guided, &head.pre[1], Gating::Guided);
    for (s, g) in standard.iter().zip(&guided) {
        assert!(*g == 0.0 || g == s);
        assert!(*g == 0.0 || g.signum() == s.signum());
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::new(EncoderConfig::small(128), 21).unwrap();
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, model);
    let img = crate::data::synthetic_scene(48, 40, 2);
    let (a, b) = (model.forward(&img).unwrap(), loaded.forward(&img).unwrap());
    assert_eq!(a.feature_maps, b.feature_maps);
    assert_eq!(a.projection, b.projection);
}

#[test]
fn checkpoint_rejects_other_schema_versions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::new(toy_config(vec![2], 0), 0).unwrap();
    let mut bytes = checkpoint::to_bytes(&model);
    bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(Error::VersionMismatch { found: 7, expected: 1 })
    ));
}

#[test]
fn truncated_checkpoint_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::new(toy_config(vec![2], 0), 0).unwrap();
    let bytes = checkpoint::to_bytes(&model);
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Io { .. })));
    assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
}
