use atmosconv::autodiff::{finite_diff_grad, max_relative_error};
use atmosconv::filter::{filters_of, normalize_filter, FilterKernel, DEFAULT_EPS};
use atmosconv::net::*;
use atmosconv::rng::Rng;
use atmosconv::{Error, Tape, Tensor};

fn random(shape: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_in(lo, hi)).collect()).unwrap()
}

fn affine_input(x: &Tensor, g: f64, o: f64) -> Tensor {
    x.map(|v| g * v + o)
}

/// Random kernel whose every filter has both signs.
fn mixed_kernel(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut w = random(shape, rng, -1.0, 1.0);
    let per = w.numel() / shape[0];
    for o in 0..shape[0] {
        w.data_mut()[o * per] = 0.5;
        w.data_mut()[o * per + 1] = -0.5;
    }
    w
}

#[test]
fn all_positive_uniform_kernel_preserves_constant_input() {
    let layer = NormConvLayer::new(Tensor::full(vec![2, 3, 3, 3], 0.7), true).unwrap();
    let x = Tensor::full(vec![1, 3, 6, 6], 0.42);
    let y = layer.forward(&x).unwrap();
    for v in y.data() {
        assert!((v - 0.42).abs() < 1e-6, "{v}");
    }
}

#[test]
fn mixed_sign_layer_is_offset_invariant_and_gain_equivariant() {
    let mut rng = Rng::new(3);
    for use_affine in [false, true] {
        for _ in 0..10 {
            let mut layer = NormConvLayer::new(mixed_kernel(&[4, 2, 3, 3], &mut rng), use_affine).unwrap();
            layer.padding = 0;
            layer.shift = random(&[4], &mut rng, -1.0, 1.0);
            let x = random(&[2, 2, 7, 7], &mut rng, 0.0, 1.0);
            let base = layer.forward(&x).unwrap();
            let shifted = layer.forward(&affine_input(&x, 1.0, 0.37)).unwrap();
            assert!(base.max_abs_diff(&shifted).unwrap() < 1e-6);
            if !use_affine {
                for (g, o) in [(0.5, -0.3), (2.0, 0.7)] {
                    let y = layer.forward(&affine_input(&x, g, o)).unwrap();
                    assert!(y.max_abs_diff(&base.map(|v| g * v)).unwrap() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn all_positive_layer_is_gain_and_offset_equivariant() {
    let mut rng = Rng::new(4);
    let mut layer = NormConvLayer::new(random(&[3, 2, 3, 3], &mut rng, 0.01, 1.0), false).unwrap();
    layer.padding = 0;
    let x = random(&[1, 2, 6, 6], &mut rng, 0.0, 1.0);
    let base = layer.forward(&x).unwrap();
    for (g, o) in [(0.5, -0.3), (2.0, 0.7)] {
        let y = layer.forward(&affine_input(&x, g, o)).unwrap();
        assert!(y.max_abs_diff(&base.map(|v| g * v + o)).unwrap() < 1e-6);
    }
}

#[test]
fn effective_kernel_matches_per_filter_normalization() {
    let mut rng = Rng::new(5);
    let layer = NormConvLayer::new(random(&[3, 2, 3, 3], &mut rng, -1.0, 1.0), false).unwrap();
    let eff = layer.effective_kernel().unwrap();
    for (o, f) in filters_of(&layer.raw_weights).iter().enumerate() {
        let n = normalize_filter(f, DEFAULT_EPS).unwrap();
        for (a, b) in n.weights().data().iter().zip(eff.slice_outer(o)) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn norm_conv_gradient_flows_through_normalization() {
    let mut rng = Rng::new(6);
    for _ in 0..20 {
        let w = mixed_kernel(&[3, 2, 3, 3], &mut rng);
        let a = random(&[3], &mut rng, 0.5, 1.5);
        let b = random(&[3], &mut rng, -0.5, 0.5);
        let x = random(&[2, 2, 5, 5], &mut rng, -1.0, 1.0);
        let target = random(&[2, 3, 5, 5], &mut rng, -1.0, 1.0);
        let loss = |w: &Tensor, a: &Tensor, b: &Tensor| -> atmosconv::Result<(Tape, atmosconv::Var, [atmosconv::Var; 3])> {
            let mut tape = Tape::new();
            let vx = tape.constant(x.clone());
            let vw = tape.param(w.clone());
            let va = tape.param(a.clone());
            let vb = tape.param(b.clone());
            let y = norm_conv_forward(&mut tape, vx, vw, Some((va, vb)), 1, 1, DEFAULT_EPS)?;
            let t = tape.constant(target.clone());
            let d = tape.sub(y, t)?;
            let sq = tape.mul(d, d)?;
            let l = tape.sum(sq);
            Ok((tape, l, [vw, va, vb]))
        };
        let (mut tape, l, vars) = loss(&w, &a, &b).unwrap();
        tape.backward(l).unwrap();
        let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v).unwrap()).collect();
        let numeric = [
            finite_diff_grad(|p| { let (t, l, _) = loss(p, &a, &b)?; Ok(t.value(l).item().unwrap()) }, &w, 1e-5).unwrap(),
            finite_diff_grad(|p| { let (t, l, _) = loss(&w, p, &b)?; Ok(t.value(l).item().unwrap()) }, &a, 1e-5).unwrap(),
            finite_diff_grad(|p| { let (t, l, _) = loss(&w, &a, p)?; Ok(t.value(l).item().unwrap()) }, &b, 1e-5).unwrap(),
        ];
        for (an, nu) in analytic.iter().zip(&numeric) {
            let e = max_relative_error(an.data(), nu.data());
            assert!(e < 1e-4, "rel error {e}");
        }
    }
}

#[test]
fn instance_norm_removes_constant_gain_and_offset() {
    let mut rng = Rng::new(7);
    let x = random(&[2, 3, 5, 5], &mut rng, 0.0, 1.0);
    let gamma = random(&[3], &mut rng, 0.5, 1.5);
    let beta = random(&[3], &mut rng, -0.5, 0.5);
    let run = |x: &Tensor| {
        let mut tape = Tape::new();
        let (vx, g, b) = (tape.constant(x.clone()), tape.constant(gamma.clone()), tape.constant(beta.clone()));
        let y = batch_or_instance_norm(&mut tape, vx, g, b, NormMode::Instance, None, false).unwrap();
        tape.value(y).clone()
    };
    let d = run(&x).max_abs_diff(&run(&affine_input(&x, 1.7, -0.4))).unwrap();
    assert!(d < 1e-6, "{d}");
}

#[test]
fn batch_norm_train_output_is_standardized() {
    let mut rng = Rng::new(8);
    let x = random(&[4, 3, 5, 5], &mut rng, -2.0, 5.0);
    let mut tape = Tape::new();
    let vx = tape.constant(x);
    let g = tape.constant(Tensor::full(vec![3], 1.0));
    let b = tape.constant(Tensor::zeros(vec![3]));
    let mut stats = RunningStats::new(3);
    let y = batch_or_instance_norm(&mut tape, vx, g, b, NormMode::Batch, Some(&mut stats), true).unwrap();
    let y = tape.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| y.data()[(n * 3 + c) * 25..(n * 3 + c + 1) * 25].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5, "{var}");
    }
    assert!(stats.mean.iter().all(|m| *m != 0.0));
}

#[test]
fn batch_norm_rejects_single_sample_training() {
    let mut tape = Tape::new();
    let vx = tape.constant(Tensor::zeros(vec![1, 2, 3, 3]));
    let g = tape.constant(Tensor::full(vec![2], 1.0));
    let b = tape.constant(Tensor::zeros(vec![2]));
    let r = batch_or_instance_norm(&mut tape, vx, g, b, NormMode::Batch, None, true);
    assert!(matches!(r, Err(Error::Config(_))));
}

fn count(cfg: &ModelConfig) -> usize {
    build_model(cfg).unwrap().num_params()
}

#[test]
fn tiny_cnn_layout() {
    let m = build_model(&ModelConfig::tiny_cnn(ConvMode::Vanilla, 0)).unwrap();
    let widths: Vec<usize> = m.raw_kernels().iter().map(|k| k.shape()[0]).collect();
    assert_eq!(widths, [16, 16, 32, 32, 64, 64]);
    let logits = m.predict_logits(&Tensor::zeros(vec![2, 3, 16, 16])).unwrap();
    assert_eq!(logits.shape(), &[2, 10]);
}

#[test]
fn parameter_overhead() {
    for arch in [Architecture::TinyCnn, Architecture::MiniResnet] {
        let mut cfg = ModelConfig {
            architecture: arch,
            depth: if arch == Architecture::TinyCnn { 3 } else { 2 },
            norm_layer: NormLayer::Batch,
            ..ModelConfig::default()
        };
        let vanilla = count(&cfg);
        cfg.conv_mode = ConvMode::Normalized;
        assert_eq!(count(&cfg), vanilla);

        cfg.norm_layer = NormLayer::Instance;
        let normalized = count(&cfg);
        cfg.conv_mode = ConvMode::Vanilla;
        let channels = build_model(&cfg).unwrap().conv_output_channels();
        assert_eq!(normalized - count(&cfg), 2 * channels);
    }
}

#[test]
fn init_is_seeded_and_shared_across_modes() {
    let a = build_model(&ModelConfig::tiny_cnn(ConvMode::Vanilla, 11)).unwrap();
    let b = build_model(&ModelConfig::tiny_cnn(ConvMode::Vanilla, 11)).unwrap();
    assert_eq!(a, b);
    let mut cfg = ModelConfig::tiny_cnn(ConvMode::Normalized, 11);
    cfg.norm_layer = NormLayer::Batch;
    let n = build_model(&cfg).unwrap();
    for (x, y) in a.raw_kernels().iter().zip(n.raw_kernels()) {
        assert_eq!(x.data(), y.data());
    }
    let c = build_model(&ModelConfig::tiny_cnn(ConvMode::Vanilla, 12)).unwrap();
    assert_ne!(a.raw_kernels()[0].data(), c.raw_kernels()[0].data());
}

#[test]
fn init_std_matches_fan_in_target() {
    let cfg = ModelConfig {
        width: 64,
        ..ModelConfig::tiny_cnn(ConvMode::Vanilla, 1)
    };
    let m = build_model(&cfg).unwrap();
    // second conv: 64 → 64 with 3×3 kernels, fan-in 576
    let k = m.raw_kernels()[1];
    assert_eq!(k.shape(), &[64, 64, 3, 3]);
    let mean = k.mean();
    let std = (k.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k.numel() as f64).sqrt();
    let target = (2.0 / 576.0f64).sqrt();
    assert!((std / target - 1.0).abs() < 0.1, "{std} vs {target}");
}

#[test]
fn initial_ratios_span_open_interval() {
    let m = build_model(&ModelConfig::tiny_cnn(ConvMode::Normalized, 2)).unwrap();
    let rs: Vec<f64> = m
        .raw_kernels()
        .iter()
        .flat_map(|k| filters_of(k))
        .map(|f: FilterKernel| f.positive_weight_ratio().r.abs())
        .collect();
    assert!(rs.iter().all(|&r| r > 0.0 && r < 1.0));
    let max = rs.iter().cloned().fold(0.0, f64::max);
    assert!(max > 0.2, "{max}");
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::mini_resnet(ConvMode::Normalized, NormLayer::Batch, 9);
    cfg.width = 4;
    let mut m = build_model(&cfg).unwrap();
    let mut rng = Rng::new(1);
    let x = random(&[3, 3, 8, 8], &mut rng, 0.0, 1.0);
    let mut tape = Tape::new();
    let vx = tape.constant(x.clone());
    m.forward(&mut tape, vx, true).unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.predict_logits(&x).unwrap(), m.predict_logits(&x).unwrap());
}

#[test]
fn effective_kernels_obey_dichotomy() {
    let m = build_model(&ModelConfig::tiny_cnn(ConvMode::Normalized, 3)).unwrap();
    for k in m.effective_kernels().unwrap() {
        for f in filters_of(&k) {
            let r = f.positive_weight_ratio().r;
            assert!(r.abs() <= 1e-5 || r == 1.0, "{r}");
        }
    }
}

#[test]
fn rejects_wrong_input_channels() {
    let m = build_model(&ModelConfig::tiny_cnn(ConvMode::Vanilla, 0)).unwrap();
    assert!(matches!(m.predict_logits(&Tensor::zeros(vec![1, 1, 8, 8])), Err(Error::Shape(_))));
}
