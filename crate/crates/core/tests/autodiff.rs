use atmosconv::autodiff::{finite_diff_grad, max_relative_error, NormStats};
use atmosconv::rng::Rng;
use atmosconv::{Error, Result, Tape, Tensor, Var};

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap()
}

/// Six nested loops, written independently of the im2col path.
fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oc, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * oc * oh * ow];
    for b in 0..n {
        for o in 0..oc {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xx * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.data()[((b * c + ci) * h + iy as usize) * w + ix as usize]
                                    * k.data()[((o * c + ci) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((b * oc + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, oc, oh, ow], out).unwrap()
}

fn conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let kv = tape.leaf(k);
    let y = tape.conv2d(xv, kv, stride, pad)?;
    Ok(tape.value(y).clone())
}

#[test]
fn conv2d_averaging_a_constant() {
    let x = Tensor::full(vec![1, 1, 3, 3], 1.0);
    let k = Tensor::full(vec![1, 1, 3, 3], 1.0 / 9.0);
    let y = conv(&x, &k, 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert!((y.data()[0] - 1.0).abs() < 1e-15);
}

#[test]
fn conv2d_differencing_kills_constants() {
    let x = Tensor::full(vec![2, 1, 6, 5], 0.37);
    let mut k = Tensor::zeros(vec![1, 1, 3, 3]);
    k.data_mut()[1] = 1.0;
    k.data_mut()[7] = -1.0;
    let y = conv(&x, &k, 1, 0).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut rng = Rng::new(11);
    let x = random(&mut rng, &[1, 2, 5, 5]);
    let k = random(&mut rng, &[3, 2, 3, 3]);
    let d = conv(&x, &k, 1, 0).unwrap().max_abs_diff(&naive_conv(&x, &k, 1, 0)).unwrap();
    assert!(d < 1e-12, "{d}");

    for seed in 0..200 {
        let mut rng = Rng::new(seed);
        let n = 1 + rng.below(4);
        let c = 1 + rng.below(4);
        let oc = 1 + rng.below(4);
        let h = 3 + rng.below(6);
        let w = 3 + rng.below(6);
        let kh = 1 + rng.below(3);
        let kw = 1 + rng.below(3);
        let stride = 1 + rng.below(2);
        let pad = rng.below(2);
        let x = random(&mut rng, &[n, c, h, w]);
        let k = random(&mut rng, &[oc, c, kh, kw]);
        let got = conv(&x, &k, stride, pad).unwrap();
        let want = naive_conv(&x, &k, stride, pad);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "seed {seed}");
    }
}

#[test]
fn conv2d_errors() {
    let x = Tensor::zeros(vec![1, 2, 4, 4]);
    assert!(matches!(conv(&x, &Tensor::zeros(vec![1, 3, 3, 3]), 1, 0), Err(Error::Shape(_))));
    assert!(matches!(conv(&x, &Tensor::zeros(vec![1, 2, 5, 5]), 1, 0), Err(Error::Config(_))));
    assert!(matches!(conv(&x, &Tensor::zeros(vec![1, 2, 3, 3]), 0, 0), Err(Error::Config(_))));
}

#[test]
fn backward_of_sum_is_ones() {
    let w = Tensor::from_vec(vec![0.3, -1.0, 2.0]).with_requires_grad(true);
    let mut tape = Tape::new();
    let v = tape.leaf(&w);
    let loss = tape.sum(v);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(v).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn relu_subgradient() {
    let w = Tensor::from_vec(vec![-1.0, 2.0, 0.0]).with_requires_grad(true);
    let mut tape = Tape::new();
    let v = tape.leaf(&w);
    let r = tape.relu(v);
    let loss = tape.sum(r);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(v).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn backward_contract_errors() {
    let mut tape = Tape::new();
    let v = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    let loss = tape.sum(v);
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(Error::State(_))));
}

#[test]
fn constants_get_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let p = tape.param(Tensor::from_vec(vec![3.0, 4.0]));
    let m = tape.mul(c, p).unwrap();
    let loss = tape.sum(m);
    tape.backward(loss).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(p).unwrap().data(), &[1.0, 2.0]);
}

/// Compares the tape gradient of a scalar function of one parameter tensor
/// against central differences.
fn check<F>(params: &Tensor, build: F) -> f64
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let p = tape.param(params.clone());
    let loss = build(&mut tape, p).unwrap();
    tape.backward(loss).unwrap();
    let analytic = tape.grad(p).unwrap();
    let numeric = finite_diff_grad(
        |probe| {
            let mut t = Tape::new();
            let p = t.constant(probe.clone());
            let l = build(&mut t, p)?;
            Ok(t.value(l).item().unwrap())
        },
        params,
        1e-5,
    )
    .unwrap();
    max_relative_error(analytic.data(), numeric.data())
}

/// Weighted sum with fixed pseudo-random weights so every output element
/// gets a distinct cotangent.
fn probe_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let mut rng = Rng::new(seed ^ 0xABCD);
    let w = tape.constant(random(&mut rng, &shape));
    let m = tape.mul(v, w)?;
    Ok(tape.sum(m))
}

/// Draws values bounded away from the kinks of relu/abs/max so that central
/// differences with h = 1e-5 never straddle one.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform_in(0.05, 1.0);
            if rng.uniform() < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

const SEEDS: u64 = 100;
const TOL: f64 = 1e-4;

#[test]
fn gradcheck_elementwise_primitives() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let p = away_from_zero(&mut rng, &[3, 4]);
        let other = away_from_zero(&mut rng, &[3, 4]);
        let ops: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>)> = vec![
            ("add", Box::new(|t: &mut Tape, v| {
                let o = t.constant(other.clone());
                let y = t.add(v, o)?;
                probe_sum(t, y, seed)
            })),
            ("sub", Box::new(|t: &mut Tape, v| {
                let o = t.constant(other.clone());
                let y = t.sub(o, v)?;
                probe_sum(t, y, seed)
            })),
            ("mul", Box::new(|t: &mut Tape, v| {
                let y = t.mul(v, v)?;
                probe_sum(t, y, seed)
            })),
            ("div", Box::new(|t: &mut Tape, v| {
                let o = t.constant(other.clone());
                let y = t.div(o, v)?;
                let z = t.div(v, o)?;
                let s = t.add(y, z)?;
                probe_sum(t, s, seed)
            })),
            ("scale", Box::new(|t: &mut Tape, v| {
                let y = t.scale(v, -2.5);
                probe_sum(t, y, seed)
            })),
            ("add_scalar", Box::new(|t: &mut Tape, v| {
                let y = t.add_scalar(v, 0.7);
                let y = t.mul(y, y)?;
                probe_sum(t, y, seed)
            })),
            ("relu", Box::new(|t: &mut Tape, v| {
                let y = t.relu(v);
                probe_sum(t, y, seed)
            })),
            ("abs", Box::new(|t: &mut Tape, v| {
                let y = t.abs(v);
                probe_sum(t, y, seed)
            })),
            ("split_parts", Box::new(|t: &mut Tape, v| {
                let (a, b) = t.split_parts(v);
                let b = t.scale(b, 3.0);
                let y = t.add(a, b)?;
                probe_sum(t, y, seed)
            })),
            ("mean", Box::new(|t: &mut Tape, v| {
                let y = t.mul(v, v)?;
                Ok(t.mean(y))
            })),
            ("row_sum+broadcast", Box::new(|t: &mut Tape, v| {
                let r = t.row_sum(v)?;
                let r = t.mul(r, r)?;
                let b = t.broadcast_rows(r, 4)?;
                let y = t.mul(b, v)?;
                probe_sum(t, y, seed)
            })),
            ("matmul", Box::new(|t: &mut Tape, v| {
                let o = t.constant(other.clone().reshape(vec![4, 3]).unwrap());
                let y = t.matmul(v, o)?;
                let z = t.matmul(o, v)?;
                let a = probe_sum(t, y, seed)?;
                let b = probe_sum(t, z, seed + 1)?;
                t.add(a, b)
            })),
            ("add_row_bias", Box::new(|t: &mut Tape, v| {
                let r = t.row_sum(v)?;
                let x = t.constant(Tensor::full(vec![2, 3], 0.5));
                let y = t.add_row_bias(x, r)?;
                let y = t.mul(y, y)?;
                probe_sum(t, y, seed)
            })),
        ];
        for (name, op) in &ops {
            let e = check(&p, op);
            assert!(e < TOL, "{name} seed {seed}: rel error {e}");
        }
    }
}

#[test]
fn gradcheck_spatial_primitives() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(1000 + seed);
        let x = random(&mut rng, &[2, 3, 6, 6]);
        let k = random(&mut rng, &[4, 3, 3, 3]);
        let stride = 1 + (seed as usize % 2);
        let pad = seed as usize % 2;

        let e = check(&k, |t, kv| {
            let xv = t.constant(x.clone());
            let y = t.conv2d(xv, kv, stride, pad)?;
            probe_sum(t, y, seed)
        });
        assert!(e < TOL, "conv2d kernel seed {seed}: {e}");
        let e = check(&x, |t, xv| {
            let kv = t.constant(k.clone());
            let y = t.conv2d(xv, kv, stride, pad)?;
            probe_sum(t, y, seed)
        });
        assert!(e < TOL, "conv2d input seed {seed}: {e}");

        // distinct values keep the pooling argmax stable under +-h
        let pooled: Vec<f64> = {
            let mut v: Vec<f64> = (0..2 * 3 * 36).map(|i| i as f64 * 0.01).collect();
            rng.shuffle(&mut v);
            v
        };
        let xp = Tensor::new(vec![2, 3, 6, 6], pooled).unwrap();
        let e = check(&xp, |t, v| {
            let y = t.max_pool2(v)?;
            let y = t.mul(y, y)?;
            probe_sum(t, y, seed)
        });
        assert!(e < TOL, "max_pool2 seed {seed}: {e}");

        let e = check(&x, |t, v| {
            let y = t.global_avg_pool(v)?;
            let y = t.mul(y, y)?;
            probe_sum(t, y, seed)
        });
        assert!(e < TOL, "global_avg_pool seed {seed}: {e}");

        let s = random(&mut rng, &[3]);
        let e = check(&s, |t, sv| {
            let xv = t.constant(x.clone());
            let y = t.channel_scale(xv, sv)?;
            let y = t.channel_shift(y, sv)?;
            let y = t.mul(y, y)?;
            probe_sum(t, y, seed)
        });
        assert!(e < TOL, "channel affine params seed {seed}: {e}");
        let e = check(&x, |t, xv| {
            let sv = t.constant(s.clone());
            let y = t.channel_scale(xv, sv)?;
            let y = t.channel_shift(y, sv)?;
            probe_sum(t, y, seed)
        });
        assert!(e < TOL, "channel affine input seed {seed}: {e}");
    }
}

#[test]
fn gradcheck_normalization_and_loss() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(5000 + seed);
        let x = random(&mut rng, &[3, 2, 3, 3]);
        let gamma = Tensor::from_vec(vec![rng.uniform_in(0.5, 1.5), rng.uniform_in(0.5, 1.5)]);
        let beta = random(&mut rng, &[2]);
        let mean = [0.1, -0.2];
        let var = [0.7, 1.3];
        for stats in [
            NormStats::Batch,
            NormStats::Instance,
            NormStats::Fixed { mean: &mean, var: &var },
        ] {
            let e = check(&x, |t, xv| {
                let g = t.constant(gamma.clone());
                let b = t.constant(beta.clone());
                let (y, _) = t.normalize(xv, g, b, stats, 1e-5)?;
                probe_sum(t, y, seed)
            });
            assert!(e < TOL, "normalize input {stats:?} seed {seed}: {e}");
            let e = check(&gamma, |t, g| {
                let xv = t.constant(x.clone());
                let b = t.constant(beta.clone());
                let (y, _) = t.normalize(xv, g, b, stats, 1e-5)?;
                probe_sum(t, y, seed)
            });
            assert!(e < TOL, "normalize gamma {stats:?} seed {seed}: {e}");
            let e = check(&beta, |t, b| {
                let xv = t.constant(x.clone());
                let g = t.constant(gamma.clone());
                let (y, _) = t.normalize(xv, g, b, stats, 1e-5)?;
                let y = t.mul(y, y)?;
                probe_sum(t, y, seed)
            });
            assert!(e < TOL, "normalize beta {stats:?} seed {seed}: {e}");
        }

        let logits = random(&mut rng, &[4, 5]);
        let labels: Vec<usize> = (0..4).map(|_| rng.below(5)).collect();
        let e = check(&logits, |t, l| t.softmax_cross_entropy(l, &labels));
        assert!(e < TOL, "softmax_cross_entropy seed {seed}: {e}");
    }
}

#[test]
fn two_layer_net_cross_entropy_matches_finite_differences() {
    let mut rng = Rng::new(77);
    let x = random(&mut rng, &[1, 6]);
    let w1 = random(&mut rng, &[6, 5]);
    let w2 = random(&mut rng, &[5, 3]);
    let build = |t: &mut Tape, w1v: Var, w2v: Var| -> Result<Var> {
        let xv = t.constant(x.clone());
        let h = t.matmul(xv, w1v)?;
        let h = t.relu(h);
        let logits = t.matmul(h, w2v)?;
        t.softmax_cross_entropy(logits, &[2])
    };
    let mut tape = Tape::new();
    let a = tape.param(w1.clone());
    let b = tape.param(w2.clone());
    let loss = build(&mut tape, a, b).unwrap();
    tape.backward(loss).unwrap();
    let g1 = finite_diff_grad(
        |p| {
            let mut t = Tape::new();
            let a = t.constant(p.clone());
            let b = t.constant(w2.clone());
            let l = build(&mut t, a, b)?;
            Ok(t.value(l).item().unwrap())
        },
        &w1,
        1e-5,
    )
    .unwrap();
    let g2 = finite_diff_grad(
        |p| {
            let mut t = Tape::new();
            let a = t.constant(w1.clone());
            let b = t.constant(p.clone());
            let l = build(&mut t, a, b)?;
            Ok(t.value(l).item().unwrap())
        },
        &w2,
        1e-5,
    )
    .unwrap();
    assert!(max_relative_error(tape.grad(a).unwrap().data(), g1.data()) < 1e-6);
    assert!(max_relative_error(tape.grad(b).unwrap().data(), g2.data()) < 1e-6);
}

#[test]
fn seeded_computation_is_bit_identical() {
    let run = || {
        let mut rng = Rng::new(99);
        let x = random(&mut rng, &[2, 3, 8, 8]);
        let k = random(&mut rng, &[4, 3, 3, 3]).with_requires_grad(true);
        let mut t = Tape::new();
        let xv = t.leaf(&x);
        let kv = t.leaf(&k);
        let y = t.conv2d(xv, kv, 1, 1).unwrap();
        let y = t.relu(y);
        let y = t.max_pool2(y).unwrap();
        let loss = t.mean(y);
        t.backward(loss).unwrap();
        (t.value(y).clone(), t.grad(kv).unwrap())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}
