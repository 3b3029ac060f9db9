use atmosconv::autodiff::Tape;
use atmosconv::filter::{normalize_kernel, soft_reg, soft_reg_value, FilterKernel, DEFAULT_EPS};
use atmosconv::Tensor;
use proptest::prelude::*;

fn kernel(w: &[f64]) -> FilterKernel {
    FilterKernel::from_slice(w).unwrap()
}

/// Weights of both signs whose parts are each at least 0.1 in L1 norm.
fn mixed_sign() -> impl Strategy<Value = Vec<f64>> {
    (prop::collection::vec(0.02f64..2.0, 2..40), prop::collection::vec(any::<bool>(), 40), 0usize..40).prop_filter_map(
        "needs both signs",
        |(mags, signs, pivot)| {
            let mut w: Vec<f64> = mags.iter().zip(&signs).map(|(m, &s)| if s { *m } else { -*m }).collect();
            let n = w.len();
            // force at least one weight of each sign
            w[pivot % n] = w[pivot % n].abs();
            w[(pivot + 1) % n] = -w[(pivot + 1) % n].abs();
            let (p, m) = kernel(&w).part_norms();
            (p >= 0.1 && m >= 0.1).then_some(w)
        },
    )
}

#[test]
fn normalize_reference_values() {
    // parts (3, 1) → (3/(3+ε), 1/(1+ε))
    let n = kernel(&[2.0, -0.5, -0.5, 1.0]).normalize().unwrap();
    let eps = DEFAULT_EPS;
    let want = [2.0 / (3.0 + eps), -0.5 / (1.0 + eps), -0.5 / (1.0 + eps), 1.0 / (3.0 + eps)];
    for (v, w) in n.weights().data().iter().zip(want) {
        assert!((v - w).abs() < 1e-15, "{v} vs {w}");
    }
    // the stabilizer keeps an all-zero filter at zero
    let z = kernel(&[0.0; 9]).normalize().unwrap();
    assert!(z.weights().data().iter().all(|&v| v == 0.0));
}

#[test]
fn soft_penalty_reference_values() {
    // |1-3| + |1-1| and |1-0.5| + |1-0| (single-signed filters pay for the missing part)
    let v = soft_reg_value(&[kernel(&[2.0, -1.0, 1.0]), kernel(&[0.25, 0.25])]).unwrap();
    assert!((v - 3.5).abs() < 1e-15);
}

#[test]
fn kernel_normalization_is_per_output_channel() {
    let raw = Tensor::new(vec![2, 1, 2, 2], vec![1.0, -1.0, 3.0, -3.0, 0.5, 0.5, -2.0, 4.0]).unwrap();
    let mut tape = Tape::new();
    let w = tape.constant(raw.clone());
    let n = normalize_kernel(&mut tape, w, DEFAULT_EPS).unwrap();
    let got = tape.value(n).data().to_vec();
    for oc in 0..2 {
        let single = kernel(&raw.data()[oc * 4..oc * 4 + 4]).normalize().unwrap();
        for (a, b) in got[oc * 4..oc * 4 + 4].iter().zip(single.weights().data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn soft_penalty_gradient_matches_finite_differences() {
    let w0 = vec![0.7, -0.2, 0.4, -1.3, 0.9, 0.3];
    let loss = |w: &[f64]| {
        let mut tape = Tape::new();
        let v = tape.param(Tensor::new(vec![2, 3], w.to_vec()).unwrap());
        let r = soft_reg(&mut tape, &[v]).unwrap();
        let value = tape.value(r).data()[0];
        tape.backward(r).unwrap();
        (value, tape.grad(v).unwrap().data().to_vec())
    };
    let (_, g) = loss(&w0);
    let h = 1e-6;
    for j in 0..w0.len() {
        let mut up = w0.clone();
        up[j] += h;
        let mut down = w0.clone();
        down[j] -= h;
        let numeric = (loss(&up).0 - loss(&down).0) / (2.0 * h);
        assert!((numeric - g[j]).abs() < 1e-6, "{j}: {numeric} vs {}", g[j]);
    }
}

proptest! {
    #[test]
    fn ratio_is_bounded_and_consistent(w in prop::collection::vec(-5.0f64..5.0, 1..50)) {
        let k = kernel(&w);
        let r = k.positive_weight_ratio();
        prop_assert!((-1.0..=1.0).contains(&r.r));
        prop_assert!((k.algebraic_sum() - k.l1_norm() * r.r).abs() < 1e-9);
    }

    #[test]
    fn decomposition_reconstructs(w in prop::collection::vec(-5.0f64..5.0, 1..50)) {
        let k = kernel(&w);
        prop_assume!(k.l1_norm() > 0.0);
        let d = k.decompose().unwrap();
        prop_assert!(d.diff_coeff >= 0.0 && d.avg_coeff >= 0.0);
        prop_assert!(d.reconstruct().max_abs_diff(k.weights()).unwrap() < 1e-12);
        if let Some(diff) = &d.diff_filter {
            prop_assert!(diff.algebraic_sum().abs() < 1e-12);
        }
        prop_assert!((d.avg_filter.algebraic_sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalized_mixed_filters_are_differencing(w in mixed_sign()) {
        let n = kernel(&w).normalize().unwrap();
        let (p, m) = n.part_norms();
        prop_assert!((p - 1.0).abs() < 1e-5 && (m - 1.0).abs() < 1e-5);
        prop_assert!(n.positive_weight_ratio().r.abs() < 1e-5);
        prop_assert!(soft_reg_value(&[n]).unwrap() < 2e-5);
    }

    #[test]
    fn normalization_ignores_positive_scale(w in mixed_sign(), c in 0.1f64..100.0) {
        let a = kernel(&w).normalize().unwrap();
        let scaled: Vec<f64> = w.iter().map(|v| c * v).collect();
        let b = kernel(&scaled).normalize().unwrap();
        prop_assert!(a.weights().max_abs_diff(b.weights()).unwrap() < 1e-4);
    }

    #[test]
    fn normalization_is_odd(w in prop::collection::vec(-3.0f64..3.0, 1..30)) {
        let a = kernel(&w).normalize().unwrap();
        let neg: Vec<f64> = w.iter().map(|v| -v).collect();
        let b = kernel(&neg).normalize().unwrap();
        for (x, y) in a.weights().data().iter().zip(b.weights().data()) {
            prop_assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn single_sign_filters_become_averaging(w in prop::collection::vec(0.01f64..3.0, 1..30)) {
        let n = kernel(&w).normalize().unwrap();
        let r = n.positive_weight_ratio();
        prop_assert_eq!(r.r, 1.0);
        prop_assert!((n.algebraic_sum() - 1.0).abs() < 1e-4);
    }
}
