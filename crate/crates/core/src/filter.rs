//! Positive/negative split, positive weight ratio, averaging + differencing
//! decomposition, filter normalization and the soft normalization penalty.
//!
//! A filter is any weight block read as one flat vector. Convolution kernels
//! of shape `OC×IC×kH×kW` hold `OC` filters, one per output channel, each of
//! which is normalized as a whole `IC·kH·kW` vector so that a common gain or
//! offset acting on every input channel is handled uniformly.

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Stabilizer added to each part's L1 norm during normalization.
pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterKernel {
    weights: Tensor,
    eps: f64,
}

/// `r(w)` together with a flag for the all-zero kernel, where it is set to 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightRatio {
    pub r: f64,
    pub degenerate: bool,
}

/// `w = diff_coeff·diff_filter + avg_coeff·avg_filter`, after replacing `w`
/// by `-w` when its negative part dominates (`sign_flip`).
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub diff_coeff: f64,
    /// `None` when the kernel has no weights of the minority sign, in which
    /// case it is a pure (scaled) averaging filter.
    pub diff_filter: Option<FilterKernel>,
    pub avg_coeff: f64,
    pub avg_filter: FilterKernel,
    pub sign_flip: bool,
}

impl Decomposition {
    /// `diff_coeff·diff_filter + avg_coeff·avg_filter`, with the sign flip
    /// undone so the result is comparable with the original weights.
    pub fn reconstruct(&self) -> Tensor {
        let avg = self.avg_filter.weights();
        let sign = if self.sign_flip { -1.0 } else { 1.0 };
        let mut out = avg.map(|v| v * self.avg_coeff);
        if let Some(diff) = &self.diff_filter {
            for (o, d) in out.data_mut().iter_mut().zip(diff.weights().data()) {
                *o += self.diff_coeff * d;
            }
        }
        out.data_mut().iter_mut().for_each(|v| *v *= sign);
        out
    }
}

impl FilterKernel {
    pub fn new(weights: Tensor) -> Self {
        Self {
            weights,
            eps: DEFAULT_EPS,
        }
    }

    pub fn from_slice(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return Err(shape_err!("a filter needs at least one weight"));
        }
        Ok(Self::new(Tensor::from_vec(weights.to_vec())))
    }

    pub fn with_eps(mut self, eps: f64) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::Config(format!("eps must be positive, got {eps}")));
        }
        self.eps = eps;
        Ok(self)
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn into_weights(self) -> Tensor {
        self.weights
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn len(&self) -> usize {
        self.weights.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.numel() == 0
    }

    fn check_finite(&self) -> Result<()> {
        self.weights.check_finite()
    }

    /// `(‖w⁺‖, ‖w⁻‖)`.
    pub fn part_norms(&self) -> (f64, f64) {
        part_norms(self.weights.data())
    }

    /// `w⁺ = w∘1(w>0)` and `w⁻ = (-w)∘1(w<0)`.
    pub fn split_parts(&self) -> Result<(Tensor, Tensor)> {
        self.check_finite()?;
        let plus = self.weights.map(|v| if v > 0.0 { v } else { 0.0 });
        let minus = self.weights.map(|v| if v < 0.0 { -v } else { 0.0 });
        Ok((plus, minus))
    }

    pub fn positive_weight_ratio(&self) -> WeightRatio {
        let (p, m) = self.part_norms();
        ratio_from_parts(p, m)
    }

    /// `Σ w_i`, which equals `‖w‖·r(w)`.
    pub fn algebraic_sum(&self) -> f64 {
        self.weights.sum()
    }

    /// `‖w‖₁`.
    pub fn l1_norm(&self) -> f64 {
        let (p, m) = self.part_norms();
        p + m
    }

    pub fn decompose(&self) -> Result<Decomposition> {
        self.check_finite()?;
        let (p, m) = self.part_norms();
        if p + m == 0.0 {
            return Err(Error::Degenerate("cannot decompose an all-zero filter".into()));
        }
        let sign_flip = p < m;
        let w = if sign_flip {
            self.weights.map(|v| -v)
        } else {
            self.weights.clone()
        };
        let (p, m) = if sign_flip { (m, p) } else { (p, m) };
        let avg = w.map(|v| if v > 0.0 { v / p } else { 0.0 });
        let diff_filter = (m > 0.0).then(|| {
            let d = w.map(|v| {
                if v > 0.0 {
                    v / p
                } else if v < 0.0 {
                    v / m
                } else {
                    0.0
                }
            });
            FilterKernel { weights: d, eps: self.eps }
        });
        Ok(Decomposition {
            diff_coeff: m,
            diff_filter,
            avg_coeff: p - m,
            avg_filter: FilterKernel { weights: avg, eps: self.eps },
            sign_flip,
        })
    }

    /// `w⁺/(‖w⁺‖+ε) − w⁻/(‖w⁻‖+ε)`, evaluated with the same tape primitives
    /// the normalized convolution differentiates through.
    pub fn normalize(&self) -> Result<FilterKernel> {
        self.check_finite()?;
        let mut tape = Tape::new();
        let shape = self.weights.shape().to_vec();
        let flat = tape.constant(self.weights.detach().reshape(vec![1, self.len()])?);
        let out = normalize_rows(&mut tape, flat, self.eps)?;
        let weights = tape.value(out).detach().reshape(shape)?;
        Ok(FilterKernel { weights, eps: self.eps })
    }

    /// `|1 − ‖w⁺‖| + |1 − ‖w⁻‖|`.
    pub fn normalization_gap(&self) -> f64 {
        let (p, m) = self.part_norms();
        (1.0 - p).abs() + (1.0 - m).abs()
    }
}

/// Normalizes `w` with stabilizer `eps`.
pub fn normalize_filter(w: &FilterKernel, eps: f64) -> Result<FilterKernel> {
    w.clone().with_eps(eps)?.normalize()
}

pub fn part_norms(w: &[f64]) -> (f64, f64) {
    w.iter().fold((0.0, 0.0), |(p, m), &v| {
        if v > 0.0 {
            (p + v, m)
        } else {
            (p, m - v)
        }
    })
}

pub fn ratio_from_parts(plus: f64, minus: f64) -> WeightRatio {
    let total = plus + minus;
    if total == 0.0 {
        WeightRatio { r: 0.0, degenerate: true }
    } else {
        WeightRatio {
            r: (plus - minus) / total,
            degenerate: false,
        }
    }
}

/// Splits a kernel tensor into its per-output-channel filters.
pub fn filters_of(kernel: &Tensor) -> Vec<FilterKernel> {
    let oc = kernel.shape()[0];
    (0..oc)
        .map(|o| FilterKernel::from_slice(kernel.slice_outer(o)).expect("non-empty block"))
        .collect()
}

/// Normalizes each row of a `[rows, k]` variable as one filter.
pub fn normalize_rows(tape: &mut Tape, w: Var, eps: f64) -> Result<Var> {
    let shape = tape.shape(w);
    if shape.len() != 2 {
        return Err(shape_err!("normalize_rows expects [filters, k], got {shape:?}"));
    }
    let k = shape[1];
    let (plus, minus) = tape.split_parts(w);
    let plus_norm = tape.row_sum(plus)?;
    let plus_norm = tape.add_scalar(plus_norm, eps);
    let plus_norm = tape.broadcast_rows(plus_norm, k)?;
    let minus_norm = tape.row_sum(minus)?;
    let minus_norm = tape.add_scalar(minus_norm, eps);
    let minus_norm = tape.broadcast_rows(minus_norm, k)?;
    let averaging = tape.div(plus, plus_norm)?;
    let differencing = tape.div(minus, minus_norm)?;
    tape.sub(averaging, differencing)
}

/// Normalizes every output-channel block of an `OC×...` kernel variable.
pub fn normalize_kernel(tape: &mut Tape, kernel: Var, eps: f64) -> Result<Var> {
    let shape = tape.shape(kernel).to_vec();
    let rows = shape[0];
    let k: usize = shape[1..].iter().product();
    let flat = tape.reshape(kernel, &[rows, k])?;
    let out = normalize_rows(tape, flat, eps)?;
    tape.reshape(out, &shape)
}

/// `Σ_w (|1 − ‖w⁺‖| + |1 − ‖w⁻‖|)` over every output-channel filter of the
/// given kernel variables. The regularization strength is applied by the
/// caller.
pub fn soft_reg(tape: &mut Tape, kernels: &[Var]) -> Result<Var> {
    if kernels.is_empty() {
        return Err(Error::Contract("soft_reg needs at least one kernel".into()));
    }
    let mut terms = Vec::with_capacity(kernels.len());
    for &kernel in kernels {
        let shape = tape.shape(kernel).to_vec();
        let k: usize = shape[1..].iter().product();
        let flat = tape.reshape(kernel, &[shape[0], k])?;
        let (plus, minus) = tape.split_parts(flat);
        let mut gap = None;
        for part in [plus, minus] {
            let norm = tape.row_sum(part)?;
            let shifted = tape.add_scalar(norm, -1.0);
            let dist = tape.abs(shifted);
            let total = tape.sum(dist);
            gap = Some(match gap {
                None => total,
                Some(acc) => tape.add(acc, total)?,
            });
        }
        terms.push(gap.expect("two parts"));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Value of [`soft_reg`] over a list of individual filters.
pub fn soft_reg_value(kernels: &[FilterKernel]) -> Result<f64> {
    if kernels.is_empty() {
        return Err(Error::Contract("soft_reg needs at least one kernel".into()));
    }
    Ok(kernels.iter().map(FilterKernel::normalization_gap).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(w: &[f64]) -> FilterKernel {
        FilterKernel::from_slice(w).unwrap()
    }

    #[test]
    fn split_parts_by_definition() {
        let (p, m) = k(&[1.0, -2.0, 0.0]).split_parts().unwrap();
        assert_eq!(p.data(), &[1.0, 0.0, 0.0]);
        assert_eq!(m.data(), &[0.0, 2.0, 0.0]);
        let (p, m) = k(&[0.0; 4]).split_parts().unwrap();
        assert!(p.data().iter().chain(m.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn nan_weight_is_rejected() {
        assert!(matches!(
            k(&[1.0, f64::NAN]).split_parts(),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn ratio_examples() {
        // parts (+2, -1)
        let w = k(&[1.5, 0.5, -0.25, -0.75]);
        assert!((w.positive_weight_ratio().r - 1.0 / 3.0).abs() < 1e-15);
        assert!((w.algebraic_sum() - w.l1_norm() * w.positive_weight_ratio().r).abs() < 1e-15);
        assert_eq!(k(&[0.1, 3.0, 0.0]).positive_weight_ratio().r, 1.0);
        assert_eq!(k(&[-0.1, -3.0]).positive_weight_ratio().r, -1.0);
        let z = k(&[0.0, 0.0]).positive_weight_ratio();
        assert!(z.degenerate && z.r == 0.0);
    }

    #[test]
    fn decomposition_of_unnormalized_dog_parts() {
        let d = k(&[1.5, 0.5, -0.25, -0.75]).decompose().unwrap();
        assert!(!d.sign_flip);
        assert!((d.diff_coeff - 1.0).abs() < 1e-15);
        assert!((d.avg_coeff - 1.0).abs() < 1e-15);
        let fixed = k(&[0.5, 0.5, -1.0]).decompose().unwrap();
        assert_eq!((fixed.diff_coeff, fixed.avg_coeff), (1.0, 0.0));
    }

    #[test]
    fn decomposition_flips_negative_dominated_kernels() {
        let w = k(&[0.5, -2.0, -1.0]);
        let d = w.decompose().unwrap();
        assert!(d.sign_flip);
        assert_eq!(d.diff_coeff, 0.5);
        assert_eq!(d.avg_coeff, 2.5);
        assert!(d.reconstruct().max_abs_diff(w.weights()).unwrap() < 1e-15);
    }

    #[test]
    fn decomposition_degenerate_forms() {
        assert!(matches!(k(&[0.0, 0.0]).decompose(), Err(Error::Degenerate(_))));
        let d = k(&[2.0, 1.0]).decompose().unwrap();
        assert!(d.diff_filter.is_none());
        assert_eq!(d.diff_coeff, 0.0);
        assert_eq!(d.avg_coeff, 3.0);
    }

    #[test]
    fn normalize_examples() {
        let n = k(&[2.0, 2.0]).normalize().unwrap();
        for v in n.weights().data() {
            assert!((v - 0.5).abs() < 1e-6);
        }
        let n = k(&[2.0, -0.5, -0.5, 1.0]).normalize().unwrap();
        let want = [2.0 / 3.0, -0.5, -0.5, 1.0 / 3.0];
        for (v, w) in n.weights().data().iter().zip(want) {
            assert!((v - w).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_rejects_bad_eps() {
        assert!(normalize_filter(&k(&[1.0]), 0.0).is_err());
        assert!(normalize_filter(&k(&[1.0]), -1e-6).is_err());
    }

    #[test]
    fn soft_reg_examples() {
        assert_eq!(soft_reg_value(&[k(&[0.5, 0.5, -1.0])]).unwrap(), 0.0);
        assert_eq!(soft_reg_value(&[k(&[2.0, -1.0])]).unwrap(), 1.0);
        assert!(soft_reg_value(&[]).is_err());

        let mut tape = Tape::new();
        let w = tape.constant(Tensor::new(vec![2, 2], vec![2.0, -1.0, 0.5, -0.5]).unwrap());
        let r = soft_reg(&mut tape, &[w]).unwrap();
        assert!((tape.value(r).item().unwrap() - 2.0).abs() < 1e-15);
    }
}
