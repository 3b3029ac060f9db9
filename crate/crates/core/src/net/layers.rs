//! Layer-level forward passes built from tape primitives.

use crate::autodiff::{NormStats, Tape, Var};
use crate::error::{config_err, Result};
use crate::filter::{normalize_kernel, DEFAULT_EPS};
use crate::tensor::Tensor;

/// Epsilon inside the batch/instance-norm square root.
pub const NORM_EPS: f64 = 1e-7;
/// Weight of the newest batch in batch-norm running averages.
pub const BN_MOMENTUM: f64 = 0.1;

/// Convolution with a filter-normalized kernel, optionally followed by a
/// per-output-channel scale and shift.
///
/// Normalization happens functionally on every call, so gradients reach the
/// raw weights through it.
pub fn norm_conv_forward(
    tape: &mut Tape,
    input: Var,
    raw_weights: Var,
    affine: Option<(Var, Var)>,
    stride: usize,
    padding: usize,
    eps: f64,
) -> Result<Var> {
    let kernel = normalize_kernel(tape, raw_weights, eps)?;
    let y = tape.conv2d(input, kernel, stride, padding)?;
    match affine {
        Some((scale, shift)) => {
            let y = tape.channel_scale(y, scale)?;
            tape.channel_shift(y, shift)
        }
        None => Ok(y),
    }
}

/// Plain convolution with an optional per-output-channel bias.
pub fn conv_forward(tape: &mut Tape, input: Var, weights: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
    let y = tape.conv2d(input, weights, stride, padding)?;
    match bias {
        Some(b) => tape.channel_shift(y, b),
        None => Ok(y),
    }
}

/// Standalone filter-normalized convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormConvLayer {
    /// `OC×IC×kH×kW`.
    pub raw_weights: Tensor,
    /// `OC`; ignored unless `use_affine`.
    pub scale: Tensor,
    /// `OC`; ignored unless `use_affine`.
    pub shift: Tensor,
    pub eps: f64,
    pub use_affine: bool,
    pub stride: usize,
    pub padding: usize,
}

impl NormConvLayer {
    pub fn new(raw_weights: Tensor, use_affine: bool) -> Result<Self> {
        if raw_weights.ndim() != 4 {
            return Err(config_err!("kernel must be OCxICxkHxkW, got {:?}", raw_weights.shape()));
        }
        let oc = raw_weights.shape()[0];
        Ok(Self {
            raw_weights,
            scale: Tensor::full(vec![oc], 1.0),
            shift: Tensor::zeros(vec![oc]),
            eps: DEFAULT_EPS,
            use_affine,
            stride: 1,
            padding: 0,
        })
    }

    pub fn forward_on(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let w = tape.leaf(&self.raw_weights);
        let affine = if self.use_affine {
            Some((tape.leaf(&self.scale), tape.leaf(&self.shift)))
        } else {
            None
        };
        norm_conv_forward(tape, input, w, affine, self.stride, self.padding, self.eps)
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let y = self.forward_on(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// The kernel actually convolved with the input.
    pub fn effective_kernel(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let w = tape.constant(self.raw_weights.clone());
        let k = normalize_kernel(&mut tape, w, self.eps)?;
        Ok(tape.value(k).clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Batch,
    Instance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], count: usize) {
        // running variance tracks the unbiased estimate
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        for (m, b) in self.mean.iter_mut().zip(batch_mean) {
            *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
        }
        for (v, b) in self.var.iter_mut().zip(batch_var) {
            *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b * unbias;
        }
    }
}

/// Batch or instance normalization with a learnable per-channel affine map.
///
/// Batch mode standardizes with batch statistics while training (and folds
/// them into `running`) and with the running averages otherwise. Instance
/// mode always uses each sample's own statistics.
pub fn batch_or_instance_norm(
    tape: &mut Tape,
    input: Var,
    gamma: Var,
    beta: Var,
    mode: NormMode,
    running: Option<&mut RunningStats>,
    train: bool,
) -> Result<Var> {
    match mode {
        NormMode::Instance => Ok(tape.normalize(input, gamma, beta, NormStats::Instance, NORM_EPS)?.0),
        NormMode::Batch if train => {
            let s = tape.shape(input);
            if s[0] < 2 {
                return Err(config_err!("batch normalization in training mode needs a batch of at least 2"));
            }
            let count = s[0] * s[2] * s[3];
            let (y, stats) = tape.normalize(input, gamma, beta, NormStats::Batch, NORM_EPS)?;
            if let (Some(r), Some(stats)) = (running, stats) {
                r.update(&stats.mean, &stats.var, count);
            }
            Ok(y)
        }
        NormMode::Batch => {
            let r = running.ok_or_else(|| config_err!("batch normalization at inference needs running statistics"))?;
            let (mean, var) = (r.mean.clone(), r.var.clone());
            Ok(tape
                .normalize(input, gamma, beta, NormStats::Fixed { mean: &mean, var: &var }, NORM_EPS)?
                .0)
        }
    }
}
