//! Reverse-mode tape.
//!
//! Every primitive appends one record holding its output value and whatever
//! its backward rule needs. Records are only ever appended, so inputs always
//! precede their consumers and the reverse sweep is a plain reverse walk.

use super::kernels::{col2im, gemm, im2col, ConvGeom};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which statistics a normalization layer standardizes with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormStats<'a> {
    /// Per-channel statistics over batch and space.
    Batch,
    /// Per-sample, per-channel statistics over space.
    Instance,
    /// Fixed per-channel mean and variance (batch norm at inference).
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

/// How relu gates gradients in the reverse sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackwardMode {
    #[default]
    Standard,
    /// Guided backpropagation: relu additionally drops negative incoming
    /// gradients.
    Guided,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Relu(Var),
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    RowSum(Var),
    BroadcastRows(Var),
    AddRowBias(Var, Var),
    ChannelScale(Var, Var),
    ChannelShift(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Normalize {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        per_sample: bool,
        fixed: bool,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. Gradients are tracked when `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t.detach(), Op::Leaf, rg)
    }

    /// Records a leaf that takes ownership of its values.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.detach(), Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t.detach(), Op::Leaf, true)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |p, q| p + q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |p, q| p - q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |p, q| p * q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let out = self.zip_with(a, b, |p, q| p / q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let rg = self.rg(&[a]);
        self.push(out, Op::Abs(a), rg)
    }

    /// `max(x, 0)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// Splits `w` into its positive part `max(w, 0)` and negative part
    /// `max(-w, 0)`, so that `w = plus - minus`.
    pub fn split_parts(&mut self, w: Var) -> (Var, Var) {
        let plus = self.relu(w);
        let neg = self.neg(w);
        let minus = self.relu(neg);
        (plus, minus)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul: {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).detach().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// `[r, c] -> [r]`, summing each row.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(shape_err!("row_sum expects a matrix, got {s:?}"));
        }
        let c = s[1];
        let out: Vec<f64> = self.value(a).data().chunks(c).map(|r| r.iter().sum()).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_vec(out), Op::RowSum(a), rg))
    }

    /// `[r] -> [r, cols]`, repeating each entry along its row.
    pub fn broadcast_rows(&mut self, a: Var, cols: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 1 || cols == 0 {
            return Err(shape_err!("broadcast_rows expects a vector, got {s:?}"));
        }
        let r = s[0];
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, cols))
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![r, cols], out)?, Op::BroadcastRows(a), rg))
    }

    /// `[n, k] + [k]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(shape_err!("add_row_bias: {sx:?} + {sb:?}"));
        }
        let k = sx[1];
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).detach();
        for row in out.data_mut().chunks_mut(k) {
            for (v, bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRowBias(x, bias), rg))
    }

    fn channel_dims(&self, x: Var, per_channel: Var, what: &str) -> Result<(usize, usize, usize)> {
        let (sx, sp) = (self.shape(x), self.shape(per_channel));
        if sx.len() != 4 || sp != [sx[1]] {
            return Err(shape_err!("{what}: {sx:?} with per-channel {sp:?}"));
        }
        Ok((sx[0], sx[1], sx[2] * sx[3]))
    }

    /// Multiplies each channel of an NCHW tensor by its own scalar.
    pub fn channel_scale(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (n, c, hw) = self.channel_dims(x, scale, "channel_scale")?;
        let s = self.value(scale).data().to_vec();
        let mut out = self.value(x).detach();
        for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let f = s[i % c];
            plane.iter_mut().for_each(|v| *v *= f);
        }
        debug_assert_eq!(out.numel(), n * c * hw);
        let rg = self.rg(&[x, scale]);
        Ok(self.push(out, Op::ChannelScale(x, scale), rg))
    }

    /// Adds a per-channel scalar to each channel of an NCHW tensor.
    pub fn channel_shift(&mut self, x: Var, shift: Var) -> Result<Var> {
        let (_, c, hw) = self.channel_dims(x, shift, "channel_shift")?;
        let s = self.value(shift).data().to_vec();
        let mut out = self.value(x).detach();
        for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let f = s[i % c];
            plane.iter_mut().for_each(|v| *v += f);
        }
        let rg = self.rg(&[x, shift]);
        Ok(self.push(out, Op::ChannelShift(x, shift), rg))
    }

    /// 2-D cross-correlation of an NCHW input with an `OC×IC×kH×kW` kernel,
    /// zero padding on every side.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 4 || sk.len() != 4 {
            return Err(shape_err!("conv2d expects NCHW input and OIHW kernel, got {si:?} and {sk:?}"));
        }
        if si[1] != sk[1] {
            return Err(shape_err!(
                "conv2d: input has {} channels but kernel expects {}",
                si[1],
                sk[1]
            ));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be positive".into()));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (oc, kh, kw) = (sk[0], sk[2], sk[3]);
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if ph < kh || pw < kw {
            return Err(Error::Config(format!(
                "conv2d: {kh}x{kw} kernel does not fit {h}x{w} input with padding {padding}"
            )));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            padding,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        };
        let (k_len, p) = (geom.patch_len(), geom.out_len());
        let x = self.value(input).data();
        let kdata = self.value(kernel).data();
        let mut cols = vec![0.0; k_len * p];
        let mut out = vec![0.0; n * oc * p];
        for b in 0..n {
            im2col(&x[b * c * h * w..(b + 1) * c * h * w], &geom, &mut cols);
            gemm(oc, k_len, p, kdata, false, &cols, false, &mut out[b * oc * p..(b + 1) * oc * p], false);
        }
        let t = Tensor::new(vec![n, oc, geom.out_h, geom.out_w], out)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(t, Op::Conv2d { input, kernel, geom }, rg))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(shape_err!("max_pool2 needs NCHW with H, W >= 2, got {s:?}"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        // ties keep the first index in scan order
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(t, Op::MaxPool2 { input, argmax }, rg))
    }

    /// `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 4 {
            return Err(shape_err!("global_avg_pool needs NCHW, got {s:?}"));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let out: Vec<f64> = self
            .value(input)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool(input), rg))
    }

    /// Standardizes an NCHW tensor and applies a per-channel affine map.
    ///
    /// Returns the batch statistics (biased variance) when `stats` is
    /// [`NormStats::Batch`] so the caller can update running averages.
    pub fn normalize(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, c, hw) = self.channel_dims(input, gamma, "normalize")?;
        self.channel_dims(input, beta, "normalize")?;
        let x = self.value(input).data();
        let groups = |per_sample: bool| if per_sample { n * c } else { c };
        let group_of = |per_sample: bool, plane: usize| if per_sample { plane } else { plane % c };

        let (per_sample, fixed, means, vars) = match stats {
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err!("normalize: fixed stats must have {c} channels"));
                }
                (false, true, mean.to_vec(), var.to_vec())
            }
            NormStats::Batch | NormStats::Instance => {
                let per_sample = matches!(stats, NormStats::Instance);
                if !per_sample && n < 2 {
                    return Err(Error::Config(
                        "batch normalization in training mode needs a batch of at least 2".into(),
                    ));
                }
                let g = groups(per_sample);
                let count = if per_sample { hw } else { n * hw } as f64;
                let mut mean = vec![0.0; g];
                for (plane, vals) in x.chunks(hw).enumerate() {
                    mean[group_of(per_sample, plane)] += vals.iter().sum::<f64>();
                }
                mean.iter_mut().for_each(|m| *m /= count);
                let mut var = vec![0.0; g];
                for (plane, vals) in x.chunks(hw).enumerate() {
                    let gi = group_of(per_sample, plane);
                    var[gi] += vals.iter().map(|v| (v - mean[gi]).powi(2)).sum::<f64>();
                }
                var.iter_mut().for_each(|v| *v /= count);
                (per_sample, false, mean, var)
            }
        };
        let inv_std: Vec<f64> = vars.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for (plane, vals) in x.chunks(hw).enumerate() {
            let gi = group_of(per_sample, plane);
            let ch = plane % c;
            for (j, v) in vals.iter().enumerate() {
                let idx = plane * hw + j;
                xhat[idx] = (v - means[gi]) * inv_std[gi];
                out[idx] = gm[ch] * xhat[idx] + bt[ch];
            }
        }
        let shape = self.shape(input).to_vec();
        let batch_stats = matches!(stats, NormStats::Batch).then(|| BatchStats {
            mean: means.clone(),
            var: vars.clone(),
        });
        let rg = self.rg(&[input, gamma, beta]);
        let v = self.push(
            Tensor::new(shape, out)?,
            Op::Normalize {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                per_sample,
                fixed,
            },
            rg,
        );
        Ok((v, batch_stats))
    }

    /// Mean softmax cross-entropy of `[n, k]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err!(
                "softmax_cross_entropy: logits {s:?} with {} labels",
                labels.len()
            ));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(shape_err!("label {bad} out of range for {k} classes"));
        }
        let mut probs = Vec::with_capacity(s[0] * k);
        let mut loss = 0.0;
        for (row, &label) in self.value(logits).data().chunks(k).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            loss += log_z - row[label];
            probs.extend(row.iter().map(|v| (v - log_z).exp()));
        }
        let n = labels.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / n),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Populates gradients of the scalar `loss` with respect to every
    /// recorded value. Consumes the tape: a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = self.vjp(loss, &[1.0], BackwardMode::Standard)?;
        self.consumed = true;
        Ok(())
    }

    /// Gradient of `v` computed by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shape(v).to_vec(), g.clone()).ok()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Vector-Jacobian product of `output` against seed cotangent `seed`.
    /// Does not consume the tape, so several seeds can be pulled back
    /// through one forward pass.
    pub fn vjp(&self, output: Var, seed: &[f64], mode: BackwardMode) -> Result<Vec<Option<Vec<f64>>>> {
        if seed.len() != self.value(output).numel() {
            return Err(shape_err!(
                "seed of length {} for output of shape {:?}",
                seed.len(),
                self.shape(output)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.to_vec());
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, mode, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, g: &[f64], mode: BackwardMode, grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|s| {
                    for ((x, gg), q) in s.iter_mut().zip(g).zip(vb) {
                        *x += gg * q;
                    }
                });
                acc(*b, &|s| {
                    for ((x, gg), p) in s.iter_mut().zip(g).zip(va) {
                        *x += gg * p;
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|s| {
                    for ((x, gg), q) in s.iter_mut().zip(g).zip(vb) {
                        *x += gg / q;
                    }
                });
                acc(*b, &|s| {
                    for (((x, gg), p), q) in s.iter_mut().zip(g).zip(va).zip(vb) {
                        *x -= gg * p / (q * q);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &|s| add_into(s, g)),
            Op::Abs(a) => {
                let va = self.value(*a).data();
                acc(*a, &|s| {
                    for ((x, gg), p) in s.iter_mut().zip(g).zip(va) {
                        *x += gg * sign(*p);
                    }
                });
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                let guided = mode == BackwardMode::Guided;
                acc(*a, &|s| {
                    for ((x, &gg), &p) in s.iter_mut().zip(g).zip(va) {
                        if p > 0.0 && (!guided || gg > 0.0) {
                            *x += gg;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|s| gemm(m, n, k, g, false, vb, true, s, true));
                acc(*b, &|s| gemm(k, m, n, va, true, g, false, s, true));
            }
            Op::Sum(a) => acc(*a, &|s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                acc(*a, &|s| s.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::RowSum(a) => {
                let c = self.shape(*a)[1];
                acc(*a, &|s| {
                    for (row, gg) in s.chunks_mut(c).zip(g) {
                        row.iter_mut().for_each(|x| *x += gg);
                    }
                });
            }
            Op::BroadcastRows(a) => {
                let cols = node.value.shape()[1];
                acc(*a, &|s| {
                    for (x, row) in s.iter_mut().zip(g.chunks(cols)) {
                        *x += row.iter().sum::<f64>();
                    }
                });
            }
            Op::AddRowBias(x, b) => {
                let k = self.shape(*b)[0];
                acc(*x, &|s| add_into(s, g));
                acc(*b, &|s| {
                    for row in g.chunks(k) {
                        add_into(s, row);
                    }
                });
            }
            Op::ChannelScale(x, scale) => {
                let sx = self.shape(*x);
                let (c, hw) = (sx[1], sx[2] * sx[3]);
                let (vx, vs) = (self.value(*x).data(), self.value(*scale).data());
                acc(*x, &|s| {
                    for (plane, (sp, gp)) in s.chunks_mut(hw).zip(g.chunks(hw)).enumerate() {
                        let f = vs[plane % c];
                        sp.iter_mut().zip(gp).for_each(|(a, b)| *a += f * b);
                    }
                });
                acc(*scale, &|s| {
                    for (plane, (xp, gp)) in vx.chunks(hw).zip(g.chunks(hw)).enumerate() {
                        s[plane % c] += xp.iter().zip(gp).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::ChannelShift(x, shift) => {
                let sx = self.shape(*x);
                let (c, hw) = (sx[1], sx[2] * sx[3]);
                acc(*x, &|s| add_into(s, g));
                acc(*shift, &|s| {
                    for (plane, gp) in g.chunks(hw).enumerate() {
                        s[plane % c] += gp.iter().sum::<f64>();
                    }
                });
            }
            Op::Conv2d { input, kernel, geom } => {
                let n = self.shape(*input)[0];
                let oc = self.shape(*kernel)[0];
                let (k_len, p) = (geom.patch_len(), geom.out_len());
                let img_len = geom.channels * geom.height * geom.width;
                let vx = self.value(*input).data();
                let vk = self.value(*kernel).data();
                let mut cols = vec![0.0; k_len * p];
                if self.nodes[kernel.0].requires_grad {
                    let mut dk = vec![0.0; oc * k_len];
                    for b in 0..n {
                        im2col(&vx[b * img_len..(b + 1) * img_len], geom, &mut cols);
                        gemm(oc, p, k_len, &g[b * oc * p..(b + 1) * oc * p], false, &cols, true, &mut dk, true);
                    }
                    acc(*kernel, &|s| add_into(s, &dk));
                }
                if self.nodes[input.0].requires_grad {
                    let mut dx = vec![0.0; n * img_len];
                    for b in 0..n {
                        gemm(k_len, oc, p, vk, true, &g[b * oc * p..(b + 1) * oc * p], false, &mut cols, false);
                        col2im(&cols, geom, &mut dx[b * img_len..(b + 1) * img_len]);
                    }
                    acc(*input, &|s| add_into(s, &dx));
                }
            }
            Op::MaxPool2 { input, argmax } => acc(*input, &|s| {
                for (&idx, gg) in argmax.iter().zip(g) {
                    s[idx] += gg;
                }
            }),
            Op::GlobalAvgPool(input) => {
                let sx = self.shape(*input);
                let hw = sx[2] * sx[3];
                acc(*input, &|s| {
                    for (plane, gg) in s.chunks_mut(hw).zip(g) {
                        let v = gg / hw as f64;
                        plane.iter_mut().for_each(|x| *x += v);
                    }
                });
            }
            Op::Normalize {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                per_sample,
                fixed,
            } => {
                let sx = self.shape(*input);
                let (c, hw) = (sx[1], sx[2] * sx[3]);
                let gm = self.value(*gamma).data();
                let group_of = |plane: usize| if *per_sample { plane } else { plane % c };
                acc(*gamma, &|s| {
                    for (plane, (xp, gp)) in xhat.chunks(hw).zip(g.chunks(hw)).enumerate() {
                        s[plane % c] += xp.iter().zip(gp).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                acc(*beta, &|s| {
                    for (plane, gp) in g.chunks(hw).enumerate() {
                        s[plane % c] += gp.iter().sum::<f64>();
                    }
                });
                if self.nodes[input.0].requires_grad {
                    let groups = inv_std.len();
                    let count = (xhat.len() / groups) as f64;
                    // per-group sums of dxhat and dxhat * xhat
                    let mut sum_d = vec![0.0; groups];
                    let mut sum_dx = vec![0.0; groups];
                    if !fixed {
                        for (plane, (xp, gp)) in xhat.chunks(hw).zip(g.chunks(hw)).enumerate() {
                            let gi = group_of(plane);
                            let gmc = gm[plane % c];
                            for (xh, gg) in xp.iter().zip(gp) {
                                sum_d[gi] += gg * gmc;
                                sum_dx[gi] += gg * gmc * xh;
                            }
                        }
                    }
                    acc(*input, &|s| {
                        for (plane, ((sp, xp), gp)) in s
                            .chunks_mut(hw)
                            .zip(xhat.chunks(hw))
                            .zip(g.chunks(hw))
                            .enumerate()
                        {
                            let gi = group_of(plane);
                            let gmc = gm[plane % c];
                            let inv = inv_std[gi];
                            for ((d, xh), gg) in sp.iter_mut().zip(xp).zip(gp) {
                                let dxh = gg * gmc;
                                *d += if *fixed {
                                    dxh * inv
                                } else {
                                    inv * (dxh - sum_d[gi] / count - xh * sum_dx[gi] / count)
                                };
                            }
                        }
                    });
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let n = labels.len() as f64;
                acc(*logits, &|s| {
                    for (r, (row, &label)) in s.chunks_mut(k).zip(labels).enumerate() {
                        for (j, x) in row.iter_mut().enumerate() {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            *x += g[0] * (probs[r * k + j] - onehot) / n;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
