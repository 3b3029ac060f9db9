use std::path::Path;

use super::config::{Architecture, ConvMode, ModelConfig, NormLayer};
use super::layers::{batch_or_instance_norm, conv_forward, norm_conv_forward, NormMode, RunningStats};
use crate::autodiff::{Checkpoint, Tape, Var};
use crate::error::{config_err, shape_err, Error, Result};
use crate::filter::normalize_kernel;
use crate::rng::Rng;
use crate::tensor::Tensor;

const INIT_STREAM: u64 = 0x1417;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
struct ConvSpec {
    name: String,
    weight: usize,
    bias: Option<usize>,
    affine: Option<(usize, usize)>,
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct NormSpec {
    gamma: usize,
    beta: usize,
    mode: NormMode,
    stats: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Unit {
    conv: usize,
    norm: Option<NormSpec>,
}

#[derive(Debug, Clone, PartialEq)]
enum Block {
    /// conv → norm → relu
    Plain(Unit),
    MaxPool,
    /// relu(b(relu(a(x))) + shortcut(x))
    Residual { a: Unit, b: Unit, shortcut: Option<Unit> },
}

/// Everything a forward pass exposes besides the logits.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// Output of every conv (after its bias or affine map, before any
    /// normalization layer), in layer order.
    pub conv_outputs: Vec<Var>,
    /// Post-relu output of every conv unit, aligned with `conv_outputs`.
    pub activations: Vec<Var>,
    /// Tape handle of every parameter, aligned with [`Model::params`].
    pub params: Vec<Var>,
    /// Raw kernel handle of every conv, in layer order.
    pub conv_weights: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
    convs: Vec<ConvSpec>,
    blocks: Vec<Block>,
    head: (usize, usize),
    running: Vec<RunningStats>,
}

struct Builder<'a> {
    cfg: &'a ModelConfig,
    params: Vec<Param>,
    convs: Vec<ConvSpec>,
    running: Vec<RunningStats>,
}

impl Builder<'_> {
    fn param(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    fn unit(&mut self, ic: usize, oc: usize, size: usize, stride: usize) -> Unit {
        let index = self.convs.len();
        let name = format!("conv{index}");
        let weight = self.param(format!("{name}.weight"), Tensor::zeros(vec![oc, ic, size, size]));
        let (mut bias, mut affine) = (None, None);
        match self.cfg.conv_mode {
            ConvMode::Vanilla if self.cfg.conv_bias() => {
                bias = Some(self.param(format!("{name}.bias"), Tensor::zeros(vec![oc])));
            }
            ConvMode::Normalized if self.cfg.affine() => {
                let a = self.param(format!("{name}.scale"), Tensor::full(vec![oc], 1.0));
                let b = self.param(format!("{name}.shift"), Tensor::zeros(vec![oc]));
                affine = Some((a, b));
            }
            _ => {}
        }
        self.convs.push(ConvSpec {
            name,
            weight,
            bias,
            affine,
            stride,
            padding: size / 2,
        });
        let norm = match self.cfg.norm_layer {
            NormLayer::None => None,
            layer => {
                let mode = if layer == NormLayer::Batch { NormMode::Batch } else { NormMode::Instance };
                let gamma = self.param(format!("norm{index}.gamma"), Tensor::full(vec![oc], 1.0));
                let beta = self.param(format!("norm{index}.beta"), Tensor::zeros(vec![oc]));
                let stats = self.running.len();
                if mode == NormMode::Batch {
                    self.running.push(RunningStats::new(oc));
                } else {
                    self.running.push(RunningStats::new(0));
                }
                Some(NormSpec { gamma, beta, mode, stats })
            }
        };
        Unit { conv: index, norm }
    }
}

/// Builds and initializes a model.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut b = Builder {
        cfg: config,
        params: Vec::new(),
        convs: Vec::new(),
        running: Vec::new(),
    };
    let w = config.width;
    let mut blocks = Vec::new();
    let last = match config.architecture {
        Architecture::TinyCnn => {
            let mut ic = config.in_channels;
            for pair in 0..config.depth {
                let oc = w << pair;
                blocks.push(Block::Plain(b.unit(ic, oc, 3, 1)));
                blocks.push(Block::Plain(b.unit(oc, oc, 3, 1)));
                if pair + 1 < config.depth {
                    blocks.push(Block::MaxPool);
                }
                ic = oc;
            }
            ic
        }
        Architecture::MiniResnet => {
            blocks.push(Block::Plain(b.unit(config.in_channels, w, 3, 1)));
            let mut ic = w;
            for stage in 0..3 {
                let oc = w << stage;
                for block in 0..config.depth {
                    let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                    let a = b.unit(ic, oc, 3, stride);
                    let second = b.unit(oc, oc, 3, 1);
                    let shortcut = (stride != 1 || ic != oc).then(|| b.unit(ic, oc, 1, stride));
                    blocks.push(Block::Residual { a, b: second, shortcut });
                    ic = oc;
                }
            }
            ic
        }
    };
    let head_w = b.param("head.weight".into(), Tensor::zeros(vec![last, config.classes]));
    let head_b = b.param("head.bias".into(), Tensor::zeros(vec![config.classes]));
    let mut model = Model {
        config: config.clone(),
        params: b.params,
        convs: b.convs,
        blocks,
        head: (head_w, head_b),
        running: b.running,
    };
    model.init_params(config.seed);
    Ok(model)
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn num_conv_layers(&self) -> usize {
        self.convs.len()
    }

    pub fn conv_names(&self) -> Vec<String> {
        self.convs.iter().map(|c| c.name.clone()).collect()
    }

    /// Total number of conv output channels.
    pub fn conv_output_channels(&self) -> usize {
        self.convs.iter().map(|c| self.params[c.weight].value.shape()[0]).sum()
    }

    pub fn raw_kernels(&self) -> Vec<&Tensor> {
        self.convs.iter().map(|c| &self.params[c.weight].value).collect()
    }

    pub fn raw_kernel_mut(&mut self, conv: usize) -> &mut Tensor {
        let idx = self.convs[conv].weight;
        &mut self.params[idx].value
    }

    /// The kernels actually convolved with the input: normalized in
    /// normalized mode, raw otherwise.
    pub fn effective_kernels(&self) -> Result<Vec<Tensor>> {
        self.raw_kernels()
            .into_iter()
            .map(|k| match self.config.conv_mode {
                ConvMode::Vanilla => Ok(k.clone()),
                ConvMode::Normalized => {
                    let mut tape = Tape::new();
                    let v = tape.constant(k.clone());
                    let n = normalize_kernel(&mut tape, v, self.config.eps)?;
                    Ok(tape.value(n).clone())
                }
            })
            .collect()
    }

    /// Fan-in scaled uniform init of every kernel and the head, ones for
    /// scales and norm gains, zeros for shifts and biases. Kernels are drawn
    /// in layer order from per-layer streams, so the raw weights do not
    /// depend on the conv mode or normalization layer.
    pub fn init_params(&mut self, seed: u64) {
        let mut ordinal = 0u64;
        let weight_ids: Vec<usize> = self
            .convs
            .iter()
            .map(|c| c.weight)
            .chain(std::iter::once(self.head.0))
            .collect();
        for p in self.params.iter_mut() {
            let fill = if p.name.ends_with(".scale") || p.name.ends_with(".gamma") { 1.0 } else { 0.0 };
            p.value.data_mut().iter_mut().for_each(|v| *v = fill);
        }
        for id in weight_ids {
            let t = &mut self.params[id].value;
            let fan_in = if t.ndim() == 4 { t.numel() / t.shape()[0] } else { t.shape()[0] };
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut rng = Rng::for_item(seed, INIT_STREAM, ordinal);
            t.data_mut().iter_mut().for_each(|v| *v = rng.uniform_in(-bound, bound));
            ordinal += 1;
        }
        for r in self.running.iter_mut() {
            *r = RunningStats::new(r.mean.len());
        }
    }

    /// Forward pass with every parameter registered as a trainable leaf.
    /// In training mode batch-norm running statistics are updated.
    pub fn forward(&mut self, tape: &mut Tape, input: Var, train: bool) -> Result<Forward> {
        let mut running = std::mem::take(&mut self.running);
        let out = self.run(tape, input, train, true, &mut running);
        self.running = running;
        out
    }

    /// Inference-mode forward pass that leaves the model untouched.
    /// Parameters enter the tape as constants, so only the input (if it is a
    /// gradient-tracking leaf) receives gradients.
    pub fn forward_eval(&self, tape: &mut Tape, input: Var) -> Result<Forward> {
        let mut running = self.running.clone();
        self.run(tape, input, false, false, &mut running)
    }

    /// Logits for a batch of images.
    pub fn predict_logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let f = self.forward_eval(&mut tape, x)?;
        Ok(tape.value(f.logits).clone())
    }

    fn run(&self, tape: &mut Tape, input: Var, train: bool, trainable: bool, running: &mut [RunningStats]) -> Result<Forward> {
        let s = tape.shape(input);
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(shape_err!(
                "model expects N×{}×H×W input, got {s:?}",
                self.config.in_channels
            ));
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        let conv_weights = self.convs.iter().map(|c| params[c.weight]).collect();
        let mut st = RunState {
            tape,
            params: &params,
            running,
            train,
            conv_outputs: Vec::new(),
            activations: Vec::new(),
        };
        let mut x = input;
        for block in &self.blocks {
            x = match block {
                Block::Plain(u) => {
                    let y = self.unit(&mut st, u, x)?;
                    let y = st.tape.relu(y);
                    st.activations.push(y);
                    y
                }
                Block::MaxPool => st.tape.max_pool2(x)?,
                Block::Residual { a, b, shortcut } => {
                    let h = self.unit(&mut st, a, x)?;
                    let h = st.tape.relu(h);
                    st.activations.push(h);
                    let h = self.unit(&mut st, b, h)?;
                    let skip = match shortcut {
                        Some(u) => self.unit(&mut st, u, x)?,
                        None => x,
                    };
                    let y = st.tape.add(h, skip)?;
                    let y = st.tape.relu(y);
                    // one post-relu entry per conv keeps the two lists aligned
                    st.activations.push(y);
                    if shortcut.is_some() {
                        st.activations.push(y);
                    }
                    y
                }
            };
        }
        let RunState {
            tape,
            conv_outputs,
            activations,
            ..
        } = st;
        let pooled = tape.global_avg_pool(x)?;
        let logits = tape.matmul(pooled, params[self.head.0])?;
        let logits = tape.add_row_bias(logits, params[self.head.1])?;
        Ok(Forward {
            logits,
            conv_outputs,
            activations,
            params,
            conv_weights,
        })
    }

    fn unit(&self, st: &mut RunState<'_, '_>, unit: &Unit, x: Var) -> Result<Var> {
        let c = &self.convs[unit.conv];
        let p = st.params;
        let w = p[c.weight];
        let y = match self.config.conv_mode {
            ConvMode::Vanilla => conv_forward(st.tape, x, w, c.bias.map(|b| p[b]), c.stride, c.padding)?,
            ConvMode::Normalized => {
                let affine = c.affine.map(|(a, b)| (p[a], p[b]));
                norm_conv_forward(st.tape, x, w, affine, c.stride, c.padding, self.config.eps)?
            }
        };
        st.conv_outputs.push(y);
        match &unit.norm {
            None => Ok(y),
            Some(n) => {
                let stats = (n.mode == NormMode::Batch).then(|| &mut st.running[n.stats]);
                batch_or_instance_norm(st.tape, y, p[n.gamma], p[n.beta], n.mode, stats, st.train)
            }
        }
    }

    /// Parameters plus batch-norm running statistics, with the config in the
    /// header.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for (i, r) in self.running.iter().enumerate() {
            if r.mean.is_empty() {
                continue;
            }
            tensors.push((format!("running{i}.mean"), Tensor::from_vec(r.mean.clone())));
            tensors.push((format!("running{i}.var"), Tensor::from_vec(r.var.clone())));
        }
        Checkpoint {
            config: self.config.to_map(),
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_map(&ckpt.config)?;
        let mut model = build_model(&config)?;
        for p in model.params.iter_mut() {
            let t = ckpt
                .get(&p.name)
                .ok_or_else(|| config_err!("checkpoint lacks parameter {}", p.name))?;
            if t.shape() != p.value.shape() {
                return Err(config_err!(
                    "parameter {} has shape {:?} in the checkpoint but {:?} in the model",
                    p.name,
                    t.shape(),
                    p.value.shape()
                ));
            }
            p.value = t.clone();
        }
        for (i, r) in model.running.iter_mut().enumerate() {
            if r.mean.is_empty() {
                continue;
            }
            for (suffix, dst) in [("mean", &mut r.mean), ("var", &mut r.var)] {
                let t = ckpt
                    .get(&format!("running{i}.{suffix}"))
                    .ok_or_else(|| config_err!("checkpoint lacks running{i}.{suffix}"))?;
                if t.numel() != dst.len() {
                    return Err(config_err!("running{i}.{suffix} has the wrong length"));
                }
                dst.copy_from_slice(t.data());
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Overwrites parameter values, keeping names and shapes.
    pub fn set_param_values(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(shape_err!("parameter {}: shape {:?} vs {:?}", p.name, p.value.shape(), v.shape()));
            }
            p.value = v.clone();
        }
        Ok(())
    }
}

struct RunState<'t, 'r> {
    tape: &'t mut Tape,
    params: &'t [Var],
    running: &'r mut [RunningStats],
    train: bool,
    conv_outputs: Vec<Var>,
    activations: Vec<Var>,
}
