//! Mini-batch SGD training, evaluation and diagnostics.

mod diagnostics;
mod gradcheck;
mod metrics;

pub use diagnostics::{
    correlation_matrix, filter_error_analysis, guided_backprop_maps, guided_backprop_similarity, ratio_histogram,
    spearman, FilterError, RatioHistogram, Response, SimilarityReport, RATIO_BINS, SIMILARITY_BINS,
};
pub use gradcheck::{gradcheck_model, model_loss, ParamCheck};
pub use metrics::{
    contrast_bin_assignment, contrast_binned_accuracy, evaluate, flip_rate, image_contrast, low_shot_subsample, predict, ContrastBins,
    EvalReport, EVAL_BATCH,
};

use std::fmt;
use std::str::FromStr;

use log::{debug, info};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{config_err, Error, Result};
use crate::filter::soft_reg;
use crate::net::Model;
use crate::rng::Rng;
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 0x5348;
const AUGMENT_STREAM: u64 = 0x4147;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    /// Multiply the rate by `gamma` every `every` epochs.
    Step { every: usize, gamma: f64 },
    /// Cosine annealing from the initial rate to 0 over `total` epochs.
    Cosine { total: usize },
}

impl Schedule {
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::Step { every, gamma } => base * gamma.powi((epoch / every.max(1)) as i32),
            Schedule::Cosine { total } => {
                let t = (epoch as f64 / total.max(1) as f64).min(1.0);
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Constant => write!(f, "constant"),
            Schedule::Step { every, gamma } => write!(f, "step:{every}:{gamma}"),
            Schedule::Cosine { total } => write!(f, "cosine:{total}"),
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    /// `constant`, `step:<every>:<gamma>` or `cosine:<total>`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || config_err!("cannot parse schedule '{s}'");
        match parts.as_slice() {
            ["constant"] => Ok(Schedule::Constant),
            ["step", every, gamma] => Ok(Schedule::Step {
                every: every.parse().map_err(|_| bad())?,
                gamma: gamma.parse().map_err(|_| bad())?,
            }),
            ["cosine", total] => Ok(Schedule::Cosine {
                total: total.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper {
    pub lr: f64,
    pub momentum: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Weight of the soft normalization penalty; 0 disables it.
    pub reg_strength: f64,
    /// Max gain/bias variation of the training augmentation; 0 disables it.
    pub augment_fraction: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            schedule: Schedule::Cosine { total: 30 },
            epochs: 30,
            batch_size: 64,
            weight_decay: 5e-4,
            reg_strength: 0.0,
            augment_fraction: 0.0,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config_err!("learning rate must be non-negative, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.augment_fraction) {
            return Err(config_err!("augmentation fraction must lie in [0, 1], got {}", self.augment_fraction));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.reg_strength < 0.0 {
            return Err(config_err!("momentum must lie in [0, 1); weight decay and reg strength must be >= 0"));
        }
        Ok(())
    }

    /// Sets one field from its textual form. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.trim().parse().map_err(|_| config_err!("{key}: cannot parse '{value}'"))
        }
        match key {
            "lr" => self.lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "schedule" => self.schedule = value.parse()?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "reg_strength" => self.reg_strength = num(key, value)?,
            "augment_fraction" => self.augment_fraction = num(key, value)?,
            "train_seed" => self.seed = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("lr".into(), self.lr.to_string()),
            ("momentum".into(), self.momentum.to_string()),
            ("schedule".into(), self.schedule.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("reg_strength".into(), self.reg_strength.to_string()),
            ("augment_fraction".into(), self.augment_fraction.to_string()),
            ("train_seed".into(), self.seed.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,train_acc,val_acc";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let val = self.val_acc.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.epoch, self.lr, self.train_loss, self.train_acc, val)
    }
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for row in log {
        s.push_str(&row.csv_row());
        s.push('\n');
    }
    s
}

/// Called after every optimizer step with the updated model and the global
/// step index.
pub type StepHook<'a> = dyn FnMut(&Model, usize) -> Result<()> + 'a;

pub fn train(model: &mut Model, set: &Dataset, val: Option<&Dataset>, hyper: &TrainHyper) -> Result<Vec<EpochLog>> {
    train_with_hook(model, set, val, hyper, None)
}

/// Per-image gain and bias of the training augmentation, drawn from a stream
/// that depends only on the seed, epoch and image index, so paired runs see
/// identical draws.
pub fn augmentation_draw(seed: u64, epoch: usize, index: usize, fraction: f64) -> (f64, f64) {
    let mut rng = Rng::for_item(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), AUGMENT_STREAM, index as u64);
    (rng.uniform_in(1.0 - fraction, 1.0 + fraction), rng.uniform_in(-fraction, fraction))
}

/// Order in which the training images are visited during `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::for_item(seed, SHUFFLE_STREAM, epoch as u64).shuffle(&mut order);
    order
}

pub fn train_with_hook(
    model: &mut Model,
    set: &Dataset,
    val: Option<&Dataset>,
    hyper: &TrainHyper,
    hook: Option<&mut StepHook<'_>>,
) -> Result<Vec<EpochLog>> {
    let mut log = Vec::with_capacity(hyper.epochs);
    train_into(model, set, val, hyper, hook, &mut log)?;
    Ok(log)
}

/// Like [`train_with_hook`], but appends each epoch's row to `log` as soon
/// as it completes, so the rows survive a divergence error.
pub fn train_into(
    model: &mut Model,
    set: &Dataset,
    val: Option<&Dataset>,
    hyper: &TrainHyper,
    mut hook: Option<&mut StepHook<'_>>,
    log: &mut Vec<EpochLog>,
) -> Result<()> {
    hyper.validate()?;
    if set.is_empty() {
        return Err(config_err!("training set is empty"));
    }
    if set.classes != model.config().classes {
        return Err(config_err!(
            "dataset has {} classes but the model predicts {}",
            set.classes,
            model.config().classes
        ));
    }
    let per_image = set.channels() * set.height() * set.width();
    let decayed: Vec<bool> = model.params().iter().map(|p| p.name.ends_with(".weight")).collect();
    let mut velocity: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
    let mut step = 0usize;
    for epoch in 0..hyper.epochs {
        let lr = hyper.schedule.rate(hyper.lr, epoch);
        let order = epoch_order(hyper.seed, epoch, set.len());
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (batch_no, idx) in order.chunks(hyper.batch_size).enumerate() {
            let mut data = Vec::with_capacity(idx.len() * per_image);
            for &i in idx {
                let img = set.image(i);
                if hyper.augment_fraction > 0.0 {
                    let (g, o) = augmentation_draw(hyper.seed, epoch, i, hyper.augment_fraction);
                    data.extend(img.iter().map(|v| g * v + o));
                } else {
                    data.extend_from_slice(img);
                }
            }
            let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
            let x = Tensor::new(vec![idx.len(), set.channels(), set.height(), set.width()], data)?;

            let mut tape = Tape::new();
            let vx = tape.constant(x);
            let fwd = model.forward(&mut tape, vx, true)?;
            let ce = tape.softmax_cross_entropy(fwd.logits, &labels)?;
            let ce_value = tape.value(ce).data()[0];
            let loss = if hyper.reg_strength > 0.0 {
                let r = soft_reg(&mut tape, &fwd.conv_weights)?;
                let r = tape.scale(r, hyper.reg_strength);
                tape.add(ce, r)?
            } else {
                ce
            };
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged: loss {loss_value} at epoch {epoch}, batch {batch_no} (lr {lr:e})"
                )));
            }
            correct += argmax_rows(tape.value(fwd.logits))
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            loss_sum += ce_value * idx.len() as f64;
            tape.backward(loss)?;

            for (k, p) in model.params_mut().iter_mut().enumerate() {
                let Some(g) = tape.grad(fwd.params[k]) else { continue };
                let wd = if decayed[k] { hyper.weight_decay } else { 0.0 };
                let v = &mut velocity[k];
                for ((w, vel), gr) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                    *vel = hyper.momentum * *vel + gr + wd * *w;
                    *w -= lr * *vel;
                }
            }
            if let Some(h) = hook.as_deref_mut() {
                h(model, step)?;
            }
            step += 1;
        }
        let val_acc = match val {
            Some(v) => Some(evaluate(model, v)?),
            None => None,
        };
        let row = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / set.len() as f64,
            train_acc: correct as f64 / set.len() as f64,
            val_acc,
        };
        info!("{}", row.csv_row());
        debug!("epoch {epoch} finished after {step} steps");
        log.push(row);
    }
    Ok(())
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let cols = logits.shape()[1];
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
