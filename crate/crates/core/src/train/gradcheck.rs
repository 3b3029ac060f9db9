use serde::{Deserialize, Serialize};

use crate::autodiff::{relative_error, Tape};
use crate::data::Dataset;
use crate::error::{config_err, Error, Result};
use crate::filter::soft_reg;
use crate::net::Model;
use crate::rng::Rng;

const PROBE_STREAM: u64 = 0x4743;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub probes: usize,
    pub max_rel_error: f64,
}

/// Training-mode loss (mean cross-entropy plus the weighted soft penalty)
/// and its gradient with respect to every parameter.
pub fn model_loss(model: &Model, batch: &Dataset, reg_strength: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut m = model.clone();
    let mut tape = Tape::new();
    let x = tape.constant(batch.images.clone());
    let fwd = m.forward(&mut tape, x, true)?;
    let mut loss = tape.softmax_cross_entropy(fwd.logits, &batch.labels)?;
    if reg_strength > 0.0 {
        let r = soft_reg(&mut tape, &fwd.conv_weights)?;
        let r = tape.scale(r, reg_strength);
        loss = tape.add(loss, r)?;
    }
    let value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let grads = fwd
        .params
        .iter()
        .map(|&p| tape.grad(p).map(|g| g.into_data()).unwrap_or_default())
        .collect();
    Ok((value, grads))
}

/// Compares analytic gradients with central differences at `probes` random
/// entries of every parameter tensor.
pub fn gradcheck_model(model: &Model, batch: &Dataset, probes: usize, h: f64, reg_strength: f64, seed: u64) -> Result<Vec<ParamCheck>> {
    if !(h > 0.0) {
        return Err(config_err!("step must be positive, got {h}"));
    }
    let (_, grads) = model_loss(model, batch, reg_strength)?;
    let mut out = Vec::with_capacity(grads.len());
    let mut probe_model = model.clone();
    for (k, g) in grads.iter().enumerate() {
        let n = model.params()[k].value.numel();
        let mut rng = Rng::for_item(seed, PROBE_STREAM, k as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..probes {
            let j = rng.below(n);
            let orig = model.params()[k].value.data()[j];
            probe_model.params_mut()[k].value.data_mut()[j] = orig + h;
            let (up, _) = model_loss(&probe_model, batch, reg_strength)?;
            probe_model.params_mut()[k].value.data_mut()[j] = orig - h;
            let (down, _) = model_loss(&probe_model, batch, reg_strength)?;
            probe_model.params_mut()[k].value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!("non-finite difference quotient for {}", model.params()[k].name)));
            }
            let analytic = g.get(j).copied().unwrap_or(0.0);
            worst = worst.max(relative_error(analytic, numeric));
        }
        out.push(ParamCheck {
            name: model.params()[k].name.clone(),
            probes,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
