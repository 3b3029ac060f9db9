use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use super::argmax_rows;
use crate::data::Dataset;
use crate::error::{config_err, Error, Result};
use crate::net::Model;
use crate::rng::Rng;

/// Default evaluation batch size. Results do not depend on it.
pub const EVAL_BATCH: usize = 128;

const LOW_SHOT_STREAM: u64 = 0x4c53;

fn check_classes(model: &Model, set: &Dataset) -> Result<()> {
    if set.classes != model.config().classes {
        return Err(config_err!(
            "dataset has {} classes but the model predicts {}",
            set.classes,
            model.config().classes
        ));
    }
    Ok(())
}

/// Eval-mode top-1 predictions.
pub fn predict(model: &Model, set: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    check_classes(model, set)?;
    if batch_size == 0 {
        return Err(config_err!("batch size must be positive"));
    }
    let mut preds = Vec::with_capacity(set.len());
    let mut start = 0;
    while start < set.len() {
        let end = (start + batch_size).min(set.len());
        let idx: Vec<usize> = (start..end).collect();
        let logits = model.predict_logits(&set.images.select_outer(&idx)?)?;
        preds.extend(argmax_rows(&logits));
        start = end;
    }
    Ok(preds)
}

fn accuracy_of(preds: &[usize], labels: &[usize]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / preds.len() as f64
}

pub fn evaluate(model: &Model, set: &Dataset) -> Result<f64> {
    if set.is_empty() {
        return Err(config_err!("cannot evaluate on an empty set"));
    }
    Ok(accuracy_of(&predict(model, set, EVAL_BATCH)?, &set.labels))
}

/// Class-stratified sample of `⌈fraction·n_c⌉` images per class, returned in
/// original order.
pub fn low_shot_subsample(set: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(config_err!("fraction must lie in (0, 1], got {fraction}"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); set.classes];
    for (i, &l) in set.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut keep = Vec::new();
    for (c, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Degenerate(format!("class {c} has no images")));
        }
        let take = ((fraction * members.len() as f64).ceil() as usize).clamp(1, members.len());
        Rng::for_item(seed, LOW_SHOT_STREAM, c as u64).shuffle(&mut members);
        keep.extend_from_slice(&members[..take]);
    }
    keep.sort_unstable();
    set.subset(&keep)
}

/// Population standard deviation over every pixel of every channel.
pub fn image_contrast(pixels: &[f64]) -> f64 {
    let n = pixels.len() as f64;
    let mean = pixels.iter().sum::<f64>() / n;
    (pixels.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastBins {
    /// Largest contrast in each bin (absent for empty bins).
    pub upper_edges: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    /// `None` for empty bins.
    pub accuracies: Vec<Option<f64>>,
    /// All images had the same contrast and were put in the first bin.
    pub degenerate: bool,
}

/// Bin index of every image: images sorted by contrast (ties by index) are
/// cut into `n_bins` runs whose lengths differ by at most one.
pub fn contrast_bin_assignment(contrasts: &[f64], n_bins: usize) -> (Vec<usize>, bool) {
    let n = contrasts.len();
    let first = contrasts[0];
    if contrasts.iter().all(|&c| c == first) {
        return (vec![0; n], true);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| contrasts[a].total_cmp(&contrasts[b]).then(a.cmp(&b)));
    let mut bins = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        bins[i] = rank * n_bins / n;
    }
    (bins, false)
}

pub fn contrast_binned_accuracy(model: &Model, set: &Dataset, n_bins: usize) -> Result<ContrastBins> {
    if n_bins == 0 || set.len() < n_bins {
        return Err(config_err!("need at least {n_bins} images for {n_bins} contrast bins, got {}", set.len()));
    }
    let contrasts: Vec<f64> = (0..set.len()).map(|i| image_contrast(set.image(i))).collect();
    let (bins, degenerate) = contrast_bin_assignment(&contrasts, n_bins);
    if degenerate {
        warn!("every image has contrast {}; all images fall in a single bin", contrasts[0]);
    }
    let preds = predict(model, set, EVAL_BATCH)?;
    let mut counts = vec![0; n_bins];
    let mut hits = vec![0; n_bins];
    let mut upper: Vec<Option<f64>> = vec![None; n_bins];
    for i in 0..set.len() {
        let b = bins[i];
        counts[b] += 1;
        hits[b] += usize::from(preds[i] == set.labels[i]);
        upper[b] = Some(upper[b].map_or(contrasts[i], |u: f64| u.max(contrasts[i])));
    }
    let accuracies = counts
        .iter()
        .zip(&hits)
        .map(|(&c, &h)| (c > 0).then(|| h as f64 / c as f64))
        .collect();
    Ok(ContrastBins {
        upper_edges: upper,
        counts,
        accuracies,
        degenerate,
    })
}

/// Fraction of images whose prediction changes under the corruption.
pub fn flip_rate(model: &Model, clean: &Dataset, corrupted: &Dataset) -> Result<f64> {
    if clean.len() != corrupted.len() {
        return Err(Error::Shape(format!(
            "clean set has {} images, corrupted set {}",
            clean.len(),
            corrupted.len()
        )));
    }
    if clean.is_empty() {
        return Err(config_err!("flip rate of an empty set"));
    }
    let a = predict(model, clean, EVAL_BATCH)?;
    let b = predict(model, corrupted, EVAL_BATCH)?;
    Ok(a.iter().zip(&b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keyed by set name (`D`, `D_C`, `D_L`, `D_B`, `D_S` or a file stem).
    pub accuracies: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub contrast_bins: Option<ContrastBins>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub flip_rate: Option<f64>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
