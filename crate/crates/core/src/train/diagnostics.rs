use log::info;
use serde::{Deserialize, Serialize};

use super::metrics::{predict, EVAL_BATCH};
use crate::autodiff::{BackwardMode, Tape};
use crate::data::Dataset;
use crate::error::{config_err, Error, Result};
use crate::filter::filters_of;
use crate::net::Model;
use crate::tensor::Tensor;

pub const RATIO_BINS: usize = 20;
/// Histogram bins for correlations on `[-1, 1]`.
pub const SIMILARITY_BINS: usize = 20;

fn ratio_bin(r: f64) -> usize {
    ((r.abs() * RATIO_BINS as f64) as usize).min(RATIO_BINS - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioHistogram {
    /// `RATIO_BINS + 1` edges on `[0, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub per_layer: Vec<(String, Vec<usize>)>,
}

impl RatioHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,bin_lo,bin_hi,count\n");
        let mut rows = vec![("all".to_string(), &self.counts)];
        rows.extend(self.per_layer.iter().map(|(n, c)| (n.clone(), c)));
        for (name, counts) in rows {
            for (b, c) in counts.iter().enumerate() {
                s.push_str(&format!("{name},{},{},{c}\n", self.edges[b], self.edges[b + 1]));
            }
        }
        s
    }
}

/// Histogram of `|r|` over every output-channel filter of every effective
/// conv kernel.
pub fn ratio_histogram(model: &Model) -> Result<RatioHistogram> {
    let kernels = model.effective_kernels()?;
    if kernels.is_empty() {
        return Err(config_err!("model has no conv layers"));
    }
    let mut counts = vec![0; RATIO_BINS];
    let mut per_layer = Vec::new();
    for (name, k) in model.conv_names().into_iter().zip(&kernels) {
        let mut layer = vec![0; RATIO_BINS];
        for f in filters_of(k) {
            let b = ratio_bin(f.positive_weight_ratio().r);
            layer[b] += 1;
            counts[b] += 1;
        }
        per_layer.push((name, layer));
    }
    Ok(RatioHistogram {
        edges: (0..=RATIO_BINS).map(|i| i as f64 / RATIO_BINS as f64).collect(),
        counts,
        per_layer,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Response {
    MeanAbs,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterError {
    pub filter: usize,
    pub abs_ratio: f64,
    pub misclassified: f64,
}

/// For each first-layer filter: its `|r|` and the error rate of the full
/// model on the `k` images that excite it most. Sorted by `|r|`.
pub fn filter_error_analysis(model: &Model, set: &Dataset, k: usize, response: Response) -> Result<Vec<FilterError>> {
    if k == 0 || k > set.len() {
        return Err(config_err!("top-k of {k} needs 1..={} images", set.len()));
    }
    let kernel = model
        .effective_kernels()?
        .into_iter()
        .next()
        .ok_or_else(|| config_err!("model has no conv layers"))?;
    let filters = kernel.shape()[0];
    let preds = predict(model, set, EVAL_BATCH)?;
    let mut scores = vec![Vec::with_capacity(set.len()); filters];
    let mut start = 0;
    while start < set.len() {
        let end = (start + EVAL_BATCH).min(set.len());
        let idx: Vec<usize> = (start..end).collect();
        let mut tape = Tape::new();
        let x = tape.constant(set.images.select_outer(&idx)?);
        let fwd = model.forward_eval(&mut tape, x)?;
        let maps = tape.value(fwd.conv_outputs[0]);
        let plane = maps.shape()[2] * maps.shape()[3];
        for n in 0..idx.len() {
            for (f, s) in scores.iter_mut().enumerate() {
                let m = &maps.data()[(n * filters + f) * plane..(n * filters + f + 1) * plane];
                s.push(match response {
                    Response::MeanAbs => m.iter().map(|v| v.abs()).sum::<f64>() / plane as f64,
                    Response::Max => m.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                });
            }
        }
        start = end;
    }
    let mut rows: Vec<FilterError> = filters_of(&kernel)
        .iter()
        .enumerate()
        .map(|(f, filt)| {
            let mut order: Vec<usize> = (0..set.len()).collect();
            order.sort_by(|&a, &b| scores[f][b].total_cmp(&scores[f][a]).then(a.cmp(&b)));
            let wrong = order[..k].iter().filter(|&&i| preds[i] != set.labels[i]).count();
            FilterError {
                filter: f,
                abs_ratio: filt.positive_weight_ratio().r.abs(),
                misclassified: wrong as f64 / k as f64,
            }
        })
        .collect();
    rows.sort_by(|a, b| a.abs_ratio.total_cmp(&b.abs_ratio).then(a.filter.cmp(&b.filter)));
    if let Some(rho) = spearman(
        &rows.iter().map(|r| r.abs_ratio).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.misclassified).collect::<Vec<_>>(),
    ) {
        info!("spearman(|r|, misclassified) over {filters} filters: {rho:.4}");
    }
    Ok(rows)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Rank correlation with average ranks for ties; `None` when either side is
/// constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&ranks(a), &ranks(b))
}

/// Pearson correlation matrix of the given maps. Pairs involving a
/// zero-variance map get 0 and are counted in the second return value.
pub fn correlation_matrix(maps: &[Vec<f64>]) -> (Vec<Vec<f64>>, usize) {
    let n = maps.len();
    let mut m = vec![vec![0.0; n]; n];
    let mut flagged = 0;
    for i in 0..n {
        m[i][i] = 1.0;
        for j in i + 1..n {
            let c = match pearson(&maps[i], &maps[j]) {
                Some(c) => c,
                None => {
                    flagged += 1;
                    0.0
                }
            };
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    (m, flagged)
}

/// Input-space guided-backprop map of every filter of conv layer `layer`
/// for one image `C×H×W`: the summed post-relu activation of that filter
/// pulled back with negative gradients zeroed at every relu.
pub fn guided_backprop_maps(model: &Model, layer: usize, image: &Tensor) -> Result<Vec<Vec<f64>>> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let x = image.clone().reshape(shape)?.with_requires_grad(true);
    let mut tape = Tape::new();
    let vx = tape.leaf(&x);
    let fwd = model.forward_eval(&mut tape, vx)?;
    let act = *fwd
        .activations
        .get(layer)
        .ok_or_else(|| config_err!("layer {layer} out of range ({} conv layers)", fwd.activations.len()))?;
    let s = tape.shape(act).to_vec();
    let (filters, plane) = (s[1], s[2] * s[3]);
    let mut maps = Vec::with_capacity(filters);
    for f in 0..filters {
        let mut seed = vec![0.0; filters * plane];
        seed[f * plane..(f + 1) * plane].iter_mut().for_each(|v| *v = 1.0);
        let grads = tape.vjp(act, &seed, BackwardMode::Guided)?;
        maps.push(grads[vx.index()].clone().unwrap_or_else(|| vec![0.0; x.numel()]));
    }
    Ok(maps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// `SIMILARITY_BINS + 1` edges on `[-1, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Mean of the off-diagonal entries of the averaged matrix.
    pub mean: f64,
    /// Correlation matrix averaged over images.
    pub matrix: Vec<Vec<f64>>,
    /// Number of (image, pair) correlations involving a zero-variance map.
    pub flagged: usize,
}

pub fn guided_backprop_similarity(model: &Model, layer: usize, images: &Tensor) -> Result<SimilarityReport> {
    if images.ndim() != 4 {
        return Err(Error::Shape(format!("images must be NxCxHxW, got {:?}", images.shape())));
    }
    let n = images.shape()[0];
    let mut sum: Option<Vec<Vec<f64>>> = None;
    let mut flagged = 0;
    for i in 0..n {
        let img = Tensor::new(images.shape()[1..].to_vec(), images.slice_outer(i).to_vec())?;
        let maps = guided_backprop_maps(model, layer, &img)?;
        if maps.len() < 2 {
            return Err(config_err!("layer {layer} has fewer than 2 filters"));
        }
        let (m, f) = correlation_matrix(&maps);
        flagged += f;
        match sum.as_mut() {
            None => sum = Some(m),
            Some(acc) => acc.iter_mut().flatten().zip(m.iter().flatten()).for_each(|(a, b)| *a += b),
        }
    }
    let mut matrix = sum.ok_or_else(|| config_err!("need at least one image"))?;
    matrix.iter_mut().flatten().for_each(|v| *v /= n as f64);
    let mut counts = vec![0; SIMILARITY_BINS];
    let (mut total, mut pairs) = (0.0, 0usize);
    for (i, row) in matrix.iter().enumerate() {
        for &c in &row[i + 1..] {
            let b = (((c + 1.0) / 2.0 * SIMILARITY_BINS as f64) as usize).min(SIMILARITY_BINS - 1);
            counts[b] += 1;
            total += c;
            pairs += 1;
        }
    }
    Ok(SimilarityReport {
        edges: (0..=SIMILARITY_BINS).map(|i| -1.0 + 2.0 * i as f64 / SIMILARITY_BINS as f64).collect(),
        counts,
        mean: total / pairs as f64,
        matrix,
        flagged,
    })
}
