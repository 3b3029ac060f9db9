//! Classical Gaussian and difference-of-Gaussians kernels and the
//! checkerboard illumination demo.

use crate::autodiff::Tape;
use crate::error::{config_err, Result};
use crate::filter::FilterKernel;
use crate::tensor::Tensor;

/// Base intensities of the dark and light tiles.
pub const DARK_TILE: f64 = 0.25;
pub const LIGHT_TILE: f64 = 0.75;

/// Half-width, in pixels, of the band around internal tile boundaries that
/// counts as edge region.
pub const EDGE_BAND: usize = 2;

pub const DEFAULT_SIGMA_INNER: f64 = 1.0;
pub const DEFAULT_SIGMA_OUTER: f64 = 2.0;

/// Sampled 2-D Gaussian on integer offsets, rescaled to sum to 1.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Result<FilterKernel> {
    if size < 3 || size.is_multiple_of(2) {
        return Err(config_err!("gaussian kernel size must be odd and >= 3, got {size}"));
    }
    if !(sigma > 0.0) {
        return Err(config_err!("gaussian sigma must be positive, got {sigma}"));
    }
    let half = (size / 2) as isize;
    let denom = 2.0 * sigma * sigma;
    let mut w = Vec::with_capacity(size * size);
    for y in -half..=half {
        for x in -half..=half {
            let r2 = (y * y) as f64 + (x * x) as f64;
            w.push((-r2 / denom).exp());
        }
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok(FilterKernel::new(Tensor::new(vec![size, size], w)?))
}

/// Difference of two sampled Gaussians, center positive.
///
/// With `normalized` each part is rescaled to unit L1 norm (a differencing
/// filter). Otherwise the positive part sums to 2 and the negative part to 1,
/// the blur-contaminated configuration.
pub fn dog_kernel(sigma_inner: f64, sigma_outer: f64, size: usize, normalized: bool) -> Result<FilterKernel> {
    if !(sigma_inner > 0.0 && sigma_inner < sigma_outer) {
        return Err(config_err!(
            "need 0 < sigma_inner < sigma_outer, got {sigma_inner} and {sigma_outer}"
        ));
    }
    let inner = gaussian_kernel(sigma_inner, size)?;
    let outer = gaussian_kernel(sigma_outer, size)?;
    let diff: Vec<f64> = inner
        .weights()
        .data()
        .iter()
        .zip(outer.weights().data())
        .map(|(a, b)| a - b)
        .collect();
    let (plus, minus) = crate::filter::part_norms(&diff);
    let (plus_target, minus_target) = if normalized { (1.0, 1.0) } else { (2.0, 1.0) };
    let w = diff
        .iter()
        .map(|&v| {
            if v > 0.0 {
                v * plus_target / plus
            } else {
                v * minus_target / minus
            }
        })
        .collect();
    Ok(FilterKernel::new(Tensor::new(vec![size, size], w)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Illumination {
    Uniform,
    /// Gain rising linearly from `lo` to `hi` along `angle` (radians, 0
    /// points towards increasing column index).
    LinearRamp { lo: f64, hi: f64, angle: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub tiles: usize,
    pub tile_px: usize,
    pub illumination: Illumination,
}

impl SceneSpec {
    pub fn side(&self) -> usize {
        self.tiles * self.tile_px
    }

    fn validate(&self) -> Result<()> {
        if self.tiles == 0 || self.tile_px == 0 {
            return Err(config_err!("tiles and tile_px must be positive"));
        }
        if let Illumination::LinearRamp { lo, hi, .. } = self.illumination {
            if lo > hi {
                return Err(config_err!("ramp needs lo <= hi, got {lo} > {hi}"));
            }
        }
        Ok(())
    }
}

/// Position of each pixel along `angle`, affinely mapped so the smallest
/// projection is 0 and the largest is 1. Constant fields map to 0.
pub fn ramp_coordinate(h: usize, w: usize, angle: f64) -> Vec<f64> {
    let (dx, dy) = (angle.cos(), angle.sin());
    let proj: Vec<f64> = (0..h)
        .flat_map(|y| (0..w).map(move |x| x as f64 * dx + y as f64 * dy))
        .collect();
    let lo = proj.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    proj.into_iter()
        .map(|p| if span > 0.0 { ((p - lo) / span).clamp(0.0, 1.0) } else { 0.0 })
        .collect()
}

/// Single-channel `1×1×H×W` checkerboard lit by `spec.illumination`.
pub fn checkerboard_scene(spec: &SceneSpec) -> Result<Tensor> {
    spec.validate()?;
    let side = spec.side();
    let gain: Vec<f64> = match spec.illumination {
        Illumination::Uniform => vec![1.0; side * side],
        Illumination::LinearRamp { lo, hi, angle } => ramp_coordinate(side, side, angle)
            .into_iter()
            .map(|t| lo + (hi - lo) * t)
            .collect(),
    };
    let data = (0..side * side)
        .map(|i| {
            let (y, x) = (i / side, i % side);
            let light = (y / spec.tile_px + x / spec.tile_px) % 2 == 1;
            gain[i] * if light { LIGHT_TILE } else { DARK_TILE }
        })
        .collect();
    Tensor::new(vec![1, 1, side, side], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoResponse {
    /// Mean |response| over tile interiors.
    pub flat_bias: f64,
    /// Mean |response| within [`EDGE_BAND`] pixels of internal tile
    /// boundaries.
    pub edge_mag: f64,
    /// Response along the center row.
    pub profile: Vec<f64>,
    /// Full response map, same size as the image.
    pub response: Tensor,
}

impl DemoResponse {
    pub fn bias_ratio(&self) -> f64 {
        self.flat_bias / self.edge_mag
    }
}

/// Same-size convolution of a `1×1×H×W` image with a square odd kernel.
pub fn filter_image(image: &Tensor, kernel: &FilterKernel) -> Result<Tensor> {
    let size = kernel.weights().shape()[0];
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let k = tape.constant(kernel.weights().clone().reshape(vec![1, 1, size, size])?);
    let y = tape.conv2d(x, k, 1, size / 2)?;
    Ok(tape.value(y).clone())
}

/// Filters a checkerboard image and summarizes the response in flat tile
/// interiors and along tile edges.
///
/// Pixels within `⌈size/2⌉` of a tile edge are excluded from interiors, and
/// pixels within `⌈size/2⌉` of the image border are excluded from both
/// regions, so neither sees zero padding.
pub fn demo_response_analysis(image: &Tensor, kernel: &FilterKernel, tile_px: usize) -> Result<DemoResponse> {
    let ks = kernel.weights().shape();
    if ks.len() != 2 || ks[0] != ks[1] || ks[0].is_multiple_of(2) {
        return Err(config_err!("demo kernel must be square with odd size, got {ks:?}"));
    }
    let size = ks[0];
    if size > tile_px {
        return Err(config_err!("kernel size {size} exceeds tile size {tile_px}"));
    }
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 1 {
        return Err(config_err!("demo image must be 1x1xHxW, got {s:?}"));
    }
    let (h, w) = (s[2], s[3]);
    let margin = size.div_ceil(2);
    let response = filter_image(image, kernel)?;
    let r = response.data();

    let dist_to_boundary = |p: usize, extent: usize| -> (usize, usize) {
        // distance to the nearest tile edge (any), and to the nearest internal
        // boundary, measured from the pixel's near side
        let off = p % tile_px;
        let any = off.min(tile_px - 1 - off);
        let mut internal = usize::MAX;
        for b in (tile_px..extent).step_by(tile_px) {
            let d = if p < b { b - 1 - p } else { p - b };
            internal = internal.min(d);
        }
        (any, internal)
    };

    let (mut flat_sum, mut flat_n, mut edge_sum, mut edge_n) = (0.0, 0usize, 0.0, 0usize);
    for y in margin..h.saturating_sub(margin) {
        let (ay, iy) = dist_to_boundary(y, h);
        for x in margin..w.saturating_sub(margin) {
            let (ax, ix) = dist_to_boundary(x, w);
            let v = r[y * w + x].abs();
            if ay >= margin && ax >= margin {
                flat_sum += v;
                flat_n += 1;
            } else if iy < EDGE_BAND || ix < EDGE_BAND {
                edge_sum += v;
                edge_n += 1;
            }
        }
    }
    if flat_n == 0 || edge_n == 0 {
        return Err(config_err!(
            "tile size {tile_px} leaves no interior for a {size}x{size} kernel"
        ));
    }
    let row = h / 2;
    Ok(DemoResponse {
        flat_bias: flat_sum / flat_n as f64,
        edge_mag: edge_sum / edge_n as f64,
        profile: r[row * w..(row + 1) * w].to_vec(),
        response,
    })
}

/// Column index `i` maximizing `|profile[i+1] - profile[i]|` within each
/// tile-sized window centred on an internal vertical boundary.
pub fn edge_columns(profile: &[f64], tile_px: usize) -> Vec<usize> {
    let w = profile.len();
    let half = tile_px / 2;
    (tile_px..w)
        .step_by(tile_px)
        .map(|b| {
            let lo = b.saturating_sub(half);
            let hi = (b + half).min(w - 1);
            (lo..hi)
                .max_by(|&i, &j| {
                    let di = (profile[i + 1] - profile[i]).abs();
                    let dj = (profile[j + 1] - profile[j]).abs();
                    di.partial_cmp(&dj).expect("finite profile").then(j.cmp(&i))
                })
                .expect("non-empty window")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_delta_limit_and_normalization() {
        let g = gaussian_kernel(0.1, 3).unwrap();
        let d = g.weights().data();
        assert!((d[4] - 1.0).abs() < 1e-12);
        assert!(d.iter().enumerate().all(|(i, &v)| i == 4 || v < 1e-12));
        for (sigma, size) in [(0.5, 3), (1.0, 5), (2.0, 13), (3.3, 7)] {
            let g = gaussian_kernel(sigma, size).unwrap();
            assert!((g.weights().sum() - 1.0).abs() < 1e-12);
            assert_eq!(g.positive_weight_ratio().r, 1.0);
        }
    }

    #[test]
    fn gaussian_rotation_symmetry_is_exact() {
        let g = gaussian_kernel(1.0, 5).unwrap();
        let d = g.weights().data();
        for y in 0..5 {
            for x in 0..5 {
                // 90 degree rotation: (y, x) -> (x, 4 - y)
                assert_eq!(d[y * 5 + x].to_bits(), d[x * 5 + (4 - y)].to_bits());
            }
        }
    }

    #[test]
    fn gaussian_rejects_even_size() {
        assert!(gaussian_kernel(1.0, 4).is_err());
        assert!(gaussian_kernel(1.0, 1).is_err());
    }

    #[test]
    fn dog_ratios() {
        let n = dog_kernel(1.0, 2.0, 13, true).unwrap();
        assert!(n.positive_weight_ratio().r.abs() < 1e-12);
        let u = dog_kernel(1.0, 2.0, 13, false).unwrap();
        assert!((u.positive_weight_ratio().r - 1.0 / 3.0).abs() < 1e-12);
        assert!(dog_kernel(2.0, 1.0, 13, true).is_err());
        assert!(dog_kernel(1.0, 1.0, 13, true).is_err());
    }

    #[test]
    fn scene_construction() {
        let uniform = SceneSpec {
            tiles: 8,
            tile_px: 16,
            illumination: Illumination::Uniform,
        };
        let img = checkerboard_scene(&uniform).unwrap();
        assert_eq!(img.shape(), &[1, 1, 128, 128]);
        let mut vals: Vec<u64> = img.data().iter().map(|v| v.to_bits()).collect();
        vals.sort_unstable();
        vals.dedup();
        assert_eq!(vals.len(), 2);

        let ramp = SceneSpec {
            illumination: Illumination::LinearRamp { lo: 0.5, hi: 1.5, angle: 0.0 },
            ..uniform
        };
        let img = checkerboard_scene(&ramp).unwrap();
        let col_mean = |c: usize| (0..128).map(|y| img.data()[y * 128 + c]).sum::<f64>() / 128.0;
        assert!(col_mean(0) < col_mean(127));
        let bad = SceneSpec {
            illumination: Illumination::LinearRamp { lo: 1.5, hi: 0.5, angle: 0.0 },
            ..uniform
        };
        assert!(checkerboard_scene(&bad).is_err());
    }

    #[test]
    fn constant_image_gives_zero_response_for_normalized_dog() {
        let img = Tensor::full(vec![1, 1, 64, 64], 0.6);
        let k = dog_kernel(1.0, 2.0, 13, true).unwrap();
        let d = demo_response_analysis(&img, &k, 32).unwrap();
        assert!(d.flat_bias.abs() < 1e-10 && d.edge_mag.abs() < 1e-10);
    }

    #[test]
    fn kernel_larger_than_tile_is_rejected() {
        let img = Tensor::full(vec![1, 1, 64, 64], 0.6);
        let k = dog_kernel(1.0, 2.0, 13, true).unwrap();
        assert!(demo_response_analysis(&img, &k, 8).is_err());
    }
}
