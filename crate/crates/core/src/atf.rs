//! Affine illumination ("atmospheric transfer") corruptions.
//!
//! An image `x` becomes `gain ⊙ x + bias`, with gain and bias fields that are
//! constant (`C`), linear ramps sharing one direction (`L`), cubic-decay blobs
//! (`B`), or constant with a strong fixed extra offset and saturation (`S`).
//! Each image's field is drawn from its own RNG stream keyed by
//! `(seed, variant, index)`, and the drawn scalars are kept in a
//! [`CorruptionManifest`] so the set can be rebuilt without the generator.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classic::ramp_coordinate;
use crate::error::{config_err, shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Half-widths of the gain and bias intervals at severity 1.
pub const CONSTANT_GAIN_SPREAD: f64 = 0.3;
pub const CONSTANT_BIAS_SPREAD: f64 = 0.3;
pub const FIELD_GAIN_SPREAD: f64 = 0.5;
pub const FIELD_BIAS_SPREAD: f64 = 0.5;
/// Extra offset of the shifted variant at severity 1.
pub const SHIFT_GAMMA: f64 = 1.0;
/// Blob radius as a fraction of the larger image side.
pub const BLOB_RADIUS_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    C,
    L,
    B,
    S,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::C, Variant::L, Variant::B, Variant::S];

    fn stream(self) -> u64 {
        match self {
            Variant::C => 1,
            Variant::L => 2,
            Variant::B => 3,
            Variant::S => 4,
        }
    }

    /// Set name as used in reports, e.g. `D_C`.
    pub fn set_name(self) -> &'static str {
        match self {
            Variant::C => "D_C",
            Variant::L => "D_L",
            Variant::B => "D_B",
            Variant::S => "D_S",
        }
    }

    /// Human-readable sampling ranges at the given severity.
    pub fn describe(self, severity: f64) -> String {
        let (g, b) = match self {
            Variant::C | Variant::S => (CONSTANT_GAIN_SPREAD, CONSTANT_BIAS_SPREAD),
            Variant::L | Variant::B => (FIELD_GAIN_SPREAD, FIELD_BIAS_SPREAD),
        };
        let mut s = format!(
            "alpha ~ Unif({:.3}, {:.3}), beta ~ Unif({:.3}, {:.3})",
            1.0 - g * severity,
            1.0 + g * severity,
            -b * severity,
            b * severity
        );
        match self {
            Variant::C => s.push_str(", constant over the image"),
            Variant::L => s.push_str(", linear fields alpha0..alpha1 and beta0..beta1 along one shared random direction"),
            Variant::B => s.push_str(&format!(
                ", cubic-decay blob of radius {BLOB_RADIUS_FRACTION} x image size at a uniform random center"
            )),
            Variant::S => s.push_str(&format!(", gamma = {:.3}, clamped to [0, 1]", SHIFT_GAMMA * severity)),
        }
        s
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::C => "C",
            Variant::L => "L",
            Variant::B => "B",
            Variant::S => "S",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().trim_start_matches("D_") {
            "C" => Ok(Variant::C),
            "L" => Ok(Variant::L),
            "B" => Ok(Variant::B),
            "S" => Ok(Variant::S),
            _ => Err(config_err!("unknown corruption variant {s:?}; expected C, L, B or S")),
        }
    }
}

/// Scalars drawn for one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldParams {
    Constant {
        alpha: f64,
        beta: f64,
    },
    Linear {
        alpha0: f64,
        alpha1: f64,
        beta0: f64,
        beta1: f64,
        angle: f64,
    },
    Blob {
        center_y: usize,
        center_x: usize,
        alpha: f64,
        beta: f64,
    },
    Shift {
        alpha: f64,
        beta: f64,
        gamma: f64,
    },
}

impl FieldParams {
    /// Samples the scalars of image `index`. `severity` scales every
    /// interval's half-width about its neutral point (gain 1, bias 0).
    pub fn sample(variant: Variant, seed: u64, index: u64, h: usize, w: usize, severity: f64) -> Self {
        let mut rng = Rng::for_item(seed, variant.stream(), index);
        let s = severity;
        match variant {
            Variant::C => {
                let (alpha, beta) = constant_gain_bias(&mut rng, CONSTANT_GAIN_SPREAD * s, CONSTANT_BIAS_SPREAD * s);
                FieldParams::Constant { alpha, beta }
            }
            Variant::L => {
                let g = FIELD_GAIN_SPREAD * s;
                let b = FIELD_BIAS_SPREAD * s;
                let alpha0 = rng.uniform_in(1.0 - g, 1.0 + g);
                let alpha1 = rng.uniform_in(1.0 - g, 1.0 + g);
                let beta0 = rng.uniform_in(-b, b);
                let beta1 = rng.uniform_in(-b, b);
                let angle = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
                FieldParams::Linear {
                    alpha0,
                    alpha1,
                    beta0,
                    beta1,
                    angle,
                }
            }
            Variant::B => {
                let center_y = rng.below(h);
                let center_x = rng.below(w);
                let g = FIELD_GAIN_SPREAD * s;
                let b = FIELD_BIAS_SPREAD * s;
                let alpha = rng.uniform_in(1.0 - g, 1.0 + g);
                let beta = rng.uniform_in(-b, b);
                FieldParams::Blob {
                    center_y,
                    center_x,
                    alpha,
                    beta,
                }
            }
            Variant::S => {
                let (alpha, beta) = constant_gain_bias(&mut rng, CONSTANT_GAIN_SPREAD * s, CONSTANT_BIAS_SPREAD * s);
                FieldParams::Shift {
                    alpha,
                    beta,
                    gamma: SHIFT_GAMMA * s,
                }
            }
        }
    }

    pub fn variant(&self) -> Variant {
        match self {
            FieldParams::Constant { .. } => Variant::C,
            FieldParams::Linear { .. } => Variant::L,
            FieldParams::Blob { .. } => Variant::B,
            FieldParams::Shift { .. } => Variant::S,
        }
    }

    /// Whether the corrupted values are clamped to `[0, 1]`.
    pub fn saturates(&self) -> bool {
        matches!(self, FieldParams::Shift { .. })
    }

    /// Builds the `H×W` gain and bias fields.
    pub fn fields(&self, h: usize, w: usize) -> (Tensor, Tensor) {
        let n = h * w;
        let (gain, bias) = match *self {
            FieldParams::Constant { alpha, beta } => (vec![alpha; n], vec![beta; n]),
            FieldParams::Shift { alpha, beta, gamma } => (vec![alpha; n], vec![beta + gamma; n]),
            FieldParams::Linear {
                alpha0,
                alpha1,
                beta0,
                beta1,
                angle,
            } => {
                let t = ramp_coordinate(h, w, angle);
                (
                    // written as a0 + t·(a1 − a0) so equal endpoints give an exactly flat field
                    t.iter().map(|&t| alpha0 + t * (alpha1 - alpha0)).collect(),
                    t.iter().map(|&t| beta0 + t * (beta1 - beta0)).collect(),
                )
            }
            FieldParams::Blob {
                center_y,
                center_x,
                alpha,
                beta,
            } => {
                let radius = BLOB_RADIUS_FRACTION * h.max(w) as f64;
                let weights: Vec<f64> = (0..n)
                    .map(|i| {
                        let dy = (i / w) as f64 - center_y as f64;
                        let dx = (i % w) as f64 - center_x as f64;
                        blob_weight(dy.hypot(dx) / radius)
                    })
                    .collect();
                (
                    weights.iter().map(|&k| 1.0 + k * (alpha - 1.0)).collect(),
                    weights.iter().map(|&k| beta * k).collect(),
                )
            }
        };
        (
            Tensor::new(vec![h, w], gain).expect("field shape"),
            Tensor::new(vec![h, w], bias).expect("field shape"),
        )
    }
}

/// `clamp(1 − ρ³, 0, 1)`.
pub fn blob_weight(rho: f64) -> f64 {
    (1.0 - rho.powi(3)).clamp(0.0, 1.0)
}

/// Gain and bias drawn from `Unif(1 − gain_spread, 1 + gain_spread)` and
/// `Unif(−bias_spread, bias_spread)`, in that order.
pub fn constant_gain_bias(rng: &mut Rng, gain_spread: f64, bias_spread: f64) -> (f64, f64) {
    let alpha = rng.uniform_in(1.0 - gain_spread, 1.0 + gain_spread);
    let beta = rng.uniform_in(-bias_spread, bias_spread);
    (alpha, beta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtfField {
    pub gain: Tensor,
    pub bias: Tensor,
    pub params: FieldParams,
    pub seed: u64,
    pub index: u64,
}

impl AtfField {
    pub fn generate(variant: Variant, seed: u64, index: u64, h: usize, w: usize, severity: f64) -> Self {
        let params = FieldParams::sample(variant, seed, index, h, w, severity);
        Self::from_params(params, seed, index, h, w)
    }

    pub fn from_params(params: FieldParams, seed: u64, index: u64, h: usize, w: usize) -> Self {
        let (gain, bias) = params.fields(h, w);
        Self {
            gain,
            bias,
            params,
            seed,
            index,
        }
    }

    pub fn height(&self) -> usize {
        self.gain.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.gain.shape()[1]
    }
}

/// `D_C`: one gain and one bias for the whole image.
pub fn gen_constant_field(seed: u64, index: u64, h: usize, w: usize) -> AtfField {
    AtfField::generate(Variant::C, seed, index, h, w, 1.0)
}

/// `D_L`: gain and bias ramps along one shared random direction.
pub fn gen_linear_field(seed: u64, index: u64, h: usize, w: usize) -> AtfField {
    AtfField::generate(Variant::L, seed, index, h, w, 1.0)
}

/// `D_B`: gain and bias blobs with cubic radial decay.
pub fn gen_blob_field(seed: u64, index: u64, h: usize, w: usize) -> AtfField {
    AtfField::generate(Variant::B, seed, index, h, w, 1.0)
}

/// `D_S`: `(α, β, γ)` for `clamp(αx + β + γ, 0, 1)`.
pub fn gen_shift_corruption(seed: u64, index: u64) -> (f64, f64, f64) {
    match FieldParams::sample(Variant::S, seed, index, 1, 1, 1.0) {
        FieldParams::Shift { alpha, beta, gamma } => (alpha, beta, gamma),
        _ => unreachable!("shift variant samples shift params"),
    }
}

/// `gain ⊙ x + bias` on every channel of a `[..., H, W]` image, clamped to
/// `[0, 1]` only for the shifted variant.
pub fn atf_apply(image: &Tensor, field: &AtfField) -> Result<Tensor> {
    let s = image.shape();
    if s.len() < 2 || s[s.len() - 2] != field.height() || s[s.len() - 1] != field.width() {
        return Err(shape_err!(
            "image {s:?} does not match {}x{} field",
            field.height(),
            field.width()
        ));
    }
    let plane = field.height() * field.width();
    let (g, b) = (field.gain.data(), field.bias.data());
    let saturate = field.params.saturates();
    let mut out = image.detach();
    for chunk in out.data_mut().chunks_mut(plane) {
        for ((v, gg), bb) in chunk.iter_mut().zip(g).zip(b) {
            let y = gg * *v + bb;
            *v = if saturate { y.clamp(0.0, 1.0) } else { y };
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionManifest {
    pub variant: Variant,
    pub seed: u64,
    pub severity: f64,
    /// One entry per image, in input order.
    pub records: Vec<FieldParams>,
}

impl CorruptionManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Corrupts every image of an `N×C×H×W` batch. Labels and order are
/// untouched, so only the images are returned.
pub fn corrupt_images(images: &Tensor, variant: Variant, seed: u64, severity: f64) -> Result<(Tensor, CorruptionManifest)> {
    if !(severity >= 0.0) || !severity.is_finite() {
        return Err(config_err!("severity must be a finite non-negative number, got {severity}"));
    }
    let (h, w) = image_hw(images)?;
    let records: Vec<FieldParams> = (0..images.shape()[0])
        .map(|i| FieldParams::sample(variant, seed, i as u64, h, w, severity))
        .collect();
    let manifest = CorruptionManifest {
        variant,
        seed,
        severity,
        records,
    };
    let out = replay_manifest(images, &manifest)?;
    Ok((out, manifest))
}

/// Re-applies recorded fields, without touching any RNG.
pub fn replay_manifest(images: &Tensor, manifest: &CorruptionManifest) -> Result<Tensor> {
    let (h, w) = image_hw(images)?;
    let n = images.shape()[0];
    if manifest.records.len() != n {
        return Err(shape_err!(
            "manifest has {} records for {n} images",
            manifest.records.len()
        ));
    }
    let mut out = images.detach();
    let per_image = images.numel() / n;
    for (i, params) in manifest.records.iter().enumerate() {
        if params.variant() != manifest.variant {
            return Err(Error::Format(format!(
                "record {i} is a {} field in a {} manifest",
                params.variant(),
                manifest.variant
            )));
        }
        let field = AtfField::from_params(*params, manifest.seed, i as u64, h, w);
        let img = Tensor::new(images.shape()[1..].to_vec(), images.slice_outer(i).to_vec())?;
        let corrupted = atf_apply(&img, &field)?;
        out.data_mut()[i * per_image..(i + 1) * per_image].copy_from_slice(corrupted.data());
    }
    Ok(out)
}

fn image_hw(images: &Tensor) -> Result<(usize, usize)> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(shape_err!("expected an NxCxHxW batch, got {s:?}"));
    }
    Ok((s[2], s[3]))
}
