//! Labelled image sets: CIFAR-10 binary batches, PNG directories with a
//! labels CSV, raw float dumps, and a seeded procedural-shapes generator.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::autodiff::Checkpoint;
use crate::error::{config_err, shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Environment variable naming the default data root.
pub const DATA_DIR_ENV: &str = "ATMOSCONV_DATA_DIR";

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_RECORD: usize = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N×C×H×W`, nominally in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(shape_err!("images must be NxCxHxW, got {:?}", images.shape()));
        }
        if images.shape()[0] != labels.len() {
            return Err(shape_err!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(config_err!("label {bad} out of range for {classes} classes"));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[3]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.slice_outer(i)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let images = self.images.select_outer(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(images, labels, self.classes)
    }

    /// Same labels and order with replacement images.
    pub fn with_images(&self, images: Tensor) -> Result<Self> {
        if images.shape() != self.images.shape() {
            return Err(shape_err!(
                "replacement images {:?} differ from {:?}",
                images.shape(),
                self.images.shape()
            ));
        }
        Self::new(images, self.labels.clone(), self.classes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Splits off the last `n` samples.
    pub fn split_tail(&self, n: usize) -> Result<(Self, Self)> {
        if n == 0 || n >= self.len() {
            return Err(config_err!("cannot split {n} samples off a set of {}", self.len()));
        }
        let head: Vec<usize> = (0..self.len() - n).collect();
        let tail: Vec<usize> = (self.len() - n..self.len()).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }

    /// Raw little-endian float dump (checkpoint container).
    pub fn save_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut config = BTreeMap::new();
        config.insert("kind".into(), "dataset".into());
        config.insert("classes".into(), self.classes.to_string());
        let labels = Tensor::from_vec(self.labels.iter().map(|&l| l as f64).collect());
        Checkpoint {
            config,
            tensors: vec![("images".into(), self.images.clone()), ("labels".into(), labels)],
        }
        .save(path)
    }

    pub fn load_raw(path: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::load(path.as_ref())?;
        if ck.config.get("kind").map(String::as_str) != Some("dataset") {
            return Err(Error::Format(format!("{} is not a dataset dump", path.as_ref().display())));
        }
        let classes = ck
            .config
            .get("classes")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| Error::Format("dataset dump without class count".into()))?;
        let images = ck.get("images").ok_or_else(|| Error::Format("missing images".into()))?;
        let labels = ck.get("labels").ok_or_else(|| Error::Format("missing labels".into()))?;
        let labels = labels.data().iter().map(|&l| l as usize).collect();
        Self::new(images.clone(), labels, classes)
    }
}

/// Maps a float in nominal `[0, 1]` to a byte, clamping out-of-range values.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn parse_cifar(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "CIFAR batch length {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let images = Tensor::new(vec![n, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE], data)?;
    Dataset::new(images, labels, CIFAR_CLASSES)
}

pub fn read_cifar_batch(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Reads the five training batches and the test batch of a CIFAR-10 binary
/// directory.
pub fn load_cifar_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let mut train: Option<Dataset> = None;
    for i in 1..=5 {
        let part = read_cifar_batch(dir.join(format!("data_batch_{i}.bin")))?;
        train = Some(match train {
            None => part,
            Some(acc) => concat(&acc, &part)?,
        });
    }
    let test = read_cifar_batch(dir.join("test_batch.bin"))?;
    Ok((train.expect("five batches"), test))
}

pub fn write_cifar_batch(set: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    if set.channels() != CIFAR_CHANNELS || set.height() != CIFAR_SIDE || set.width() != CIFAR_SIDE {
        return Err(shape_err!("CIFAR records need 3x32x32 images, got {:?}", set.images.shape()));
    }
    let mut bytes = Vec::with_capacity(set.len() * CIFAR_RECORD);
    for i in 0..set.len() {
        bytes.push(u8::try_from(set.labels[i]).map_err(|_| config_err!("label does not fit a byte"))?);
        bytes.extend(set.image(i).iter().map(|&v| to_u8(v)));
    }
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn concat(a: &Dataset, b: &Dataset) -> Result<Dataset> {
    if a.images.shape()[1..] != b.images.shape()[1..] || a.classes != b.classes {
        return Err(shape_err!("cannot concatenate {:?} and {:?}", a.images.shape(), b.images.shape()));
    }
    let mut data = a.images.data().to_vec();
    data.extend_from_slice(b.images.data());
    let mut shape = a.images.shape().to_vec();
    shape[0] += b.len();
    let mut labels = a.labels.clone();
    labels.extend_from_slice(&b.labels);
    Dataset::new(Tensor::new(shape, data)?, labels, a.classes)
}

pub const LABELS_FILE: &str = "labels.csv";

/// Reads `labels.csv` (`filename,label`, optional header) and the PNG files
/// it names. All images must share extents and channel count.
pub fn read_png_dir(dir: impl AsRef<Path>, classes: Option<usize>) -> Result<(Dataset, Vec<String>)> {
    let dir = dir.as_ref();
    let csv_path = dir.join(LABELS_FILE);
    let csv = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut names = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in csv.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (name, label) = line
            .rsplit_once(',')
            .ok_or_else(|| Error::Format(format!("{}:{}: expected filename,label", csv_path.display(), lineno + 1)))?;
        match label.trim().parse::<usize>() {
            Ok(l) => {
                names.push(name.trim().to_string());
                labels.push(l);
            }
            Err(_) if lineno == 0 => continue,
            Err(_) => {
                return Err(Error::Format(format!(
                    "{}:{}: bad label {label:?}",
                    csv_path.display(),
                    lineno + 1
                )))
            }
        }
    }
    if names.is_empty() {
        return Err(Error::Format(format!("{} lists no images", csv_path.display())));
    }
    let mut shape: Option<(usize, usize, usize)> = None;
    let mut data = Vec::new();
    for name in &names {
        let (c, h, w, pixels) = read_png(dir.join(name))?;
        match shape {
            None => shape = Some((c, h, w)),
            Some(s) if s != (c, h, w) => {
                return Err(shape_err!("{name} is {c}x{h}x{w}, expected {s:?}"));
            }
            _ => {}
        }
        data.extend(pixels);
    }
    let (c, h, w) = shape.expect("at least one image");
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    let images = Tensor::new(vec![names.len(), c, h, w], data)?;
    Ok((Dataset::new(images, labels, classes)?, names))
}

/// Decodes an 8-bit PNG into planar `C×H×W` floats in `[0, 1]`; alpha is
/// dropped.
pub fn read_png(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<f64>)> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (stored, kept) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(Error::Format(format!("{}: unsupported color type {other:?}", path.display()))),
    };
    let bytes = &buf[..info.buffer_size()];
    let mut planar = vec![0.0; kept * h * w];
    for (p, px) in bytes.chunks_exact(stored).enumerate() {
        for c in 0..kept {
            planar[c * h * w + p] = px[c] as f64 / 255.0;
        }
    }
    Ok((kept, h, w, planar))
}

/// Encodes planar `C×H×W` floats (C = 1 or 3) as an 8-bit PNG, clamping to
/// `[0, 1]`.
pub fn write_png(path: impl AsRef<Path>, channels: usize, h: usize, w: usize, planar: &[f64]) -> Result<()> {
    let color = match channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(shape_err!("PNG output needs 1 or 3 channels, got {channels}")),
    };
    let mut interleaved = vec![0u8; channels * h * w];
    for p in 0..h * w {
        for c in 0..channels {
            interleaved[p * channels + c] = to_u8(planar[c * h * w + p]);
        }
    }
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let fmt_err = |e: png::EncodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(fmt_err)?;
    writer.write_image_data(&interleaved).map_err(fmt_err)?;
    writer.finish().map_err(fmt_err)
}

/// Writes every image as `NNNNNN.png` plus `labels.csv`.
pub fn write_png_dir(set: &Dataset, dir: impl AsRef<Path>, names: Option<&[String]>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(LABELS_FILE);
    let mut csv = BufWriter::new(fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?);
    writeln!(csv, "filename,label").map_err(|e| Error::io(&csv_path, e))?;
    for i in 0..set.len() {
        let name = names.map_or_else(|| format!("{i:06}.png"), |n| n[i].clone());
        write_png(dir.join(&name), set.channels(), set.height(), set.width(), set.image(i))?;
        writeln!(csv, "{name},{}", set.labels[i]).map_err(|e| Error::io(&csv_path, e))?;
    }
    csv.flush().map_err(|e| Error::io(&csv_path, e))
}

/// Where a set came from on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SetFormat {
    Cifar,
    PngDir,
    Raw,
}

/// Loads a set from a CIFAR batch file, a raw float dump, or a PNG
/// directory, deciding by the path.
pub fn load_any(path: impl AsRef<Path>) -> Result<(Dataset, SetFormat)> {
    let path = path.as_ref();
    if path.is_dir() {
        if path.join(LABELS_FILE).exists() {
            return Ok((read_png_dir(path, None)?.0, SetFormat::PngDir));
        }
        return Err(config_err!("{} has no {LABELS_FILE}", path.display()));
    }
    let mut magic = [0u8; 1];
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    f.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if magic[0] == b'{' {
        Ok((Dataset::load_raw(path)?, SetFormat::Raw))
    } else {
        Ok((read_cifar_batch(path)?, SetFormat::Cifar))
    }
}

/// Resolves a set specification: `synthetic:<n>[:<side>[:<seed>]]`,
/// `cifar-train:<dir>` / `cifar-test:<dir>` (a CIFAR-10 binary directory;
/// an empty dir falls back to the data-root environment variable), or any
/// path accepted by [`load_any`].
pub fn load_source(spec: &str) -> Result<Dataset> {
    if let Some(rest) = spec.strip_prefix("synthetic:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let num = |i: usize, default: u64| -> Result<u64> {
            match parts.get(i) {
                None => Ok(default),
                Some(p) => p.parse().map_err(|_| config_err!("bad synthetic spec '{spec}'")),
            }
        };
        return synthetic_shapes(num(0, 0)? as usize, num(1, 16)? as usize, num(2, 0)?);
    }
    for (prefix, train) in [("cifar-train:", true), ("cifar-test:", false)] {
        if let Some(dir) = spec.strip_prefix(prefix) {
            let dir = if dir.is_empty() {
                default_data_dir().ok_or_else(|| config_err!("{DATA_DIR_ENV} is not set"))?
            } else {
                PathBuf::from(dir)
            };
            return if train {
                Ok(load_cifar_dir(&dir)?.0)
            } else {
                read_cifar_batch(dir.join("test_batch.bin"))
            };
        }
    }
    Ok(load_any(spec)?.0)
}

pub fn default_data_dir() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)
}

pub const SYNTHETIC_CLASSES: usize = 10;

/// Names of the procedural shape classes, indexed by label.
pub const SHAPE_NAMES: [&str; SYNTHETIC_CLASSES] = [
    "disk",
    "square",
    "triangle",
    "ring",
    "plus",
    "horizontal_bars",
    "vertical_bars",
    "diagonal",
    "frame",
    "two_dots",
];

/// Seeded 10-class procedural shapes, three channels, `side×side` pixels.
///
/// Labels cycle `0, 1, ..., 9, 0, ...`. Each image draws its own background
/// level, foreground contrast and sign, color tint, position and size jitter,
/// and pixel noise, from a stream keyed by `(seed, index)`.
pub fn synthetic_shapes(n: usize, side: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || side < 8 {
        return Err(config_err!("synthetic set needs n > 0 and side >= 8, got {n} and {side}"));
    }
    let plane = side * side;
    let mut data = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % SYNTHETIC_CLASSES;
        let mut rng = Rng::for_item(seed, 0x5348_4150, i as u64);
        let bg = rng.uniform_in(0.15, 0.85);
        let contrast = rng.uniform_in(0.15, 0.45);
        let fg = if (bg > 0.5) ^ (rng.uniform() < 0.2) { bg - contrast } else { bg + contrast };
        let tint: [f64; 3] = [rng.uniform_in(0.85, 1.15), rng.uniform_in(0.85, 1.15), rng.uniform_in(0.85, 1.15)];
        let s = side as f64;
        let cy = s / 2.0 + rng.uniform_in(-s / 10.0, s / 10.0);
        let cx = s / 2.0 + rng.uniform_in(-s / 10.0, s / 10.0);
        let r = s * rng.uniform_in(0.22, 0.32);
        let mut mask = vec![0.0; plane];
        for (p, m) in mask.iter_mut().enumerate() {
            let y = (p / side) as f64 + 0.5 - cy;
            let x = (p % side) as f64 + 0.5 - cx;
            *m = if shape_contains(label, y / r, x / r, r) { 1.0 } else { 0.0 };
        }
        for t in tint {
            for &m in &mask {
                let v = (bg + (fg - bg) * m) * t + 0.03 * rng.normal();
                data.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![n, 3, side, side], data)?, labels, SYNTHETIC_CLASSES)
}

/// Membership test in shape-normalized coordinates (unit ≈ shape radius).
fn shape_contains(label: usize, y: f64, x: f64, radius_px: f64) -> bool {
    let stroke = (1.2 / radius_px).max(0.22);
    let d = y.hypot(x);
    match label {
        0 => d <= 1.0,
        1 => y.abs() <= 0.85 && x.abs() <= 0.85,
        2 => y <= 0.8 && y >= -1.0 + 1.8 * x.abs(),
        3 => (d - 0.8).abs() <= stroke,
        4 => (y.abs() <= stroke && x.abs() <= 1.0) || (x.abs() <= stroke && y.abs() <= 1.0),
        5 => y.abs() <= 1.0 && x.abs() <= 1.0 && ((y + 1.0) / 0.5).floor() as i64 % 2 == 0,
        6 => y.abs() <= 1.0 && x.abs() <= 1.0 && ((x + 1.0) / 0.5).floor() as i64 % 2 == 0,
        7 => (y - x).abs() <= stroke * 1.4 && d <= 1.1,
        8 => {
            let m = y.abs().max(x.abs());
            m <= 0.95 && m >= 0.95 - stroke * 1.3
        }
        9 => (y.hypot(x - 0.6) <= 0.38) || (y.hypot(x + 0.6) <= 0.38),
        _ => unreachable!("ten classes"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_record_layout() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 7;
        bytes[1] = 255; // red plane, pixel 0
        bytes[1 + 1024] = 51; // green plane, pixel 0
        bytes[CIFAR_RECORD] = 2;
        let set = parse_cifar(&bytes).unwrap();
        assert_eq!(set.labels, vec![7, 2]);
        assert_eq!(set.images.shape(), &[2, 3, 32, 32]);
        assert_eq!(set.image(0)[0], 1.0);
        assert_eq!(set.image(0)[1024], 0.2);
        assert!(parse_cifar(&bytes[..100]).is_err());
    }

    #[test]
    fn byte_encoding_clamps() {
        assert_eq!(to_u8(-0.2), 0);
        assert_eq!(to_u8(1.7), 255);
        assert_eq!(to_u8(0.5), 128);
    }

    #[test]
    fn synthetic_set_is_balanced_and_seeded() {
        let a = synthetic_shapes(40, 16, 3).unwrap();
        assert_eq!(a.class_counts(), vec![4; 10]);
        assert_eq!(a, synthetic_shapes(40, 16, 3).unwrap());
        assert_ne!(a.images, synthetic_shapes(40, 16, 4).unwrap().images);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn dataset_validation() {
        let imgs = Tensor::zeros(vec![2, 1, 2, 2]);
        assert!(Dataset::new(imgs.clone(), vec![0], 2).is_err());
        assert!(Dataset::new(imgs.clone(), vec![0, 2], 2).is_err());
        assert!(Dataset::new(imgs, vec![0, 1], 2).is_ok());
    }
}
