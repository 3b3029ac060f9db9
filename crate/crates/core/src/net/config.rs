use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{config_err, Error, Result};
use crate::filter::DEFAULT_EPS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    TinyCnn,
    MiniResnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    Vanilla,
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormLayer {
    None,
    Batch,
    Instance,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $word),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($word => Ok($ty::$variant),)+
                    other => Err(config_err!(
                        "unknown {} '{other}' (expected one of: {})",
                        stringify!($ty),
                        [$($word),+].join(", ")
                    )),
                }
            }
        }
    };
}

keyword_enum!(Architecture { TinyCnn => "tiny_cnn", MiniResnet => "mini_resnet" });
keyword_enum!(ConvMode { Vanilla => "vanilla", Normalized => "normalized" });
keyword_enum!(NormLayer { None => "none", Batch => "batch", Instance => "instance" });

/// Everything needed to rebuild a model bit-for-bit.
///
/// `depth` counts conv pairs for `tiny_cnn` and residual blocks per stage for
/// `mini_resnet`; `width` is the channel count of the first stage, doubled at
/// every later stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub conv_mode: ConvMode,
    pub norm_layer: NormLayer,
    pub width: usize,
    pub depth: usize,
    pub classes: usize,
    pub in_channels: usize,
    pub seed: u64,
    pub eps: f64,
    /// Overrides the default affine choice of normalized convs, which is on
    /// unless batch norm follows.
    pub use_affine: Option<bool>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::TinyCnn,
            conv_mode: ConvMode::Vanilla,
            norm_layer: NormLayer::None,
            width: 16,
            depth: 3,
            classes: 10,
            in_channels: 3,
            seed: 0,
            eps: DEFAULT_EPS,
            use_affine: None,
        }
    }
}

impl ModelConfig {
    pub fn tiny_cnn(conv_mode: ConvMode, seed: u64) -> Self {
        Self {
            conv_mode,
            seed,
            ..Self::default()
        }
    }

    pub fn mini_resnet(conv_mode: ConvMode, norm_layer: NormLayer, seed: u64) -> Self {
        Self {
            architecture: Architecture::MiniResnet,
            conv_mode,
            norm_layer,
            depth: 2,
            seed,
            ..Self::default()
        }
    }

    /// Whether normalized convs carry a learnable scale and shift.
    pub fn affine(&self) -> bool {
        self.use_affine.unwrap_or(self.norm_layer != NormLayer::Batch)
    }

    /// Whether vanilla convs carry a bias (only when no normalization layer
    /// follows to cancel it).
    pub fn conv_bias(&self) -> bool {
        self.norm_layer == NormLayer::None
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("width", self.width),
            ("depth", self.depth),
            ("classes", self.classes),
            ("in_channels", self.in_channels),
        ] {
            if v == 0 {
                return Err(config_err!("{name} must be positive"));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(config_err!("eps must be positive, got {}", self.eps));
        }
        if self.conv_mode == ConvMode::Normalized && self.norm_layer == NormLayer::Batch && self.use_affine == Some(true) {
            return Err(config_err!("normalized convs followed by batch norm must not use an affine map"));
        }
        if self.architecture == Architecture::TinyCnn && self.depth > 3 {
            // two pools per pair beyond the first would shrink small images to nothing
            return Err(config_err!("tiny_cnn supports at most 3 conv pairs, got {}", self.depth));
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("architecture".into(), self.architecture.to_string());
        m.insert("conv_mode".into(), self.conv_mode.to_string());
        m.insert("norm_layer".into(), self.norm_layer.to_string());
        m.insert("width".into(), self.width.to_string());
        m.insert("depth".into(), self.depth.to_string());
        m.insert("classes".into(), self.classes.to_string());
        m.insert("in_channels".into(), self.in_channels.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("eps".into(), format!("{:e}", self.eps));
        if let Some(a) = self.use_affine {
            m.insert("use_affine".into(), a.to_string());
        }
        m
    }

    /// Reads the model keys of `map`, ignoring any others.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, value) in map {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its textual form. Returns `false` for keys that
    /// are not model fields.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| config_err!("{key}: cannot parse '{value}'"))
        }
        match key {
            "architecture" => self.architecture = value.parse()?,
            "conv_mode" => self.conv_mode = value.parse()?,
            "norm_layer" => self.norm_layer = value.parse()?,
            "width" => self.width = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "classes" => self.classes = num(key, value)?,
            "in_channels" => self.in_channels = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "use_affine" => self.use_affine = Some(num(key, value)?),
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv_string(&self) -> String {
        self.to_map().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_map(&parse_kv(&text)?)
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err!("line {}: expected key=value, got '{line}'", n + 1))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}
