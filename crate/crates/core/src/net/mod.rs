//! Layers and the two small classifier families.

mod config;
mod layers;
mod model;

pub use config::{parse_kv, Architecture, ConvMode, ModelConfig, NormLayer};
pub use layers::{
    batch_or_instance_norm, conv_forward, norm_conv_forward, NormConvLayer, NormMode, RunningStats, BN_MOMENTUM,
    NORM_EPS,
};
pub use model::{build_model, Forward, Model, Param};
