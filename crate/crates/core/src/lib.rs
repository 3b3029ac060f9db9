//! Filter-normalized convolutions and the tooling around them.

pub mod atf;
pub mod autodiff;
pub mod classic;
pub mod data;
pub mod error;
pub mod filter;
pub mod net;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
