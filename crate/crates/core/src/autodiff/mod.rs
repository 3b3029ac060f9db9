//! Dense tensors on a reverse-mode gradient tape.

mod checkpoint;
mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error, REL_ERROR_FLOOR};
pub use tape::{BackwardMode, BatchStats, NormStats, Tape, Var};
