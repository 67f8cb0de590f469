//! Dense matrices and a tape-based reverse-mode differentiator.

mod matrix;
mod rotation;
mod tape;

pub use matrix::Matrix;
pub(crate) use matrix::log_sum_exp;
pub use rotation::PairRotation;
pub use tape::{grad, FlopCounter, FlopTag, Gradients, Tape, Var};
