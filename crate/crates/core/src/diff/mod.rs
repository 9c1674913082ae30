//! Reverse-mode differentiation over dense `f64` matrices.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use matrix::Matrix;
pub use tape::{pairwise_sq_dist, softmax_rows, BackwardFn, Gradients, NodeId, Tape};
