//! Dense matrices, a reverse-mode autodiff tape, and a finite-difference oracle.

mod fd;
mod matrix;
mod tape;

pub use fd::{finite_difference_gradient, relative_error, Step};
pub use matrix::{
    dot, gelu, gelu_derivative, layer_norm, log_sum_exp, softmax_cross_entropy, softmax_rows,
    Matrix,
};
pub use tape::{NodeId, ParamKey, Tape};
