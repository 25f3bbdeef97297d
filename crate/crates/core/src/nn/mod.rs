//! Dense matrices, multilayer perceptrons with hand-written backward passes, and Adam.
//!
//! Everything is `f64`, row-major, one sample per row. Weight matrices are stored
//! `in × out` so a layer computes `x·W + b`.

mod adam;
mod gradcheck;
mod mlp;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::{finite_diff_grad, relative_error};
pub use mlp::{sigmoid, softplus, Activation, Layer, Mlp, MlpCache, MlpSpec};
pub use tensor::Tensor2;
