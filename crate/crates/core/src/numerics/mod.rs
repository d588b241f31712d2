//! Tensor arithmetic, seeded randomness, normal-distribution helpers and a
//! small reverse-mode differentiation tape.

pub mod autodiff;
mod normal;
mod rng;
mod tensor;

pub use autodiff::{Activation, Gradients, Graph, Var};
pub use normal::{std_normal_cdf, std_normal_pdf};
pub use rng::{uniform_noise, RngState};
pub use tensor::{conv_out_size, numel, Tensor};
