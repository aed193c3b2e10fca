//! Minimal dense-network toolkit: tensors, MLP forward/backward, layer
//! normalization, AdamW, sinusoidal chunk-index features and a
//! finite-difference gradient check.
//!
//! All parameters and activations are `f32`; reductions (means, variances,
//! norms) accumulate in `f64`.

mod adamw;
mod embed;
mod gemm;
mod gradcheck;
mod io;
mod mlp;
mod tensor;

pub use adamw::{adamw_step, AdamWConfig, AdamWState, StepReport};
pub use embed::sin_embed;
pub use gradcheck::{grad_check, grad_check_with, GradCheckReport};
pub use io::{read_weights, read_weights_from, write_weights, write_weights_to, WEIGHTS_MAGIC, WEIGHTS_VERSION};
pub use mlp::{
    mlp_backward, mlp_forward, Dense, ForwardPass, LayerNorm, MlpSpec, MlpWeights, LN_EPS,
};
pub use tensor::Tensor;
