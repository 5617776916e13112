//! Scalar-exact reverse-mode automatic differentiation over f64 tensors.
//!
//! The crate provides exactly what the summarization models upstairs need
//! and nothing more: a recording tape ([`Graph`]) with eager evaluation,
//! named parameter storage with accumulating gradients ([`ParamSet`]),
//! multi-head attention as a reusable composite, and an Adam optimizer.
//! Everything runs single-threaded on f64 so that results are reproducible
//! bit for bit across runs and checkpoint round-trips.

pub mod adam;
pub mod attention;
pub mod check;
pub mod error;
pub mod graph;
pub mod ops;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use attention::{
    init_attention_params, mount_attention, multi_head_attention, AttnMask, AttnWeights,
};
pub use error::AutodiffError;
pub use graph::{Graph, Var, MASK_NEG};
pub use ops::{kl_divergence, linear, mean_rows, normalize, symmetric_kl, LOG_EPS};
pub use params::{ParamSet, Parameter};
pub use tensor::Tensor;
