//! Numeric kernels: tensors, parameter sets, a reverse-mode engine over a
//! fixed layer vocabulary, gradient checking, AdamW and seeded randomness.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod rng;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, grad_check_against, grad_check_objective, GradCheckReport, SAMPLE_FRACTION};
pub use graph::{forward, logistic, softplus, Axis, Gradients, Graph, GraphBuilder, Layer, Node, NodeId, Tape};
pub use optim::{adamw_step, clip_global_norm, AdamWConfig, AdamWState};
pub use params::ParamSet;
pub use rng::{gaussian, Rng};
pub use tensor::Tensor;

pub(crate) use params::hex16;
