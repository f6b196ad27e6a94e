//! Minimal differentiable numerics: dense tensors, an embedding MLP with
//! hand-derived backward passes, RMSprop, and stable softmax / cross-entropy
//! / distance primitives.

pub mod network;
pub mod ops;
pub mod optimizer;
pub mod tensor;

pub use network::{EmbeddingNet, NetworkConfig, ParameterSet};
pub use ops::{cross_entropy, pairwise_sq_dist, softmax, PROB_FLOOR};
pub use optimizer::{rmsprop_step, OptimizerConfig};
pub use tensor::{Real, Tensor};
