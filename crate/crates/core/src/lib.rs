//! Group-adaptive classifiers for demographic bias mitigation.
//!
//! The crate provides per-group adaptive convolution and channel attention
//! layers, an automation controller that merges per-group kernels whose
//! masks have become similar, a cosine-margin classification loss with an
//! intra-class-distance de-biasing term, synthetic grouped datasets, a
//! deterministic trainer, and fairness metrics for verification systems.

pub mod error;
pub mod exec;
pub mod automation;
pub mod checks;
pub mod data;
pub mod demog;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod trainer;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Execution;
pub use tensor::{Tensor, Graph, NodeId, ParamId, ParamStore};
