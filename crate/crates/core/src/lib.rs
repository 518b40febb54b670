//! Laboratory for fine-grained and BigMac Mixture-of-Experts layers.
//!
//! * [`tensor`] and [`graph`]: dense `f64` tensors with tape-based
//!   reverse-mode differentiation and a finite-difference oracle.
//! * [`moe`]: router, experts, capacity dropping and the assembled layers.
//! * [`ep_sim`]: expert-parallel All-to-All byte accounting and an
//!   alpha-beta latency model.
//! * [`analytics`]: closed-form parameter, FLOP and transfer accounting.
//! * [`cli`]: configuration parsing and the `moelab` subcommands.

pub mod analytics;
pub mod cli;
pub mod config;
pub mod ep_sim;
pub mod error;
pub mod graph;
pub mod moe;
pub mod tensor;

pub use config::{CostModel, ModelConfig, Variant};
pub use error::{Error, Result};
pub use tensor::Tensor;
