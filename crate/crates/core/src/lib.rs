//! Position-independent reuse of vision-token encoder and KV caches on a toy
//! vision-language transformer, with per-layer selective recomputation.
//!
//! The crate is organised along the request path:
//!
//! - [`model`]: the deterministic toy model and its forward kernels
//! - [`store`]: content-addressed encoder/KV cache store with on-disk persistence
//! - [`plan`] and [`reuse`]: recompute plans, computation masks and the reuse prefill
//! - [`error_lab`]: reuse-error measurements (per-token profiles, decomposition, head vs. tail)
//! - [`sensitivity`]: per-layer sensitivity tables
//! - [`planner`]: greedy and exhaustive budget allocation over a sensitivity table
//! - [`bench`]: prefill latency / FLOP scenarios

pub mod bench;
pub mod config;
pub mod error;
pub mod error_lab;
pub mod model;
pub mod plan;
pub mod planner;
pub mod reuse;
pub mod sensitivity;
pub mod sequence;
pub mod store;
pub mod tensor;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::{KvTensors, ToyVlm};
pub use sequence::{Image, TokenSequence};
