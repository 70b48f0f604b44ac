//! Deterministic federated-learning simulator for parameter-efficient
//! fine-tuning of a small frozen transformer classifier.
//!
//! The crate provides the full algorithmic stack: an f64 autodiff tape,
//! the transformer backbone with pluggable PEFT modes (client-conditioned
//! generated adapters, vanilla adapters, LoRA, BitFit, full fine-tuning),
//! client embeddings, the adapter-generating hypernetwork, Dirichlet data
//! partitioning, the FedAvg training loop, and evaluation metrics.
//! Everything is seeded and single-threaded per client, so a given
//! configuration reproduces bit-identical results.

pub mod check;
pub mod data;
pub mod embed;
pub mod error;
pub mod fed;
pub mod hypernet;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, TensorId};
