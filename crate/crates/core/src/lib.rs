//! Unified retrieval and generation in one decoder-only transformer.
//!
//! Early layers produce hidden states that a small projection head scores
//! against each page with late interaction; non-selected pages are dropped
//! from the hidden states before the deep layers run. The crate also carries
//! the synthetic planted-evidence corpus, the two-stage training procedure,
//! layer-wise probes, evaluation metrics and an analytical FLOPs model.

pub mod analysis;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod evalflops;
pub mod model;
pub mod numerics;
pub mod retrieval;

pub use error::{Error, Result};
