//! Retrieve-verify-retrieve: iterative dense retrieval for questions with
//! many answers, with contrastive training for the retrievers and the
//! evaluation harness.

pub mod dataset;
pub mod embedder;
pub mod engine;
pub mod error;
pub mod eval;
pub mod index;
pub mod synth;
pub mod trainer;
pub mod verifier;

pub use error::{Error, Result};
