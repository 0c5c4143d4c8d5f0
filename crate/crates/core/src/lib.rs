//! Desk-scale speech-token language modeling.
//!
//! Speech frames from a frozen codec stub become literal vocabulary tokens
//! next to text symbols. Speech-token embeddings are initialized from
//! projected per-code SSL centroids, hidden states are tied back to the SSL
//! features through a stop-gradient alignment loss, audio is thinned and
//! erased during training, and delayed auxiliary heads predict coarse
//! buckets and future codes. Evaluation scores sequences by length-normalized
//! log-likelihood and compares natural against perturbed utterances.

pub mod error;
pub mod augment;
pub mod config;
pub mod corpus;
pub mod distill;
pub mod eval;
pub mod interleave;
pub mod kmeans;
pub mod manifest;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod scoring;
pub mod synthgen;
pub mod tensorfile;
pub mod vocab;

pub use error::{Error, Result};
