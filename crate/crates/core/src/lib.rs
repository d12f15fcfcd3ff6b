//! Training-data leakage audit for language models.
//!
//! The audit runs a model over its own training corpus, collects every
//! maximal run of consecutively correct top-k predictions, and reports for
//! each distinct run how often it was produced, by how many users, how
//! often it occurs in the training data, its contexts and its perplexities.
//! Unique sequences can then be compared against a public model that never
//! saw their owners' data to obtain a worst-case leakage epsilon.

pub mod corpus;
pub mod error;
pub mod extractor;
pub mod lm;
pub mod matcher;
pub mod metrics;
pub mod pipeline;
pub mod stats;

pub use error::{Error, Result};

/// Version string embedded in output documents.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
