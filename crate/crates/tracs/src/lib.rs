//! Telescope-reference classification: corpus ingestion, fixed-window
//! chunking, a trainable pooled encoder with a multi-task head, majority
//!-vote aggregation, and macro-F1 evaluation, behind the `tracs` CLI.

pub mod chunker;
pub mod cli_config;
pub mod corpus_ingest;
pub mod error;
pub mod eval_metrics;
pub mod inference_aggregate;
pub mod model_core;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
