//! Training pipeline, file formats, and CLI around `metalign-core`: corpus
//! and manifest ingestion, checkpointing, the three-stage training loop with
//! grouped cross-validation, the ablation suite, and reporting.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod trace;

pub use error::{AppError, Result};
