//! Crate-level error type for fallible, caller-recoverable operations.
//!
//! Contract violations (shape mismatches, non-scalar backward targets,
//! fully-masked attention) panic instead; they indicate programming errors,
//! not runtime conditions a caller should handle.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("memory error: {0}")]
    Memory(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
