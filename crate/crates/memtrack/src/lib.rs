//! Memory-based online multi-object tracking on synthetic sequences.
//!
//! The tracker detects objects and associates identities in a single
//! network pass per frame: a hypothesis generator proposes objects, a
//! spatio-temporal memory keeps per-track identity embeddings, a memory
//! encoder condenses each track's history into one embedding, and a joint
//! decoder scores proposals and tracks together. Training, synthetic data
//! generation, MOT metrics, and a CLI round out the workspace.

pub mod decoder;
pub mod encoder;
pub mod error;
pub mod hungarian;
pub mod hypothesis;
pub mod losses;
pub mod memory;
pub mod model;
pub mod nn;
pub mod metrics;
pub mod runtime;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
