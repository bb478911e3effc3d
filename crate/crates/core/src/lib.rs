//! Class-incremental training of a dense classifier.
//!
//! The crate trains a small feed-forward network over an ordered stream of
//! class increments that may switch feature domain midway, using rehearsal
//! memory and a combined objective: a cross-entropy retention term on old
//! classes, a KL plasticity term on new classes, and a Bayesian
//! mutual-distillation term that couples old and new samples through a
//! posterior over the old classes. Metrics, ROC/AUC, deterministic synthetic
//! task streams, and finite-difference gradient verification are included.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod optimizer;
pub mod rehearsal;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
