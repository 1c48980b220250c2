//! Persistence, evaluation, and experiment-grid tooling around the trainer.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod eval;
