//! File formats, training driver, sampling, evaluation and CLI on top of `far-core`.

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod generate;
pub mod manifest;
pub mod png;
pub mod synth;
pub mod train;

pub use error::{FarError, Result};
