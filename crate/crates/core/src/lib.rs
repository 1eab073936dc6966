//! Fuse-and-Refine multi-concept personalization for text-conditioned diffusion.
//!
//! This crate is the allocation-only algorithmic core: dataset model and mask
//! handling, Concept Fusion compositing, prompt rendering and placeholder
//! tokens, a small latent-diffusion backbone with hand-written backward
//! passes, the denoising and localized-refinement objectives, AdamW, the
//! training step, and the attention-IoU metric.
//!
//! Everything touching files, PNG codecs or the command line lives in the
//! `far` crate. Enable the `std` feature to let the GEMM kernels use runtime
//! CPU feature detection.
#![no_std]
#![warn(rust_2018_idioms)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod image;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod prompting;
pub mod real;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
