//! The toy backbone and the kernels it is built from.

pub mod attention;
pub mod backbone;
pub mod ops;
pub mod params;
pub mod schedule;

pub use backbone::{AttentionMap, AttentionRecord, DenoiseOutput, DiffusionBackbone, LayerSide, ToyBackbone, ToyConfig};
pub use params::{block_tag, BlockTag, Grads, Param, ParamId, ParamStore};
pub use schedule::{add_noise, ddim_from, ddim_sample, ddim_timesteps, EpsPredictor, LatentGrid, NoiseSchedule};
