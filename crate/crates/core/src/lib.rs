//! Pose-conditioned human animation with a toy-scale diffusion transformer.
//!
//! The pipeline encodes a reference image into a latent frame, renders the
//! driving poses into heatmaps, encodes them with a 3D-conv pose encoder,
//! and integrates a flow-matching velocity field predicted by a small DiT
//! whose pretrained-analog weights are adapted with LoRA. Long clips are
//! produced with overlapping windows that hand their last frames to the
//! next window as fixed context.

pub mod conditioning;
pub mod container;
pub mod dit;
pub mod error;
pub mod flow_match;
pub mod grad_suite;
pub mod latent_codec;
pub mod long_video;
pub mod media;
pub mod metrics;
pub mod numerics;
pub mod params;
pub mod pose_kit;

pub use error::{Error, Result};
