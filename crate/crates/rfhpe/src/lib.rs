//! RF hand pose estimation on complex-valued ultra-wideband radar frames.
//!
//! The crate bundles the full pipeline:
//!
//! - a reverse-mode autodiff engine over real tensors ([`graph`]) with
//!   complex-valued layers built on top ([`cvnn`]);
//! - the pose network: an encoder-decoder feature extractor with skip
//!   connections and a heatmap + depth regressor ([`net`], [`pose`]);
//! - training losses, including teacher-weighted imitation for
//!   cross-modality distillation and the disparity-discrepancy objectives
//!   used for occluded-domain adaptation ([`loss`]);
//! - the adversarial adaptation loop transferring a trained network from
//!   line-of-sight data to unlabeled occluded data ([`adapt`]);
//! - a synthetic UWB radar scene simulator standing in for a hardware rig:
//!   kinematic hand sampler, multi-antenna echo model, material occlusion,
//!   preprocessing, and an emulated noisy teacher ([`hand`], [`sim`]);
//! - PCK evaluation with per-joint-group reporting ([`eval`]);
//! - on-disk dataset/checkpoint formats and the CLI commands ([`io`],
//!   [`config`], [`commands`]).

pub mod adapt;
pub mod commands;
pub mod config;
pub mod cvnn;
pub mod error;
pub mod eval;
pub mod graph;
pub mod hand;
pub mod io;
pub mod kernels;
pub mod loss;
pub mod net;
pub mod par;
pub mod pose;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ComplexTensor, Tensor};
