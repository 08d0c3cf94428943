//! Personalized dynamic scanpath prediction.
//!
//! Social-cue maps and an observer's fixation history are re-weighted by a
//! squeeze-excitation attention module, encoded per modality, integrated by an
//! attentive convolutional LSTM and fused by a gated multimodal unit into a
//! per-observer priority map.

pub mod ablation;
pub mod config;
pub mod dam;
pub mod datamodel;
pub mod error;
pub mod evalpipe;
pub mod fixhist;
pub mod integrator;
pub mod metrics;
pub mod numeric;
pub mod synthgen;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
