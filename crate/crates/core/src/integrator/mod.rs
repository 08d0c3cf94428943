//! Modality encoders, attentive recurrence, gated fusion and the two model
//! wirings.

pub mod alstm;
pub mod checkpoint;
pub mod encoder;
pub mod gmu;
pub mod model;

pub use alstm::{alstm_attend, alstm_run, alstm_step, AlstmParams, AlstmState};
pub use checkpoint::{load_checkpoint, load_header, save_checkpoint, CheckpointHeader};
pub use encoder::{encode_frame, encode_modality, EncoderParams};
pub use gmu::{gmu_fuse, GmuParams};
pub use model::{Model, ModelConfig, ModelInput, Network, Predictor, Query, TrainForward, Variant};
