//! Losses, observer sampling strategies and the training loop.

pub mod loss;
pub mod sampler;
pub mod trainer;

pub use loss::{loss_kld, loss_nll, total_loss, KldParts, LossValues, LossWeights, TotalLoss};
pub use sampler::{build_sample, enumerate_windows, sample_individual, sample_unified, window_stride, Sample, Sampler, Sampling, WindowRef};
pub use trainer::{
    evaluate_loss, sample_step, train_loop, train_model, validation_samples, write_log, EarlyStopping, LogRecord, StopDecision, TrainConfig,
    TrainOutcome,
};
