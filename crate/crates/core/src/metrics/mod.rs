//! Saliency scores, evaluation protocols and summary statistics.

pub mod protocol;
pub mod scores;
pub mod stats;

pub use protocol::{
    eval_frames, evaluate, evaluate_1v1, evaluate_1vinf, evaluate_all, model_input, observer_means, per_observer, protocol_points, read_records,
    score, write_records, EvalRecord, Metric, Protocol,
};
pub use scores::{aucj, aucj_pairwise, nss, nss_mean};
pub use stats::{aggregate, paired_ttest, video_variance, GroupKey, SummaryRow, SummaryTable, TTest};
