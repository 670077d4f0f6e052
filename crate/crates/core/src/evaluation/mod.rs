//! Tracking metrics, text metrics, a recurrent state tracker and the
//! augmentation comparison protocol.

pub mod gda;
pub mod metrics;
pub mod tracker;

pub use gda::{evaluate_gda, ArmSummary, GdaConfig, GdaReport};
pub use metrics::{
    gold_labels, inform_accuracy, joint_goal_accuracy, lcs_len, request_accuracy, rouge_l_f1, MetricReport, TurnLabels,
    TurnSelection, UnigramModel,
};
pub use tracker::{train_tracker, Tracker, TrackerConfig};
