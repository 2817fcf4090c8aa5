//! Model metrics and reader-study analysis.

pub mod metrics;
pub mod reader;

pub use metrics::{balanced_accuracy, roc_auc, roc_curve, trapezoid_area, MetricError, PredictionSet, RocPoint};
pub use reader::{
    arm_comparison, duration_between, events_to_csv, format_timestamp, least_squares, mean_reader_scores,
    parse_events_csv, parse_truth_csv, truth_to_csv, Arm, ArmComparison, LinearFit, MeanScores, PooledArm,
    ReaderOutcome, ReadingEvent, TimePair, DEFAULT_TIME_CAP_S, EVENT_CSV_HEADER, MAX_SEVERITY, TRUTH_CSV_HEADER,
};
