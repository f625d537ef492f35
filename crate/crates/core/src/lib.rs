//! Federated evaluation of classification and regression models with
//! aggregatable measures.
//!
//! Participants never ship metric values. They ship additive evidence (a
//! confusion matrix, or residual sums for R²) which the coordinator sums and
//! turns into the metric, so the result matches evaluation on the
//! concatenated test set. The weighted-average baseline is kept alongside to
//! measure how far it drifts under non-IID partitions.

pub mod am;
pub mod baseline;
pub mod error;
pub mod exec;
pub mod federation;
pub mod metrics;
pub mod partition;
pub mod predictors;
pub mod report;
mod rng;
pub mod sum;
pub mod synthetic;

pub use am::{
    aggregate_ams, compute_classification_am, compute_regression_am, flam_evaluate,
    flam_evaluate_many, metric_from_am, statistic_plan, AggregatableMeasure, ClassificationAM,
    MeanStatistic, RegressionAM, StatisticId, StatisticPlan,
};
pub use baseline::{
    build_deviation_report, local_metrics, weighted_average_evaluate, DeviationReport,
    DeviationRow, WeightScheme,
};
pub use error::{Error, Result};
pub use exec::Execution;
pub use metrics::{
    confusion_from_labels, evaluate_centralized, metric_from_confusion, Averaging,
    ConfusionMatrix, EvalMode, LabeledPredictions, MetricKind, MetricSpec, MetricValue, Task,
};
pub use partition::{dirichlet_partition, manual_skew_partition, PartitionPlan, SkewConfig, SkewKind};
