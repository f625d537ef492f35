//! Aggregatable measures: per-participant quantities whose sum over
//! participants equals the same quantity on the concatenated dataset.
//!
//! Classification uses the full confusion matrix as its measure. Every
//! per-class tuple the F1 family needs (`FP + FN`, `TP`, and the class weight
//! `TP + FN`) is a view of it, and the same matrix also serves precision,
//! recall, accuracy and MCC in a single message.
//!
//! R² needs two residual sums, the second taken around the *global* target
//! mean. That mean is itself gathered from additive `(sum, count)` pieces in a
//! statistics phase before the measures are computed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{
    confusion_from_labels, federation_shape, r2_from_sums, score_confusion, ConfusionMatrix,
    EvalMode, LabeledPredictions, MetricKind, MetricSpec, MetricValue, Task,
};
use crate::sum::{compensated_sum, NeumaierSum};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationAM {
    pub confusion: ConfusionMatrix,
}

/// The two per-class measures behind macro F1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct F1Terms {
    /// FP + FN
    pub errors: u64,
    /// TP
    pub hits: u64,
}

impl ClassificationAM {
    pub fn f1_terms(&self, class: usize) -> F1Terms {
        let cm = &self.confusion;
        F1Terms {
            errors: cm.false_positives(class) + cm.false_negatives(class),
            hits: cm.true_positives(class),
        }
    }

    /// Samples of `class` (TP + FN), the weight used by weighted averaging.
    pub fn class_weight(&self, class: usize) -> u64 {
        self.confusion.support(class)
    }
}

/// Residual sums for R² around a broadcast global mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionAM {
    /// Σ (y_true − y_pred)²
    pub rs_a: f64,
    /// Σ (y_true − global_mean)²
    pub rs_b: f64,
    pub n: u64,
    /// The mean both sums were taken around; measures around different means
    /// cannot be summed.
    pub global_mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanStatistic {
    pub sum_y: f64,
    pub count: u64,
}

impl MeanStatistic {
    pub fn compute(data: &LabeledPredictions) -> Result<Self> {
        let LabeledPredictions::Regression(d) = data else {
            return Err(Error::TaskMismatch {
                expected: Task::Regression.as_str(),
                found: data.task().as_str(),
            });
        };
        Ok(Self {
            sum_y: compensated_sum(d.y_true().iter().copied()),
            count: d.y_true().len() as u64,
        })
    }

    pub fn aggregate<'a, I: IntoIterator<Item = &'a MeanStatistic>>(pieces: I) -> Self {
        let mut sum = NeumaierSum::new();
        let mut count = 0;
        for piece in pieces {
            sum += piece.sum_y;
            count += piece.count;
        }
        Self {
            sum_y: sum.value(),
            count,
        }
    }

    pub fn global_mean(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::UndefinedMetric(
                "global mean over zero samples".into(),
            ));
        }
        Ok(self.sum_y / self.count as f64)
    }
}

/// Identifier of a global statistic gathered before the measure phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticId {
    GlobalMean,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StatisticPlan {
    pub phases: Vec<StatisticId>,
}

impl StatisticPlan {
    /// Union of the plans of `specs`, in first-needed order.
    pub fn for_specs(specs: &[MetricSpec]) -> Self {
        let mut phases = Vec::new();
        for spec in specs {
            for phase in statistic_plan(spec).phases {
                if !phases.contains(&phase) {
                    phases.push(phase);
                }
            }
        }
        Self { phases }
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }
}

pub fn statistic_plan(spec: &MetricSpec) -> StatisticPlan {
    match spec.kind {
        MetricKind::R2 => StatisticPlan {
            phases: vec![StatisticId::GlobalMean],
        },
        _ => StatisticPlan::default(),
    }
}

/// Local view of a statistic, sent in the statistics phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "statistic", rename_all = "snake_case")]
pub enum LocalStatistic {
    GlobalMean(MeanStatistic),
}

impl LocalStatistic {
    pub fn id(&self) -> StatisticId {
        match self {
            LocalStatistic::GlobalMean(_) => StatisticId::GlobalMean,
        }
    }

    pub fn compute(id: StatisticId, data: &LabeledPredictions) -> Result<Self> {
        match id {
            StatisticId::GlobalMean => MeanStatistic::compute(data).map(LocalStatistic::GlobalMean),
        }
    }
}

/// Aggregated statistics broadcast to participants before they compute measures.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GlobalStatistics {
    pub global_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AggregatableMeasure {
    Classification(ClassificationAM),
    Regression(RegressionAM),
}

impl AggregatableMeasure {
    pub fn sample_count(&self) -> u64 {
        match self {
            AggregatableMeasure::Classification(am) => am.confusion.total(),
            AggregatableMeasure::Regression(am) => am.n,
        }
    }

    pub fn task(&self) -> Task {
        match self {
            AggregatableMeasure::Classification(_) => Task::Classification,
            AggregatableMeasure::Regression(_) => Task::Regression,
        }
    }
}

pub fn compute_classification_am(data: &LabeledPredictions) -> Result<ClassificationAM> {
    Ok(ClassificationAM {
        confusion: confusion_from_labels(data)?,
    })
}

pub fn compute_regression_am(data: &LabeledPredictions, global_mean: f64) -> Result<RegressionAM> {
    let LabeledPredictions::Regression(d) = data else {
        return Err(Error::TaskMismatch {
            expected: Task::Regression.as_str(),
            found: data.task().as_str(),
        });
    };
    let rs_a = compensated_sum(
        d.y_true()
            .iter()
            .zip(d.y_pred())
            .map(|(t, p)| (t - p).powi(2)),
    );
    let rs_b = compensated_sum(d.y_true().iter().map(|t| (t - global_mean).powi(2)));
    Ok(RegressionAM {
        rs_a,
        rs_b,
        n: d.y_true().len() as u64,
        global_mean,
    })
}

/// The measure a participant sends, given the broadcast statistics.
pub fn compute_am(data: &LabeledPredictions, stats: &GlobalStatistics) -> Result<AggregatableMeasure> {
    match data.task() {
        Task::Classification => compute_classification_am(data).map(AggregatableMeasure::Classification),
        Task::Regression => {
            let mean = stats.global_mean.ok_or_else(|| {
                Error::InvalidConfig("regression measures need the global mean".into())
            })?;
            compute_regression_am(data, mean).map(AggregatableMeasure::Regression)
        }
    }
}

/// Componentwise sum. Counts add exactly; residual sums use compensated
/// accumulation in the given order.
pub fn aggregate_ams(ams: &[AggregatableMeasure]) -> Result<AggregatableMeasure> {
    let first = ams.first().ok_or(Error::EmptyFederation)?;
    match first {
        AggregatableMeasure::Classification(head) => {
            let mut total = head.confusion.clone();
            for am in &ams[1..] {
                let AggregatableMeasure::Classification(am) = am else {
                    return Err(Error::ShapeMismatch(
                        "cannot mix classification and regression measures".into(),
                    ));
                };
                total.try_add(&am.confusion)?;
            }
            Ok(AggregatableMeasure::Classification(ClassificationAM { confusion: total }))
        }
        AggregatableMeasure::Regression(head) => {
            let mut rs_a = NeumaierSum::new();
            let mut rs_b = NeumaierSum::new();
            let mut n = 0;
            for am in ams {
                let AggregatableMeasure::Regression(am) = am else {
                    return Err(Error::ShapeMismatch(
                        "cannot mix classification and regression measures".into(),
                    ));
                };
                if am.global_mean.to_bits() != head.global_mean.to_bits() {
                    return Err(Error::ShapeMismatch(format!(
                        "regression measures taken around different means ({} vs {})",
                        head.global_mean, am.global_mean
                    )));
                }
                rs_a += am.rs_a;
                rs_b += am.rs_b;
                n += am.n;
            }
            Ok(AggregatableMeasure::Regression(RegressionAM {
                rs_a: rs_a.value(),
                rs_b: rs_b.value(),
                n,
                global_mean: head.global_mean,
            }))
        }
    }
}

/// Recombines an aggregated measure into a metric.
pub fn metric_from_am(am: &AggregatableMeasure, spec: &MetricSpec) -> Result<MetricValue> {
    spec.check_task(am.task())?;
    let value = match am {
        AggregatableMeasure::Classification(am) => score_confusion(&am.confusion, spec)?,
        AggregatableMeasure::Regression(am) => {
            if am.n == 0 {
                return Err(Error::UndefinedMetric(format!("{spec} over zero samples")));
            }
            r2_from_sums(am.rs_a, am.rs_b)?
        }
    };
    Ok(MetricValue {
        spec: *spec,
        mode: EvalMode::Flam,
        value,
        sample_count: am.sample_count(),
    })
}

/// Statistics phase, measure phase, aggregation and recombination over
/// in-memory partitions.
pub fn flam_evaluate(partitions: &[LabeledPredictions], spec: &MetricSpec) -> Result<MetricValue> {
    let mut values = flam_evaluate_many(partitions, std::slice::from_ref(spec))?;
    Ok(values.remove(0))
}

pub fn flam_evaluate_many(
    partitions: &[LabeledPredictions],
    specs: &[MetricSpec],
) -> Result<Vec<MetricValue>> {
    flam_evaluate_with(Execution::default(), partitions, specs)
}

pub fn flam_evaluate_with(
    exec: Execution,
    partitions: &[LabeledPredictions],
    specs: &[MetricSpec],
) -> Result<Vec<MetricValue>> {
    let (task, _) = federation_shape(partitions)?;
    for spec in specs {
        spec.check_task(task)?;
    }
    if specs.is_empty() {
        return Ok(Vec::new());
    }

    let stats = gather_statistics(exec, partitions, &StatisticPlan::for_specs(specs))?;
    let ams = exec
        .map(partitions, |p| compute_am(p, &stats))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let total = aggregate_ams(&ams)?;
    specs.iter().map(|spec| metric_from_am(&total, spec)).collect()
}

fn gather_statistics(
    exec: Execution,
    partitions: &[LabeledPredictions],
    plan: &StatisticPlan,
) -> Result<GlobalStatistics> {
    let mut stats = GlobalStatistics::default();
    for phase in &plan.phases {
        match phase {
            StatisticId::GlobalMean => {
                let pieces = exec
                    .map(partitions, MeanStatistic::compute)
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?;
                stats.global_mean = Some(MeanStatistic::aggregate(&pieces).global_mean()?);
            }
        }
    }
    Ok(stats)
}
