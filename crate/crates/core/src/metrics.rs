//! Metric identities and pooled (centralized) metric computation.
//!
//! Classification metrics are always assembled from a [`ConfusionMatrix`]:
//! the counts stay exact integers and floats only appear when the final
//! ratios are formed. Evaluating a label vector and evaluating the matrix
//! built from it therefore go through the same arithmetic.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sum::compensated_sum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Regression => "regression",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "classification" => Ok(Task::Classification),
            "regression" => Ok(Task::Regression),
            other => Err(Error::InvalidConfig(format!("unknown task `{other}`"))),
        }
    }
}

/// Ground truth and model outputs for one participant, already validated.
#[derive(Debug, Clone, PartialEq)]
pub enum LabeledPredictions {
    Classification(ClassificationData),
    Regression(RegressionData),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassificationData {
    class_count: usize,
    y_true: Vec<usize>,
    y_pred: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionData {
    y_true: Vec<f64>,
    y_pred: Vec<f64>,
}

impl ClassificationData {
    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn y_true(&self) -> &[usize] {
        &self.y_true
    }

    pub fn y_pred(&self) -> &[usize] {
        &self.y_pred
    }
}

impl RegressionData {
    pub fn y_true(&self) -> &[f64] {
        &self.y_true
    }

    pub fn y_pred(&self) -> &[f64] {
        &self.y_pred
    }
}

impl LabeledPredictions {
    pub fn classification(
        y_true: Vec<usize>,
        y_pred: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::InvalidConfig("class count must be at least 1".into()));
        }
        if y_true.len() != y_pred.len() {
            return Err(Error::LengthMismatch {
                y_true: y_true.len(),
                y_pred: y_pred.len(),
            });
        }
        let out_of_range = y_true
            .iter()
            .chain(y_pred.iter())
            .position(|&label| label >= class_count);
        if let Some(pos) = out_of_range {
            let index = pos % y_true.len().max(1);
            let label = if pos < y_true.len() { y_true[pos] } else { y_pred[index] };
            return Err(Error::LabelOutOfRange {
                index,
                label,
                class_count,
            });
        }
        Ok(LabeledPredictions::Classification(ClassificationData {
            class_count,
            y_true,
            y_pred,
        }))
    }

    pub fn regression(y_true: Vec<f64>, y_pred: Vec<f64>) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(Error::LengthMismatch {
                y_true: y_true.len(),
                y_pred: y_pred.len(),
            });
        }
        if let Some(index) = y_true
            .iter()
            .chain(y_pred.iter())
            .position(|v| !v.is_finite())
        {
            return Err(Error::InvalidConfig(format!(
                "non-finite regression value at index {}",
                index % y_true.len().max(1)
            )));
        }
        Ok(LabeledPredictions::Regression(RegressionData { y_true, y_pred }))
    }

    /// An empty dataset of the same task and class count.
    pub fn empty_like(&self) -> Self {
        match self {
            LabeledPredictions::Classification(d) => {
                LabeledPredictions::Classification(ClassificationData {
                    class_count: d.class_count,
                    y_true: Vec::new(),
                    y_pred: Vec::new(),
                })
            }
            LabeledPredictions::Regression(_) => LabeledPredictions::Regression(RegressionData {
                y_true: Vec::new(),
                y_pred: Vec::new(),
            }),
        }
    }

    pub fn task(&self) -> Task {
        match self {
            LabeledPredictions::Classification(_) => Task::Classification,
            LabeledPredictions::Regression(_) => Task::Regression,
        }
    }

    pub fn class_count(&self) -> Option<usize> {
        match self {
            LabeledPredictions::Classification(d) => Some(d.class_count),
            LabeledPredictions::Regression(_) => None,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            LabeledPredictions::Classification(d) => d.y_true.len(),
            LabeledPredictions::Regression(d) => d.y_true.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keeps the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        match self {
            LabeledPredictions::Classification(d) => {
                LabeledPredictions::Classification(ClassificationData {
                    class_count: d.class_count,
                    y_true: indices.iter().map(|&i| d.y_true[i]).collect(),
                    y_pred: indices.iter().map(|&i| d.y_pred[i]).collect(),
                })
            }
            LabeledPredictions::Regression(d) => LabeledPredictions::Regression(RegressionData {
                y_true: indices.iter().map(|&i| d.y_true[i]).collect(),
                y_pred: indices.iter().map(|&i| d.y_pred[i]).collect(),
            }),
        }
    }

    /// Concatenates partitions in order. All parts must share task and class count.
    pub fn concat(parts: &[LabeledPredictions]) -> Result<Self> {
        let (task, class_count) = federation_shape(parts)?;
        match task {
            Task::Classification => {
                let mut y_true = Vec::new();
                let mut y_pred = Vec::new();
                for part in parts {
                    if let LabeledPredictions::Classification(d) = part {
                        y_true.extend_from_slice(&d.y_true);
                        y_pred.extend_from_slice(&d.y_pred);
                    }
                }
                Ok(LabeledPredictions::Classification(ClassificationData {
                    class_count: class_count.unwrap_or(1),
                    y_true,
                    y_pred,
                }))
            }
            Task::Regression => {
                let mut y_true = Vec::new();
                let mut y_pred = Vec::new();
                for part in parts {
                    if let LabeledPredictions::Regression(d) = part {
                        y_true.extend_from_slice(&d.y_true);
                        y_pred.extend_from_slice(&d.y_pred);
                    }
                }
                Ok(LabeledPredictions::Regression(RegressionData { y_true, y_pred }))
            }
        }
    }
}

/// Task and class count shared by every partition of a federation.
pub fn federation_shape(parts: &[LabeledPredictions]) -> Result<(Task, Option<usize>)> {
    let first = parts.first().ok_or(Error::EmptyFederation)?;
    let task = first.task();
    let class_count = first.class_count();
    for (i, part) in parts.iter().enumerate().skip(1) {
        if part.task() != task {
            return Err(Error::TaskMismatch {
                expected: task.as_str(),
                found: part.task().as_str(),
            });
        }
        if part.class_count() != class_count {
            return Err(Error::ShapeMismatch(format!(
                "partition {i} declares {:?} classes, partition 0 declares {:?}",
                part.class_count(),
                class_count
            )));
        }
    }
    Ok((task, class_count))
}

/// C×C table of counts; rows are the true class, columns the predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<u64>>", into = "Vec<Vec<u64>>")]
pub struct ConfusionMatrix {
    class_count: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(class_count: usize) -> Self {
        Self {
            class_count,
            counts: vec![0; class_count * class_count],
        }
    }

    pub fn from_rows(rows: Vec<Vec<u64>>) -> Result<Self> {
        let class_count = rows.len();
        if class_count == 0 {
            return Err(Error::ShapeMismatch("confusion matrix has no rows".into()));
        }
        let mut counts = Vec::with_capacity(class_count * class_count);
        for (j, row) in rows.into_iter().enumerate() {
            if row.len() != class_count {
                return Err(Error::ShapeMismatch(format!(
                    "row {j} has {} columns, expected {class_count}",
                    row.len()
                )));
            }
            counts.extend(row);
        }
        Ok(Self {
            class_count,
            counts,
        })
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.class_count.max(1))
            .map(<[u64]>::to_vec)
            .collect()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn get(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.class_count + predicted]
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) {
        self.counts[true_class * self.class_count + predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.get(class, class)
    }

    /// t_j: samples whose true class is `class`.
    pub fn support(&self, class: usize) -> u64 {
        let start = class * self.class_count;
        self.counts[start..start + self.class_count].iter().sum()
    }

    /// p_j: samples predicted as `class`.
    pub fn predicted(&self, class: usize) -> u64 {
        (0..self.class_count).map(|t| self.get(t, class)).sum()
    }

    pub fn false_positives(&self, class: usize) -> u64 {
        self.predicted(class) - self.true_positives(class)
    }

    pub fn false_negatives(&self, class: usize) -> u64 {
        self.support(class) - self.true_positives(class)
    }

    pub fn true_negatives(&self, class: usize) -> u64 {
        self.total() + self.true_positives(class) - self.support(class) - self.predicted(class)
    }

    pub fn correct(&self) -> u64 {
        (0..self.class_count).map(|j| self.true_positives(j)).sum()
    }

    /// Entrywise sum; both matrices must have the same class count.
    pub fn try_add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.class_count != other.class_count {
            return Err(Error::ShapeMismatch(format!(
                "cannot add a {c2}×{c2} confusion matrix to a {c1}×{c1} one",
                c1 = self.class_count,
                c2 = other.class_count
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

impl TryFrom<Vec<Vec<u64>>> for ConfusionMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<u64>>) -> Result<Self> {
        ConfusionMatrix::from_rows(rows)
    }
}

impl From<ConfusionMatrix> for Vec<Vec<u64>> {
    fn from(cm: ConfusionMatrix) -> Self {
        cm.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    Precision,
    Recall,
    F1,
    Mcc,
    R2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    Macro,
    Weighted,
    None,
}

/// Which metric to compute, and the value a per-class 0/0 ratio takes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub kind: MetricKind,
    pub averaging: Averaging,
    #[serde(default)]
    pub zero_division: f64,
}

impl MetricSpec {
    pub fn new(kind: MetricKind, averaging: Averaging) -> Result<Self> {
        let spec = Self {
            kind,
            averaging,
            zero_division: 0.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub const fn accuracy() -> Self {
        Self::plain(MetricKind::Accuracy)
    }

    pub const fn mcc() -> Self {
        Self::plain(MetricKind::Mcc)
    }

    pub const fn r2() -> Self {
        Self::plain(MetricKind::R2)
    }

    pub const fn precision(averaging: Averaging) -> Self {
        Self::averaged(MetricKind::Precision, averaging)
    }

    pub const fn recall(averaging: Averaging) -> Self {
        Self::averaged(MetricKind::Recall, averaging)
    }

    pub const fn f1(averaging: Averaging) -> Self {
        Self::averaged(MetricKind::F1, averaging)
    }

    const fn plain(kind: MetricKind) -> Self {
        Self {
            kind,
            averaging: Averaging::None,
            zero_division: 0.0,
        }
    }

    const fn averaged(kind: MetricKind, averaging: Averaging) -> Self {
        Self {
            kind,
            averaging,
            zero_division: 0.0,
        }
    }

    pub fn with_zero_division(mut self, value: f64) -> Self {
        self.zero_division = value;
        self
    }

    /// Every classification metric this crate computes, at the default
    /// zero-division value.
    pub fn all_classification() -> Vec<Self> {
        vec![
            Self::accuracy(),
            Self::precision(Averaging::Macro),
            Self::precision(Averaging::Weighted),
            Self::recall(Averaging::Macro),
            Self::recall(Averaging::Weighted),
            Self::f1(Averaging::Macro),
            Self::f1(Averaging::Weighted),
            Self::mcc(),
        ]
    }

    pub fn task(&self) -> Task {
        match self.kind {
            MetricKind::R2 => Task::Regression,
            _ => Task::Classification,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let averaged = matches!(
            self.kind,
            MetricKind::Precision | MetricKind::Recall | MetricKind::F1
        );
        match (averaged, self.averaging) {
            (true, Averaging::None) => {
                return Err(Error::InvalidSpec(format!(
                    "{:?} needs macro or weighted averaging",
                    self.kind
                )))
            }
            (false, Averaging::Macro | Averaging::Weighted) => {
                return Err(Error::InvalidSpec(format!(
                    "{:?} does not take an averaging mode",
                    self.kind
                )))
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.zero_division) {
            return Err(Error::InvalidSpec(format!(
                "zero_division must lie in [0, 1], got {}",
                self.zero_division
            )));
        }
        Ok(())
    }

    pub(crate) fn check_task(&self, task: Task) -> Result<()> {
        self.validate()?;
        if self.task() != task {
            return Err(Error::TaskMismatch {
                expected: self.task().as_str(),
                found: task.as_str(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Precision => "precision",
            MetricKind::Recall => "recall",
            MetricKind::F1 => "f1",
            MetricKind::Mcc => "mcc",
            MetricKind::R2 => "r2",
        };
        match self.averaging {
            Averaging::Macro => write!(f, "{kind}-macro"),
            Averaging::Weighted => write!(f, "{kind}-weighted"),
            Averaging::None => f.write_str(kind),
        }
    }
}

impl FromStr for MetricSpec {
    type Err = Error;

    /// Parses names such as `accuracy`, `f1-macro`, `precision_weighted`, `r2`.
    fn from_str(s: &str) -> Result<Self> {
        let normalized = s.trim().to_ascii_lowercase().replace('_', "-");
        let (kind, averaging) = match normalized.split_once('-') {
            Some((k, a)) => (k.to_string(), Some(a.to_string())),
            None => (normalized.clone(), None),
        };
        let kind = match kind.as_str() {
            "accuracy" => MetricKind::Accuracy,
            "precision" => MetricKind::Precision,
            "recall" => MetricKind::Recall,
            "f1" => MetricKind::F1,
            "mcc" => MetricKind::Mcc,
            "r2" => MetricKind::R2,
            _ => return Err(Error::InvalidSpec(format!("unknown metric `{s}`"))),
        };
        let averaging = match averaging.as_deref() {
            None => Averaging::None,
            Some("macro") => Averaging::Macro,
            Some("weighted") => Averaging::Weighted,
            Some(other) => {
                return Err(Error::InvalidSpec(format!(
                    "unknown averaging `{other}` in `{s}`"
                )))
            }
        };
        MetricSpec::new(kind, averaging)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Centralized,
    WeightedAverage,
    Flam,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Centralized => "centralized",
            EvalMode::WeightedAverage => "weighted_average",
            EvalMode::Flam => "flam",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub spec: MetricSpec,
    pub mode: EvalMode,
    pub value: f64,
    pub sample_count: u64,
}

/// Counts `(y_true, y_pred)` pairs into a confusion matrix.
pub fn confusion_from_labels(data: &LabeledPredictions) -> Result<ConfusionMatrix> {
    let LabeledPredictions::Classification(d) = data else {
        return Err(Error::TaskMismatch {
            expected: Task::Classification.as_str(),
            found: data.task().as_str(),
        });
    };
    let mut cm = ConfusionMatrix::zeros(d.class_count);
    for (index, (&t, &p)) in d.y_true.iter().zip(&d.y_pred).enumerate() {
        if t >= d.class_count || p >= d.class_count {
            return Err(Error::LabelOutOfRange {
                index,
                label: t.max(p),
                class_count: d.class_count,
            });
        }
        cm.record(t, p);
    }
    Ok(cm)
}

/// Mean of the targets, or `None` when there are none.
pub fn target_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(compensated_sum(values.iter().copied()) / values.len() as f64)
    }
}

/// Metric over the full vector pair, as if all data sat in one place.
pub fn evaluate_centralized(data: &LabeledPredictions, spec: &MetricSpec) -> Result<MetricValue> {
    spec.check_task(data.task())?;
    if data.is_empty() {
        return Err(Error::UndefinedMetric(format!("{spec} over zero samples")));
    }
    let value = match data {
        LabeledPredictions::Classification(_) => {
            score_confusion(&confusion_from_labels(data)?, spec)?
        }
        LabeledPredictions::Regression(d) => {
            let mean = target_mean(&d.y_true).expect("non-empty");
            let ss_res = compensated_sum(d.y_true.iter().zip(&d.y_pred).map(|(t, p)| (t - p).powi(2)));
            let ss_tot = compensated_sum(d.y_true.iter().map(|t| (t - mean).powi(2)));
            r2_from_sums(ss_res, ss_tot)?
        }
    };
    Ok(MetricValue {
        spec: *spec,
        mode: EvalMode::Centralized,
        value,
        sample_count: data.len() as u64,
    })
}

/// Classification metric from pooled counts.
pub fn metric_from_confusion(cm: &ConfusionMatrix, spec: &MetricSpec) -> Result<MetricValue> {
    spec.check_task(Task::Classification)?;
    Ok(MetricValue {
        spec: *spec,
        mode: EvalMode::Centralized,
        value: score_confusion(cm, spec)?,
        sample_count: cm.total(),
    })
}

pub(crate) fn r2_from_sums(ss_res: f64, ss_tot: f64) -> Result<f64> {
    if ss_tot == 0.0 {
        return Err(Error::DegenerateVariance);
    }
    Ok(1.0 - ss_res / ss_tot)
}

pub(crate) fn score_confusion(cm: &ConfusionMatrix, spec: &MetricSpec) -> Result<f64> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::UndefinedMetric(format!("{spec} over zero samples")));
    }
    let c = cm.class_count();
    let zd = spec.zero_division;
    let value = match spec.kind {
        MetricKind::Accuracy => cm.correct() as f64 / n as f64,
        MetricKind::Mcc => mcc(cm),
        MetricKind::R2 => {
            return Err(Error::TaskMismatch {
                expected: Task::Regression.as_str(),
                found: Task::Classification.as_str(),
            })
        }
        kind => {
            let per_class = |j: usize| -> f64 {
                let tp = cm.true_positives(j);
                match kind {
                    MetricKind::Precision => ratio(tp, cm.predicted(j), zd),
                    MetricKind::Recall => ratio(tp, cm.support(j), zd),
                    _ => ratio(
                        2 * tp,
                        2 * tp + cm.false_positives(j) + cm.false_negatives(j),
                        zd,
                    ),
                }
            };
            match spec.averaging {
                Averaging::Macro => (0..c).map(per_class).sum::<f64>() / c as f64,
                Averaging::Weighted => {
                    (0..c)
                        .map(|j| cm.support(j) as f64 * per_class(j))
                        .sum::<f64>()
                        / n as f64
                }
                Averaging::None => unreachable!("validated above"),
            }
        }
    };
    Ok(value)
}

fn ratio(numerator: u64, denominator: u64, zero_division: f64) -> f64 {
    if denominator == 0 {
        zero_division
    } else {
        numerator as f64 / denominator as f64
    }
}

/// Multiclass R_K statistic. Integer terms are exact; 0 when either marginal
/// is constant.
fn mcc(cm: &ConfusionMatrix) -> f64 {
    let c = cm.class_count();
    let n = cm.total() as i128;
    let correct = cm.correct() as i128;
    let (mut sum_pt, mut sum_p2, mut sum_t2) = (0i128, 0i128, 0i128);
    for j in 0..c {
        let p = cm.predicted(j) as i128;
        let t = cm.support(j) as i128;
        sum_pt += p * t;
        sum_p2 += p * p;
        sum_t2 += t * t;
    }
    let cov = n * correct - sum_pt;
    let pred_var = n * n - sum_p2;
    let true_var = n * n - sum_t2;
    if pred_var == 0 || true_var == 0 {
        return 0.0;
    }
    let value = cov as f64 / ((pred_var as f64) * (true_var as f64)).sqrt();
    value.clamp(-1.0, 1.0)
}
