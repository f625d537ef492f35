//! Participant-based evaluation: each participant computes the metric on its
//! own data and the coordinator takes a weighted average of those values.
//!
//! This is the aggregation most FL frameworks ship. For accuracy and weighted
//! recall with sample-count weights it coincides with pooled evaluation; for
//! every other metric it drifts as partitions become less alike. The
//! [`DeviationReport`] puts the three evaluation modes side by side.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::am::flam_evaluate;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{
    evaluate_centralized, federation_shape, EvalMode, LabeledPredictions, MetricSpec, MetricValue,
};
use crate::sum::NeumaierSum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    /// λ_i = |D_i| / |D_all|
    SampleCount,
    /// λ_i = 1 / P
    Uniform,
}

impl WeightScheme {
    pub const ALL: [WeightScheme; 2] = [WeightScheme::SampleCount, WeightScheme::Uniform];

    /// Normalized weights for the given (non-empty) partition sizes.
    pub fn weights(self, sizes: &[u64]) -> Vec<f64> {
        match self {
            WeightScheme::SampleCount => {
                let total: u64 = sizes.iter().sum();
                sizes.iter().map(|&n| n as f64 / total as f64).collect()
            }
            WeightScheme::Uniform => vec![1.0 / sizes.len() as f64; sizes.len()],
        }
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightScheme::SampleCount => "sample-count",
            WeightScheme::Uniform => "uniform",
        })
    }
}

impl FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "sample-count" | "samples" => Ok(WeightScheme::SampleCount),
            "uniform" => Ok(WeightScheme::Uniform),
            other => Err(Error::InvalidConfig(format!("unknown weight scheme `{other}`"))),
        }
    }
}

/// Metric values computed on each participant's own data.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalMetrics {
    /// `(participant index, value)` for every non-empty partition.
    pub values: Vec<(usize, MetricValue)>,
    /// Indices of empty partitions that were left out.
    pub skipped: Vec<usize>,
}

impl LocalMetrics {
    /// One slot per participant, `None` where the partition was skipped.
    pub fn per_participant(&self, participants: usize) -> Vec<Option<f64>> {
        let mut out = vec![None; participants];
        for (i, v) in &self.values {
            out[*i] = Some(v.value);
        }
        out
    }
}

pub fn local_metrics(partitions: &[LabeledPredictions], spec: &MetricSpec) -> Result<LocalMetrics> {
    local_metrics_with(Execution::default(), partitions, spec)
}

pub fn local_metrics_with(
    exec: Execution,
    partitions: &[LabeledPredictions],
    spec: &MetricSpec,
) -> Result<LocalMetrics> {
    federation_shape(partitions)?;
    let evaluated = exec.map_indexed(partitions.len(), |i| {
        let part = &partitions[i];
        if part.is_empty() {
            None
        } else {
            Some(evaluate_centralized(part, spec))
        }
    });
    let mut values = Vec::new();
    let mut skipped = Vec::new();
    for (i, result) in evaluated.into_iter().enumerate() {
        match result {
            Some(value) => values.push((i, value?)),
            None => {
                log::debug!("participant {i} holds no samples; left out of the weighted average");
                skipped.push(i);
            }
        }
    }
    Ok(LocalMetrics { values, skipped })
}

/// Σ λ_i · local_metric_i over non-empty partitions.
pub fn weighted_average_evaluate(
    partitions: &[LabeledPredictions],
    spec: &MetricSpec,
    scheme: WeightScheme,
) -> Result<MetricValue> {
    let locals = local_metrics(partitions, spec)?;
    combine_locals(&locals, spec, scheme)
}

fn combine_locals(locals: &LocalMetrics, spec: &MetricSpec, scheme: WeightScheme) -> Result<MetricValue> {
    if locals.values.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "{spec}: every partition is empty"
        )));
    }
    let sizes: Vec<u64> = locals.values.iter().map(|(_, v)| v.sample_count).collect();
    let weights = scheme.weights(&sizes);
    let value = locals
        .values
        .iter()
        .zip(&weights)
        .map(|((_, v), w)| w * v.value)
        .sum::<NeumaierSum>()
        .value();
    Ok(MetricValue {
        spec: *spec,
        mode: EvalMode::WeightedAverage,
        value,
        sample_count: sizes.iter().sum(),
    })
}

/// One (metric, weight scheme) comparison of the three evaluation modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationRow {
    pub metric: MetricSpec,
    pub scheme: WeightScheme,
    pub participants: usize,
    pub samples: u64,
    pub centralized: Option<f64>,
    pub weighted_average: Option<f64>,
    pub flam: Option<f64>,
    pub abs_dev_weighted: Option<f64>,
    pub abs_dev_flam: Option<f64>,
    pub local_values: Vec<Option<f64>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DeviationReport {
    pub rows: Vec<DeviationRow>,
}

impl DeviationReport {
    /// Largest |flam − centralized| over rows where both exist.
    pub fn max_flam_deviation(&self) -> f64 {
        self.rows
            .iter()
            .filter_map(|r| r.abs_dev_flam)
            .fold(0.0, f64::max)
    }

    pub fn max_weighted_deviation(&self) -> f64 {
        self.rows
            .iter()
            .filter_map(|r| r.abs_dev_weighted)
            .fold(0.0, f64::max)
    }

    pub fn row(&self, metric: &MetricSpec, scheme: WeightScheme) -> Option<&DeviationRow> {
        self.rows
            .iter()
            .find(|r| &r.metric == metric && r.scheme == scheme)
    }
}

/// Runs centralized, weighted-average and FLAM evaluation for every
/// `(spec, scheme)` pair. Metric failures are recorded on the row.
pub fn build_deviation_report(
    partitions: &[LabeledPredictions],
    specs: &[MetricSpec],
    schemes: &[WeightScheme],
) -> Result<DeviationReport> {
    federation_shape(partitions)?;
    let pooled = LabeledPredictions::concat(partitions)?;
    let participants = partitions.len();
    let samples = pooled.len() as u64;

    let mut rows = Vec::with_capacity(specs.len() * schemes.len());
    for spec in specs {
        let centralized = evaluate_centralized(&pooled, spec);
        let flam = flam_evaluate(partitions, spec);
        let locals = local_metrics(partitions, spec);
        for &scheme in schemes {
            let weighted = locals
                .as_ref()
                .map_err(|e| e.to_string())
                .and_then(|l| combine_locals(l, spec, scheme).map_err(|e| e.to_string()));
            let c = centralized.as_ref().ok().map(|v| v.value);
            let f = flam.as_ref().ok().map(|v| v.value);
            let w = weighted.as_ref().ok().map(|v| v.value);
            let error = [
                centralized.as_ref().err().map(|e| format!("centralized: {e}")),
                flam.as_ref().err().map(|e| format!("flam: {e}")),
                weighted.as_ref().err().map(|e| format!("weighted_average: {e}")),
            ]
            .into_iter()
            .flatten()
            .collect::<Vec<_>>();
            rows.push(DeviationRow {
                metric: *spec,
                scheme,
                participants,
                samples,
                centralized: c,
                weighted_average: w,
                flam: f,
                abs_dev_weighted: c.zip(w).map(|(c, w)| (w - c).abs()),
                abs_dev_flam: c.zip(f).map(|(c, f)| (f - c).abs()),
                local_values: locals
                    .as_ref()
                    .map(|l| l.per_participant(participants))
                    .unwrap_or_else(|_| vec![None; participants]),
                error: (!error.is_empty()).then(|| error.join("; ")),
            });
        }
    }
    Ok(DeviationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Averaging;

    fn cls(t: &[usize], p: &[usize]) -> LabeledPredictions {
        LabeledPredictions::classification(t.to_vec(), p.to_vec(), 2).unwrap()
    }

    fn reg(t: &[f64], p: &[f64]) -> LabeledPredictions {
        LabeledPredictions::regression(t.to_vec(), p.to_vec()).unwrap()
    }

    fn running() -> Vec<LabeledPredictions> {
        vec![cls(&[0, 0, 0, 0], &[0, 0, 0, 1]), cls(&[1, 1], &[1, 1])]
    }

    fn running_regression() -> Vec<LabeledPredictions> {
        vec![reg(&[1.0, 2.0], &[1.0, 2.0]), reg(&[3.0, 4.0], &[4.0, 3.0])]
    }

    #[test]
    fn local_values_running_example() {
        let f1 = local_metrics(&running(), &MetricSpec::f1(Averaging::Macro)).unwrap();
        assert!((f1.values[0].1.value - 3.0 / 7.0).abs() < 1e-15);
        assert_eq!(f1.values[1].1.value, 0.5);
        let acc = local_metrics(&running(), &MetricSpec::accuracy()).unwrap();
        assert_eq!(acc.values[0].1.value, 0.75);
    }

    #[test]
    fn weighted_average_running_example() {
        let parts = running();
        let f1 = weighted_average_evaluate(&parts, &MetricSpec::f1(Averaging::Macro), WeightScheme::SampleCount)
            .unwrap();
        let expected = (4.0 / 6.0) * (3.0 / 7.0) + (2.0 / 6.0) * 0.5;
        assert!((f1.value - expected).abs() < 1e-15);
        assert!((f1.value - 0.452381).abs() < 1e-6);
        assert_eq!(f1.mode, EvalMode::WeightedAverage);

        let acc = weighted_average_evaluate(&parts, &MetricSpec::accuracy(), WeightScheme::SampleCount)
            .unwrap();
        assert!((acc.value - 5.0 / 6.0).abs() < 1e-15);

        let r2 = weighted_average_evaluate(&running_regression(), &MetricSpec::r2(), WeightScheme::SampleCount)
            .unwrap();
        assert!((r2.value + 1.0).abs() < 1e-15);
    }

    #[test]
    fn weights_are_normalized() {
        for scheme in WeightScheme::ALL {
            let w = scheme.weights(&[3, 1, 7, 9]);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&x| x >= 0.0));
        }
        assert_eq!(WeightScheme::SampleCount.weights(&[5, 5]), WeightScheme::Uniform.weights(&[5, 5]));
    }

    #[test]
    fn empty_partitions_are_skipped_and_renormalized() {
        let mut parts = running();
        parts.push(cls(&[], &[]));
        let locals = local_metrics(&parts, &MetricSpec::accuracy()).unwrap();
        assert_eq!(locals.skipped, vec![2]);
        let uniform = weighted_average_evaluate(&parts, &MetricSpec::accuracy(), WeightScheme::Uniform).unwrap();
        assert!((uniform.value - 0.875).abs() < 1e-15);

        let all_empty = vec![cls(&[], &[]), cls(&[], &[])];
        assert!(matches!(
            weighted_average_evaluate(&all_empty, &MetricSpec::accuracy(), WeightScheme::Uniform),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn report_running_example() {
        let specs = [MetricSpec::accuracy(), MetricSpec::f1(Averaging::Macro)];
        let report = build_deviation_report(&running(), &specs, &[WeightScheme::SampleCount]).unwrap();
        let acc = report.row(&specs[0], WeightScheme::SampleCount).unwrap();
        assert!(acc.abs_dev_weighted.unwrap() < 1e-15);
        assert_eq!(acc.abs_dev_flam, Some(0.0));
        let f1 = report.row(&specs[1], WeightScheme::SampleCount).unwrap();
        let expected = (6.0 / 7.0 + 0.8) / 2.0 - ((4.0 / 6.0) * (3.0 / 7.0) + (2.0 / 6.0) * 0.5);
        assert!((f1.abs_dev_weighted.unwrap() - expected).abs() < 1e-12);
        assert!((f1.abs_dev_weighted.unwrap() - 0.376).abs() < 1e-3);
        assert_eq!(f1.abs_dev_flam, Some(0.0));
        assert_eq!(report.max_flam_deviation(), 0.0);
        assert_eq!(f1.local_values.len(), 2);
    }

    #[test]
    fn single_participant_report_has_no_deviation() {
        let whole = vec![cls(&[0, 1, 1, 0, 1, 0], &[1, 1, 0, 0, 1, 0])];
        let report = build_deviation_report(&whole, &MetricSpec::all_classification(), &WeightScheme::ALL)
            .unwrap();
        for row in &report.rows {
            assert_eq!(row.abs_dev_weighted, Some(0.0), "{}", row.metric);
            assert_eq!(row.abs_dev_flam, Some(0.0));
        }
    }

    #[test]
    fn report_records_metric_errors() {
        // second participant has a constant target: its local R² is undefined
        let parts = vec![reg(&[1.0, 2.0], &[1.0, 2.0]), reg(&[3.0, 3.0], &[3.0, 3.5])];
        let report = build_deviation_report(&parts, &[MetricSpec::r2()], &[WeightScheme::SampleCount]).unwrap();
        let row = &report.rows[0];
        assert!(row.centralized.is_some());
        assert!(row.flam.is_some());
        assert!(row.weighted_average.is_none());
        assert!(row.error.as_deref().unwrap().contains("weighted_average"));
    }

    #[test]
    fn scheme_names() {
        assert_eq!("sample-count".parse::<WeightScheme>().unwrap(), WeightScheme::SampleCount);
        assert_eq!("UNIFORM".parse::<WeightScheme>().unwrap(), WeightScheme::Uniform);
        assert_eq!(WeightScheme::SampleCount.to_string(), "sample-count");
        assert!("median".parse::<WeightScheme>().is_err());
    }
}
