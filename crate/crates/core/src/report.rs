//! Tabular output: deviation reports, metric value lists and sweep tables,
//! each as CSV and as a JSON array of the same records.
//!
//! Deviation report columns, in order:
//!
//! | column             | content                                              |
//! |--------------------|------------------------------------------------------|
//! | `schema_version`   | [`REPORT_SCHEMA_VERSION`]                            |
//! | `metric`           | metric name, e.g. `f1-macro`                         |
//! | `zero_division`    | value a per-class 0/0 takes                          |
//! | `scheme`           | `sample-count` or `uniform`                          |
//! | `participants`     | number of partitions, empty ones included            |
//! | `samples`          | pooled sample count                                  |
//! | `centralized`      | metric on the pooled data                            |
//! | `weighted_average` | weighted mean of local metrics                       |
//! | `flam`             | metric recombined from summed measures               |
//! | `abs_dev_weighted` | `abs(weighted_average - centralized)`                |
//! | `abs_dev_flam`     | `abs(flam - centralized)`                            |
//! | `local_values`     | per-participant metric, `;`-separated, empty if none |
//! | `error`            | why a value is missing                               |
//!
//! Missing numbers are empty cells in CSV and `null` in JSON. Floats are
//! written in shortest round-trip form so reruns are byte-identical.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::baseline::{build_deviation_report, DeviationReport, DeviationRow, WeightScheme};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{EvalMode, LabeledPredictions, MetricSpec, MetricValue};
use crate::partition::{SkewConfig, SkewKind};
use crate::synthetic::{ClassificationSetup, RegressionSetup};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRecord {
    pub schema_version: u32,
    pub metric: String,
    pub zero_division: f64,
    pub scheme: String,
    pub participants: usize,
    pub samples: u64,
    pub centralized: Option<f64>,
    pub weighted_average: Option<f64>,
    pub flam: Option<f64>,
    pub abs_dev_weighted: Option<f64>,
    pub abs_dev_flam: Option<f64>,
    pub local_values: String,
    pub error: Option<String>,
}

impl From<&DeviationRow> for ReportRecord {
    fn from(row: &DeviationRow) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            metric: row.metric.to_string(),
            zero_division: row.metric.zero_division,
            scheme: row.scheme.to_string(),
            participants: row.participants,
            samples: row.samples,
            centralized: row.centralized,
            weighted_average: row.weighted_average,
            flam: row.flam,
            abs_dev_weighted: row.abs_dev_weighted,
            abs_dev_flam: row.abs_dev_flam,
            local_values: row
                .local_values
                .iter()
                .map(|v| v.map(|x| x.to_string()).unwrap_or_default())
                .collect::<Vec<_>>()
                .join(";"),
            error: row.error.clone(),
        }
    }
}

impl TryFrom<ReportRecord> for DeviationRow {
    type Error = Error;

    fn try_from(rec: ReportRecord) -> Result<Self> {
        if rec.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "report schema version {} is not supported (expected {REPORT_SCHEMA_VERSION})",
                rec.schema_version
            )));
        }
        let metric = rec.metric.parse::<MetricSpec>()?.with_zero_division(rec.zero_division);
        metric.validate()?;
        let local_values = if rec.participants == 0 {
            Vec::new()
        } else {
            rec.local_values
                .split(';')
                .map(|cell| match cell.trim() {
                    "" => Ok(None),
                    v => v
                        .parse::<f64>()
                        .map(Some)
                        .map_err(|e| Error::InvalidConfig(format!("local value `{v}`: {e}"))),
                })
                .collect::<Result<Vec<_>>>()?
        };
        if local_values.len() != rec.participants {
            return Err(Error::InvalidConfig(format!(
                "{} local values for {} participants",
                local_values.len(),
                rec.participants
            )));
        }
        Ok(DeviationRow {
            metric,
            scheme: rec.scheme.parse()?,
            participants: rec.participants,
            samples: rec.samples,
            centralized: rec.centralized,
            weighted_average: rec.weighted_average,
            flam: rec.flam,
            abs_dev_weighted: rec.abs_dev_weighted,
            abs_dev_flam: rec.abs_dev_flam,
            local_values,
            error: rec.error,
        })
    }
}

/// One metric value from a single evaluation mode. `scheme` is only set for
/// weighted-average values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueRecord {
    pub metric: String,
    pub mode: String,
    pub scheme: Option<String>,
    pub value: f64,
    pub sample_count: u64,
}

impl From<&MetricValue> for ValueRecord {
    fn from(v: &MetricValue) -> Self {
        Self {
            metric: v.spec.to_string(),
            mode: v.mode.to_string(),
            scheme: None,
            value: v.value,
            sample_count: v.sample_count,
        }
    }
}

pub const VALUE_COLUMNS: [&str; 5] = ["metric", "mode", "scheme", "value", "sample_count"];

/// One sweep cell for one (metric, scheme) pair. `deviation` is
/// `abs(weighted - centralized)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRecord {
    pub skew: String,
    pub alpha: f64,
    pub seed: u64,
    pub metric: String,
    pub scheme: String,
    pub centralized: Option<f64>,
    pub weighted: Option<f64>,
    pub flam: Option<f64>,
    pub deviation: Option<f64>,
}

/// Writes `columns` as the header even when `records` is empty; `columns`
/// must list the fields of `T` in declaration order.
pub fn write_csv<W: Write, T: Serialize>(writer: W, columns: &[&str], records: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(columns)?;
    for record in records {
        w.serialize(record)?;
    }
    w.flush()?;
    Ok(())
}

/// Same records as a pretty-printed JSON array.
pub fn write_json<W: Write, T: Serialize>(mut writer: W, records: &[T]) -> Result<()> {
    serde_json::to_writer_pretty(&mut writer, records)?;
    writer.write_all(b"\n")?;
    Ok(())
}

/// Reads records whose header must name exactly the fields of `T`.
pub fn read_csv<R: Read, T: DeserializeOwned>(reader: R, columns: &[&str]) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let known: BTreeSet<&str> = columns.iter().copied().collect();
    if let Some(unknown) = header.iter().find(|h| !known.contains(h.as_str())) {
        return Err(Error::Parse {
            line: 1,
            message: format!("unknown column `{unknown}`"),
        });
    }
    if let Some(missing) = columns.iter().find(|c| !header.iter().any(|h| h == *c)) {
        return Err(Error::Parse {
            line: 1,
            message: format!("missing column `{missing}`"),
        });
    }
    r.deserialize()
        .map(|rec| {
            rec.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })
        })
        .collect()
}

pub const REPORT_COLUMNS: [&str; 13] = [
    "schema_version",
    "metric",
    "zero_division",
    "scheme",
    "participants",
    "samples",
    "centralized",
    "weighted_average",
    "flam",
    "abs_dev_weighted",
    "abs_dev_flam",
    "local_values",
    "error",
];

pub const SWEEP_COLUMNS: [&str; 9] = [
    "skew",
    "alpha",
    "seed",
    "metric",
    "scheme",
    "centralized",
    "weighted",
    "flam",
    "deviation",
];

pub fn report_records(report: &DeviationReport) -> Vec<ReportRecord> {
    report.rows.iter().map(ReportRecord::from).collect()
}

pub fn write_report_csv<W: Write>(writer: W, report: &DeviationReport) -> Result<()> {
    write_csv(writer, &REPORT_COLUMNS, &report_records(report))
}

pub fn write_report_json<W: Write>(writer: W, report: &DeviationReport) -> Result<()> {
    write_json(writer, &report_records(report))
}

/// Rejects unknown or missing columns and other schema versions.
pub fn read_report_csv<R: Read>(reader: R) -> Result<DeviationReport> {
    let records: Vec<ReportRecord> = read_csv(reader, &REPORT_COLUMNS)?;
    let rows = records
        .into_iter()
        .map(DeviationRow::try_from)
        .collect::<Result<Vec<_>>>()?;
    Ok(DeviationReport { rows })
}

pub fn read_report_json<R: Read>(reader: R) -> Result<DeviationReport> {
    let records: Vec<ReportRecord> = serde_json::from_reader(reader)?;
    let rows = records
        .into_iter()
        .map(DeviationRow::try_from)
        .collect::<Result<Vec<_>>>()?;
    Ok(DeviationReport { rows })
}

pub fn value_records(values: &[MetricValue]) -> Vec<ValueRecord> {
    values.iter().map(ValueRecord::from).collect()
}

/// Synthetic federation family a sweep varies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum SweepBase {
    Classification(ClassificationSetup),
    Regression(RegressionSetup),
}

impl SweepBase {
    fn skew(&self) -> &SkewConfig {
        match self {
            SweepBase::Classification(s) => &s.skew,
            SweepBase::Regression(s) => &s.skew,
        }
    }

    /// The base setup with the swept alpha and seed applied. `LS` and `LQS`
    /// sweep the label alpha, `QS` the quantity alpha; `IID` and `MS` only
    /// vary the seed.
    pub fn cell(&self, alpha: f64, seed: u64) -> Self {
        let apply = |skew: &SkewConfig| {
            let mut skew = skew.clone();
            skew.seed = seed;
            match skew.kind {
                SkewKind::Ls | SkewKind::Lqs => skew.alpha_label = Some(alpha),
                SkewKind::Qs => skew.alpha_quantity = Some(alpha),
                SkewKind::Iid | SkewKind::Ms => {}
            }
            skew
        };
        match self {
            SweepBase::Classification(s) => SweepBase::Classification(ClassificationSetup {
                skew: apply(&s.skew),
                ..s.clone()
            }),
            SweepBase::Regression(s) => SweepBase::Regression(RegressionSetup {
                skew: apply(&s.skew),
                ..s.clone()
            }),
        }
    }

    pub fn generate(&self) -> Result<Vec<LabeledPredictions>> {
        match self {
            SweepBase::Classification(s) => s.generate(),
            SweepBase::Regression(s) => s.generate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub base: SweepBase,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub specs: Vec<MetricSpec>,
    pub schemes: Vec<WeightScheme>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub alpha: f64,
    pub seed: u64,
    pub report: DeviationReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub skew: SkewKind,
    /// Alpha-major, then seed, in the configured order.
    pub cells: Vec<SweepCell>,
}

impl SweepOutcome {
    pub fn records(&self) -> Vec<SweepRecord> {
        let skew = self.skew.to_string();
        self.cells
            .iter()
            .flat_map(|cell| {
                let skew = skew.clone();
                cell.report.rows.iter().map(move |row| SweepRecord {
                    skew: skew.clone(),
                    alpha: cell.alpha,
                    seed: cell.seed,
                    metric: row.metric.to_string(),
                    scheme: row.scheme.to_string(),
                    centralized: row.centralized,
                    weighted: row.weighted_average,
                    flam: row.flam,
                    deviation: row.abs_dev_weighted,
                })
            })
            .collect()
    }

    /// Mean weighted-average deviation over the seeds of one alpha, skipping
    /// cells where it is undefined. `None` if no cell has a value.
    pub fn mean_deviation(&self, alpha: f64, metric: &MetricSpec, scheme: WeightScheme) -> Option<f64> {
        let values: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.alpha.to_bits() == alpha.to_bits())
            .filter_map(|c| c.report.row(metric, scheme).and_then(|r| r.abs_dev_weighted))
            .collect();
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }

    pub fn max_flam_deviation(&self) -> f64 {
        self.cells
            .iter()
            .map(|c| c.report.max_flam_deviation())
            .fold(0.0, f64::max)
    }
}

/// Runs every (alpha, seed) cell. Cells are independent and may run in
/// parallel; the output order does not depend on `exec`.
pub fn run_sweep(config: &SweepConfig, exec: Execution) -> Result<SweepOutcome> {
    if config.seeds.is_empty() {
        return Err(Error::InvalidConfig("a sweep needs at least one seed".into()));
    }
    if config.alphas.is_empty() {
        return Err(Error::InvalidConfig("a sweep needs at least one alpha".into()));
    }
    if let Some(a) = config.alphas.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
        return Err(Error::InvalidConfig(format!("alpha must be positive and finite, got {a}")));
    }
    for spec in &config.specs {
        spec.validate()?;
    }
    let grid: Vec<(f64, u64)> = config
        .alphas
        .iter()
        .flat_map(|&a| config.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let cells = exec
        .map(&grid, |&(alpha, seed)| {
            let partitions = config.base.cell(alpha, seed).generate()?;
            let report = build_deviation_report(&partitions, &config.specs, &config.schemes)?;
            Ok(SweepCell { alpha, seed, report })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepOutcome {
        skew: config.base.skew().kind,
        cells,
    })
}

/// Values of one evaluation mode: one record per metric, or per (metric,
/// scheme) for the weighted average.
pub fn mode_values(report: &DeviationReport, mode: EvalMode) -> Vec<ValueRecord> {
    let mut seen = BTreeSet::new();
    report
        .rows
        .iter()
        .filter_map(|row| {
            let value = match mode {
                EvalMode::Centralized => row.centralized,
                EvalMode::Flam => row.flam,
                EvalMode::WeightedAverage => row.weighted_average,
            }?;
            let metric = row.metric.to_string();
            let weighted = mode == EvalMode::WeightedAverage;
            if !weighted && !seen.insert(metric.clone()) {
                return None;
            }
            Some(ValueRecord {
                metric,
                mode: mode.to_string(),
                scheme: weighted.then(|| row.scheme.to_string()),
                value,
                sample_count: row.samples,
            })
        })
        .collect()
}
