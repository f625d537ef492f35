//! Stand-ins for a trained global model, plus ingestion of prediction files.
//!
//! Only `(y_true, y_pred)` pairs enter the evaluation, so a row-stochastic
//! confusion kernel (classification) or a biased noisy copy of the target
//! (regression) is enough to exercise every code path. Giving participants
//! different kernels models a global model that behaves differently on each
//! participant's data.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{LabeledPredictions, Task};
use crate::rng::{categorical, keyed, Domain};

/// C×C row-stochastic matrix: row `j` is the distribution of the predicted
/// class for a sample whose true class is `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionKernel {
    rows: Vec<Vec<f64>>,
    seed: u64,
}

impl ConfusionKernel {
    pub fn new(rows: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        let c = rows.len();
        if c == 0 {
            return Err(Error::InvalidKernel("kernel has no rows".into()));
        }
        for (j, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::InvalidKernel(format!(
                    "row {j} has {} entries, expected {c}",
                    row.len()
                )));
            }
            if row.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                return Err(Error::InvalidKernel(format!("row {j} has a negative or non-finite entry")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidKernel(format!("row {j} sums to {total}, not 1")));
            }
        }
        Ok(Self { rows, seed })
    }

    pub fn identity(class_count: usize, seed: u64) -> Self {
        Self::symmetric(class_count, 1.0, seed)
    }

    pub fn uniform(class_count: usize, seed: u64) -> Self {
        Self {
            rows: vec![vec![1.0 / class_count as f64; class_count]; class_count],
            seed,
        }
    }

    /// Correct with probability `accuracy`, otherwise uniform over the other classes.
    pub fn symmetric(class_count: usize, accuracy: f64, seed: u64) -> Self {
        let accuracy = if class_count == 1 { 1.0 } else { accuracy.clamp(0.0, 1.0) };
        let off = if class_count > 1 {
            (1.0 - accuracy) / (class_count - 1) as f64
        } else {
            0.0
        };
        let rows = (0..class_count)
            .map(|j| (0..class_count).map(|k| if j == k { accuracy } else { off }).collect())
            .collect();
        Self { rows, seed }
    }

    /// Correct with probability `accuracy`; every error lands on `sink`
    /// (and, for samples of `sink` itself, on the next class).
    pub fn diverting(class_count: usize, accuracy: f64, sink: usize, seed: u64) -> Self {
        if class_count == 1 {
            return Self::identity(1, seed);
        }
        let accuracy = accuracy.clamp(0.0, 1.0);
        let sink = sink % class_count;
        let rows = (0..class_count)
            .map(|j| {
                let target = if j == sink { (sink + 1) % class_count } else { sink };
                let mut row = vec![0.0; class_count];
                row[j] = accuracy;
                row[target] += 1.0 - accuracy;
                row
            })
            .collect();
        Self { rows, seed }
    }

    pub fn class_count(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyRegressor {
    pub bias: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Samples `y_pred[i]` from the kernel row of `labels[i]`.
pub fn predict_classification(labels: &[usize], kernel: &ConfusionKernel) -> Result<Vec<usize>> {
    let c = kernel.class_count();
    let mut rng = keyed(kernel.seed, Domain::Kernel, 0);
    labels
        .iter()
        .enumerate()
        .map(|(index, &label)| {
            if label >= c {
                return Err(Error::LabelOutOfRange {
                    index,
                    label,
                    class_count: c,
                });
            }
            Ok(categorical(&mut rng, &kernel.rows[label]).expect("rows sum to one"))
        })
        .collect()
}

/// `y_pred = y_true + bias + N(0, sigma²)`.
pub fn predict_regression(y_true: &[f64], model: &NoisyRegressor) -> Result<Vec<f64>> {
    if !(model.noise_sigma >= 0.0 && model.noise_sigma.is_finite()) || !model.bias.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "regressor needs finite bias and sigma >= 0, got bias {} sigma {}",
            model.bias, model.noise_sigma
        )));
    }
    let noise = Normal::new(0.0, model.noise_sigma).expect("sigma validated");
    let mut rng = keyed(model.seed, Domain::Noise, 0);
    Ok(y_true
        .iter()
        .map(|&y| {
            let e = if model.noise_sigma == 0.0 { 0.0 } else { noise.sample(&mut rng) };
            y + model.bias + e
        })
        .collect())
}

/// Reads a `participant_id,y_true,y_pred` file into one dataset per
/// participant, ordered by id.
pub fn ingest_predictions(path: &Path, task: Task, class_count: Option<usize>) -> Result<Vec<LabeledPredictions>> {
    Ok(ingest_predictions_by_id(path, task, class_count)?
        .into_iter()
        .map(|(_, data)| data)
        .collect())
}

pub fn ingest_predictions_by_id(
    path: &Path,
    task: Task,
    class_count: Option<usize>,
) -> Result<Vec<(u32, LabeledPredictions)>> {
    let file = File::open(path)?;
    read_predictions(BufReader::new(file), task, class_count)
}

enum Columns {
    Labels(Vec<usize>, Vec<usize>),
    Values(Vec<f64>, Vec<f64>),
}

pub fn read_predictions<R: Read>(
    reader: R,
    task: Task,
    class_count: Option<usize>,
) -> Result<Vec<(u32, LabeledPredictions)>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut groups: BTreeMap<u32, Columns> = BTreeMap::new();
    let mut max_label = None;
    let mut data_row = 0usize;

    for (k, record) in r.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(k as u64 + 1, |p| p.line());
        if k == 0 && record.get(0) == Some("participant_id") {
            if record.iter().collect::<Vec<_>>() != ["participant_id", "y_true", "y_pred"] {
                return Err(Error::Parse {
                    line,
                    message: "expected header `participant_id,y_true,y_pred`".into(),
                });
            }
            continue;
        }
        if record.len() != 3 {
            return Err(Error::Parse {
                line,
                message: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let bad = |what: &str, field: &str| Error::Parse {
            line,
            message: format!("invalid {what} `{field}`"),
        };
        let id: u32 = record[0].parse().map_err(|_| bad("participant_id", &record[0]))?;
        match task {
            Task::Classification => {
                let t: usize = record[1].parse().map_err(|_| bad("class label", &record[1]))?;
                let p: usize = record[2].parse().map_err(|_| bad("class label", &record[2]))?;
                if let Some(c) = class_count {
                    if let Some(label) = [t, p].into_iter().find(|&l| l >= c) {
                        return Err(Error::LabelOutOfRange {
                            index: data_row,
                            label,
                            class_count: c,
                        });
                    }
                }
                max_label = max_label.max(Some(t.max(p)));
                match groups
                    .entry(id)
                    .or_insert_with(|| Columns::Labels(Vec::new(), Vec::new()))
                {
                    Columns::Labels(yt, yp) => {
                        yt.push(t);
                        yp.push(p);
                    }
                    Columns::Values(..) => unreachable!(),
                }
            }
            Task::Regression => {
                let parse = |field: &str| -> Result<f64> {
                    field
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| bad("value", field))
                };
                let t = parse(&record[1])?;
                let p = parse(&record[2])?;
                match groups
                    .entry(id)
                    .or_insert_with(|| Columns::Values(Vec::new(), Vec::new()))
                {
                    Columns::Values(yt, yp) => {
                        yt.push(t);
                        yp.push(p);
                    }
                    Columns::Labels(..) => unreachable!(),
                }
            }
        }
        data_row += 1;
    }

    if groups.is_empty() {
        return Err(Error::EmptyFederation);
    }
    let c = class_count.unwrap_or_else(|| max_label.map_or(1, |m| m + 1));
    groups
        .into_iter()
        .map(|(id, columns)| {
            let data = match columns {
                Columns::Labels(t, p) => LabeledPredictions::classification(t, p, c)?,
                Columns::Values(t, p) => LabeledPredictions::regression(t, p)?,
            };
            Ok((id, data))
        })
        .collect()
}

/// Writes a federation as a prediction file; participant ids are the
/// partition indices.
pub fn write_predictions<W: Write>(writer: W, federation: &[LabeledPredictions]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["participant_id", "y_true", "y_pred"])?;
    for (id, part) in federation.iter().enumerate() {
        match part {
            LabeledPredictions::Classification(d) => {
                for (t, p) in d.y_true().iter().zip(d.y_pred()) {
                    w.write_record([id.to_string(), t.to_string(), p.to_string()])?;
                }
            }
            LabeledPredictions::Regression(d) => {
                for (t, p) in d.y_true().iter().zip(d.y_pred()) {
                    w.write_record([id.to_string(), t.to_string(), p.to_string()])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}
