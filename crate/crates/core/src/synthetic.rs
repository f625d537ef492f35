//! Synthetic federations: a label pool, a partition and per-participant
//! predictions, all derived from one seed.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LabeledPredictions;
use crate::partition::{partition, SkewConfig, SkewKind};
use crate::predictors::{predict_classification, predict_regression, ConfusionKernel, NoisyRegressor};
use crate::rng::{keyed, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    /// Errors spread evenly over the other classes.
    #[default]
    Symmetric,
    /// Each participant's errors land on one class it does not own under
    /// manual skew (class `C - 1 - i` for participant `i`).
    Diverting,
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "symmetric" => Ok(KernelFamily::Symmetric),
            "diverting" => Ok(KernelFamily::Diverting),
            other => Err(Error::InvalidConfig(format!("unknown kernel family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSetup {
    pub samples: usize,
    pub class_count: usize,
    pub skew: SkewConfig,
    /// Accuracy of participant 0's kernel.
    pub accuracy: f64,
    /// Participant `i` gets `accuracy - spread * i / (P - 1)`.
    pub accuracy_spread: f64,
    pub kernel: KernelFamily,
}

impl ClassificationSetup {
    pub fn kernel_for(&self, participant: usize) -> ConfusionKernel {
        let p = self.skew.participants;
        let c = self.class_count;
        let step = if p > 1 { participant as f64 / (p - 1) as f64 } else { 0.0 };
        let accuracy = (self.accuracy - self.accuracy_spread * step).clamp(0.0, 1.0);
        let seed = participant_seed(self.skew.seed, participant);
        match self.kernel {
            KernelFamily::Symmetric => ConfusionKernel::symmetric(c, accuracy, seed),
            KernelFamily::Diverting => {
                ConfusionKernel::diverting(c, accuracy, c - 1 - participant % c, seed)
            }
        }
    }

    pub fn generate(&self) -> Result<Vec<LabeledPredictions>> {
        if self.class_count == 0 {
            return Err(Error::InvalidConfig("class count must be at least 1".into()));
        }
        let labels = uniform_labels(self.samples, self.class_count, self.skew.seed);
        let plan = partition(&labels, Some(self.class_count), &self.skew)?;
        plan.groups()
            .iter()
            .enumerate()
            .map(|(i, group)| {
                let y_true: Vec<usize> = group.iter().map(|&k| labels[k]).collect();
                let y_pred = predict_classification(&y_true, &self.kernel_for(i))?;
                LabeledPredictions::classification(y_true, y_pred, self.class_count)
            })
            .collect()
    }
}

/// Regression federation where participant `i` observes targets centred on
/// `i * station_shift` and the model's bias grows by `bias_spread` per
/// participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSetup {
    pub samples: usize,
    /// Only `IID` and `QS` apply: they decide partition sizes.
    pub skew: SkewConfig,
    pub station_shift: f64,
    pub bias: f64,
    pub bias_spread: f64,
    pub noise_sigma: f64,
}

impl RegressionSetup {
    pub fn generate(&self) -> Result<Vec<LabeledPredictions>> {
        if !matches!(self.skew.kind, SkewKind::Iid | SkewKind::Qs) {
            return Err(Error::InvalidConfig(format!(
                "regression federations support iid or qs sizes, not {}",
                self.skew.kind
            )));
        }
        let plan = partition(&vec![0; self.samples], Some(1), &self.skew)?;
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        plan.sizes()
            .into_iter()
            .enumerate()
            .map(|(i, size)| {
                let seed = participant_seed(self.skew.seed, i);
                let mut rng = keyed(seed, Domain::Synthetic, 0);
                let centre = i as f64 * self.station_shift;
                let y_true: Vec<f64> = (0..size).map(|_| centre + unit.sample(&mut rng)).collect();
                let model = NoisyRegressor {
                    bias: self.bias + self.bias_spread * i as f64,
                    noise_sigma: self.noise_sigma,
                    seed,
                };
                let y_pred = predict_regression(&y_true, &model)?;
                LabeledPredictions::regression(y_true, y_pred)
            })
            .collect()
    }
}

/// `n` labels drawn uniformly from `[0, class_count)`.
pub fn uniform_labels(n: usize, class_count: usize, seed: u64) -> Vec<usize> {
    let mut rng = keyed(seed, Domain::Synthetic, u64::MAX);
    (0..n).map(|_| rng.random_range(0..class_count)).collect()
}

pub(crate) fn participant_seed(seed: u64, participant: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D)
        .wrapping_add(participant as u64 + 1)
}
