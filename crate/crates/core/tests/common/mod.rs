//! Random federations shared by the integration and acceptance tests.
#![allow(dead_code)]

use flam_core::am::{GlobalStatistics, LocalStatistic};
use flam_core::federation::{Body, Registration, RoundMessage};
use flam_core::partition::partition;
use flam_core::predictors::{predict_classification, predict_regression, ConfusionKernel, NoisyRegressor};
use flam_core::{
    AggregatableMeasure, ClassificationAM, ConfusionMatrix, EvalMode, LabeledPredictions, MeanStatistic,
    MetricSpec, MetricValue, RegressionAM, SkewConfig, SkewKind, StatisticId, Task,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// How a random federation's partitions were produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Skew(SkewKind),
    /// Each participant draws its own size, so empty participants are common.
    Direct,
}

#[derive(Debug, Clone)]
pub struct Federation {
    pub task: Task,
    pub class_count: usize,
    pub layout: Layout,
    pub partitions: Vec<LabeledPredictions>,
}

impl Federation {
    pub fn specs(&self) -> Vec<MetricSpec> {
        match self.task {
            Task::Classification => MetricSpec::all_classification(),
            Task::Regression => vec![MetricSpec::r2()],
        }
    }

    pub fn pooled(&self) -> LabeledPredictions {
        LabeledPredictions::concat(&self.partitions).unwrap()
    }
}

pub const LAYOUTS: [Layout; 6] = [
    Layout::Skew(SkewKind::Iid),
    Layout::Skew(SkewKind::Qs),
    Layout::Skew(SkewKind::Ls),
    Layout::Skew(SkewKind::Lqs),
    Layout::Skew(SkewKind::Ms),
    Layout::Direct,
];

/// Federation `case` of a reproducible family. Participants are 1..=8,
/// classes 2..=20, samples per participant up to `max_per_participant`.
pub fn random_federation(case: u64, max_per_participant: usize) -> Federation {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF1A3 ^ case.wrapping_mul(0x9E37_79B9));
    let task = if case.is_multiple_of(2) { Task::Classification } else { Task::Regression };
    let layout = LAYOUTS[(case / 2) as usize % LAYOUTS.len()];
    let class_count = rng.random_range(2..=20);
    let mut participants = rng.random_range(1..=8usize);

    let (labels, groups) = match layout {
        Layout::Direct => {
            let mut labels = Vec::new();
            let mut groups = Vec::new();
            for _ in 0..participants {
                let n = rng.random_range(0..=max_per_participant);
                let start = labels.len();
                labels.extend((0..n).map(|_| rng.random_range(0..class_count)));
                groups.push((start..labels.len()).collect::<Vec<_>>());
            }
            (labels, groups)
        }
        Layout::Skew(kind) => {
            if kind == SkewKind::Ms {
                participants = participants.min(class_count);
            }
            let total: usize = (0..participants)
                .map(|_| rng.random_range(0..=max_per_participant))
                .sum::<usize>()
                .max(participants);
            let labels: Vec<usize> = (0..total).map(|_| rng.random_range(0..class_count)).collect();
            let seed = rng.random();
            let alpha = |rng: &mut ChaCha8Rng| [0.1, 0.6, 2.0, 7.0, 100.0][rng.random_range(0..5)];
            let cfg = match kind {
                SkewKind::Iid => SkewConfig::iid(participants, seed),
                SkewKind::Qs => SkewConfig::quantity(alpha(&mut rng), participants, seed),
                SkewKind::Ls => SkewConfig::label(alpha(&mut rng), participants, seed),
                SkewKind::Lqs => SkewConfig::label_quantity(alpha(&mut rng), alpha(&mut rng), participants, seed),
                SkewKind::Ms => {
                    let mut classes: Vec<usize> = (0..class_count).collect();
                    classes.shuffle(&mut rng);
                    let shared = rng.random_range(0..=class_count - participants);
                    SkewConfig::manual(classes[..shared].to_vec(), participants, seed)
                }
            };
            let plan = partition(&labels, Some(class_count), &cfg).unwrap();
            (labels, plan.groups())
        }
    };

    let partitions = groups
        .iter()
        .map(|group| {
            let y: Vec<usize> = group.iter().map(|&k| labels[k]).collect();
            let seed = rng.random();
            match task {
                Task::Classification => {
                    let kernel = ConfusionKernel::symmetric(class_count, rng.random_range(0.0..=1.0), seed);
                    let pred = predict_classification(&y, &kernel).unwrap();
                    LabeledPredictions::classification(y, pred, class_count).unwrap()
                }
                Task::Regression => {
                    let shift = rng.random_range(-5.0..5.0);
                    let y_true: Vec<f64> = y
                        .iter()
                        .map(|&c| c as f64 * shift + rng.random_range(-1.0..1.0))
                        .collect();
                    let model = NoisyRegressor {
                        bias: rng.random_range(-2.0..2.0),
                        noise_sigma: rng.random_range(0.0..3.0),
                        seed,
                    };
                    let y_pred = predict_regression(&y_true, &model).unwrap();
                    LabeledPredictions::regression(y_true, y_pred).unwrap()
                }
            }
        })
        .collect();

    Federation {
        task,
        class_count,
        layout,
        partitions,
    }
}

/// `|a - b| <= tol`, with two failures counting as agreement.
pub fn agree<E>(a: &Result<f64, E>, b: &Result<f64, E>, tol: f64) -> bool {
    match (a, b) {
        (Ok(a), Ok(b)) => (a - b).abs() <= tol,
        (Err(_), Err(_)) => true,
        _ => false,
    }
}

fn finite_f64(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let x = f64::from_bits(rng.random());
        if x.is_finite() {
            return x;
        }
    }
}

fn random_spec(rng: &mut ChaCha8Rng) -> MetricSpec {
    let mut all = MetricSpec::all_classification();
    all.push(MetricSpec::r2());
    all[rng.random_range(0..all.len())].with_zero_division(rng.random_range(0.0..=1.0))
}

/// Arbitrary well-formed protocol message: any phase, extreme floats, full
/// range counts.
pub fn random_message(rng: &mut ChaCha8Rng) -> RoundMessage {
    let round_id = rng.random();
    let participant_id = rng.random_bool(0.8).then(|| rng.random());
    let body = match rng.random_range(0..7) {
        0 => Body::Register(Registration {
            task: if rng.random() { Task::Classification } else { Task::Regression },
            class_count: rng.random_bool(0.5).then(|| rng.random_range(1..1000)),
        }),
        1 => Body::StatRequest {
            statistics: vec![StatisticId::GlobalMean; rng.random_range(0..3)],
        },
        2 => Body::StatResponse {
            statistics: (0..rng.random_range(0..3))
                .map(|_| {
                    LocalStatistic::GlobalMean(MeanStatistic {
                        sum_y: finite_f64(rng),
                        count: rng.random(),
                    })
                })
                .collect(),
        },
        3 => Body::AmRequest {
            specs: (0..rng.random_range(0..9)).map(|_| random_spec(rng)).collect(),
            statistics: GlobalStatistics {
                global_mean: rng.random_bool(0.5).then(|| finite_f64(rng)),
            },
        },
        4 => {
            let measure = if rng.random() {
                let c = rng.random_range(1..12);
                let rows = (0..c)
                    .map(|_| (0..c).map(|_| rng.random::<u64>() >> rng.random_range(0..64)).collect())
                    .collect();
                AggregatableMeasure::Classification(ClassificationAM {
                    confusion: ConfusionMatrix::from_rows(rows).unwrap(),
                })
            } else {
                AggregatableMeasure::Regression(RegressionAM {
                    rs_a: finite_f64(rng).abs(),
                    rs_b: finite_f64(rng).abs(),
                    n: rng.random(),
                    global_mean: finite_f64(rng),
                })
            };
            Body::AmResponse { measure }
        }
        5 => Body::ResultBroadcast {
            values: (0..rng.random_range(0..9))
                .map(|_| MetricValue {
                    spec: random_spec(rng),
                    mode: EvalMode::Flam,
                    value: finite_f64(rng),
                    sample_count: rng.random(),
                })
                .collect(),
        },
        _ => Body::Error {
            message: (0..rng.random_range(0..40))
                .map(|_| char::from_u32(rng.random_range(0..0x3000)).unwrap_or('\u{fffd}'))
                .collect(),
        },
    };
    RoundMessage::new(round_id, participant_id, body)
}
