//! Non-IID federation generators.
//!
//! * `IID`: uniform shuffle, split into near-equal parts.
//! * `QS` (quantity skew): partition sizes ~ Dirichlet(α_q · 1_P) over a
//!   shuffled pool.
//! * `LS` (label skew): for each class, participant proportions
//!   ~ Dirichlet(α_l · 1_P), then each sample of the class is assigned by a
//!   categorical draw from those proportions.
//! * `LQS`: QS sizes, filled class by class with LS proportions.
//! * `MS` (manual skew): every participant is the sole owner of at least one
//!   class; a few shared classes are split evenly across everyone.
//!
//! All draws come from keyed streams, so a plan depends only on the labels
//! and the config.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LabeledPredictions;
use crate::rng::{categorical, dirichlet, keyed, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkewKind {
    Iid,
    Qs,
    Ls,
    Lqs,
    Ms,
}

impl SkewKind {
    pub const ALL: [SkewKind; 5] = [SkewKind::Iid, SkewKind::Qs, SkewKind::Ls, SkewKind::Lqs, SkewKind::Ms];
}

impl fmt::Display for SkewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkewKind::Iid => "iid",
            SkewKind::Qs => "qs",
            SkewKind::Ls => "ls",
            SkewKind::Lqs => "lqs",
            SkewKind::Ms => "ms",
        })
    }
}

impl FromStr for SkewKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "iid" => Ok(SkewKind::Iid),
            "qs" => Ok(SkewKind::Qs),
            "ls" => Ok(SkewKind::Ls),
            "lqs" => Ok(SkewKind::Lqs),
            "ms" => Ok(SkewKind::Ms),
            other => Err(Error::InvalidConfig(format!("unknown skew kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewConfig {
    pub kind: SkewKind,
    pub alpha_quantity: Option<f64>,
    pub alpha_label: Option<f64>,
    pub participants: usize,
    pub seed: u64,
    /// Classes split across all participants under `MS`.
    #[serde(default)]
    pub shared_classes: Vec<usize>,
}

impl SkewConfig {
    pub fn iid(participants: usize, seed: u64) -> Self {
        Self::base(SkewKind::Iid, participants, seed)
    }

    pub fn quantity(alpha: f64, participants: usize, seed: u64) -> Self {
        Self {
            alpha_quantity: Some(alpha),
            ..Self::base(SkewKind::Qs, participants, seed)
        }
    }

    pub fn label(alpha: f64, participants: usize, seed: u64) -> Self {
        Self {
            alpha_label: Some(alpha),
            ..Self::base(SkewKind::Ls, participants, seed)
        }
    }

    pub fn label_quantity(alpha_quantity: f64, alpha_label: f64, participants: usize, seed: u64) -> Self {
        Self {
            alpha_quantity: Some(alpha_quantity),
            alpha_label: Some(alpha_label),
            ..Self::base(SkewKind::Lqs, participants, seed)
        }
    }

    pub fn manual(shared_classes: Vec<usize>, participants: usize, seed: u64) -> Self {
        Self {
            shared_classes,
            ..Self::base(SkewKind::Ms, participants, seed)
        }
    }

    fn base(kind: SkewKind, participants: usize, seed: u64) -> Self {
        Self {
            kind,
            alpha_quantity: None,
            alpha_label: None,
            participants,
            seed,
            shared_classes: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.participants == 0 {
            return Err(Error::InvalidConfig("participants must be at least 1".into()));
        }
        let need_quantity = matches!(self.kind, SkewKind::Qs | SkewKind::Lqs);
        let need_label = matches!(self.kind, SkewKind::Ls | SkewKind::Lqs);
        check_alpha("alpha-quantity", self.alpha_quantity, need_quantity, self.kind)?;
        check_alpha("alpha-label", self.alpha_label, need_label, self.kind)?;
        Ok(())
    }

    /// Short alpha description used in sweep output, e.g. `0.6` or `3:0.7`.
    pub fn alpha_label_text(&self) -> String {
        match (self.kind, self.alpha_quantity, self.alpha_label) {
            (SkewKind::Lqs, Some(q), Some(l)) => format!("{q}:{l}"),
            (SkewKind::Qs, Some(q), _) => q.to_string(),
            (SkewKind::Ls, _, Some(l)) => l.to_string(),
            _ => String::new(),
        }
    }
}

fn check_alpha(name: &str, alpha: Option<f64>, required: bool, kind: SkewKind) -> Result<()> {
    match alpha {
        None if required => Err(Error::InvalidConfig(format!("--{name} is required for {kind}"))),
        Some(a) if required && !(a.is_finite() && a > 0.0) => Err(Error::InvalidConfig(format!(
            "--{name} must be a positive finite number, got {a}"
        ))),
        _ => Ok(()),
    }
}

/// Participant id for every pool index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    participants: usize,
    assignment: Vec<usize>,
}

impl PartitionPlan {
    pub fn new(participants: usize, assignment: Vec<usize>) -> Result<Self> {
        if let Some((i, &p)) = assignment.iter().enumerate().find(|(_, &p)| p >= participants) {
            return Err(Error::InvalidConfig(format!(
                "pool index {i} assigned to participant {p}, but there are only {participants}"
            )));
        }
        Ok(Self {
            participants,
            assignment,
        })
    }

    pub fn participants(&self) -> usize {
        self.participants
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.participants];
        for &p in &self.assignment {
            sizes[p] += 1;
        }
        sizes
    }

    /// Pool indices per participant, each list ascending.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.participants];
        for (i, &p) in self.assignment.iter().enumerate() {
            groups[p].push(i);
        }
        groups
    }

    /// Splits a pooled dataset into one dataset per participant.
    pub fn apply(&self, pool: &LabeledPredictions) -> Result<Vec<LabeledPredictions>> {
        if pool.len() != self.assignment.len() {
            return Err(Error::ShapeMismatch(format!(
                "plan covers {} samples, dataset has {}",
                self.assignment.len(),
                pool.len()
            )));
        }
        Ok(self.groups().iter().map(|g| pool.select(g)).collect())
    }

    /// Two-column CSV: `pool_index,participant_id`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["pool_index", "participant_id"])?;
        for (i, p) in self.assignment.iter().enumerate() {
            w.write_record([i.to_string(), p.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a plan written by [`write_csv`](Self::write_csv). Every pool
    /// index must appear exactly once. `participants` defaults to the largest
    /// id plus one.
    pub fn read_csv<R: Read>(reader: R, participants: Option<usize>) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = r.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "pool_index" || &headers[1] != "participant_id" {
            return Err(Error::Parse {
                line: 1,
                message: "expected header `pool_index,participant_id`".into(),
            });
        }
        let mut pairs = Vec::new();
        for (row, record) in r.records().enumerate() {
            let record = record?;
            let line = row as u64 + 2;
            let parse = |field: &str| -> Result<usize> {
                field.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("`{field}` is not a non-negative integer"),
                })
            };
            pairs.push((parse(&record[0])?, parse(&record[1])?));
        }
        let mut assignment = vec![usize::MAX; pairs.len()];
        for &(i, p) in &pairs {
            if i >= assignment.len() || assignment[i] != usize::MAX {
                return Err(Error::InvalidConfig(format!(
                    "pool index {i} is out of range or listed twice"
                )));
            }
            assignment[i] = p;
        }
        let participants = participants
            .unwrap_or_else(|| assignment.iter().max().map_or(0, |m| m + 1));
        Self::new(participants, assignment)
    }
}

/// Dispatches on `cfg.kind`. `class_count` is only consulted by `MS` and
/// defaults to the largest label plus one.
pub fn partition(labels: &[usize], class_count: Option<usize>, cfg: &SkewConfig) -> Result<PartitionPlan> {
    match cfg.kind {
        SkewKind::Ms => {
            let c = class_count.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
            manual_skew_partition(labels, c, cfg.participants, &cfg.shared_classes, cfg.seed)
        }
        _ => dirichlet_partition(labels, cfg),
    }
}

pub fn dirichlet_partition(labels: &[usize], cfg: &SkewConfig) -> Result<PartitionPlan> {
    cfg.validate()?;
    let p = cfg.participants;
    let n = labels.len();
    if n == 0 {
        return Err(Error::Infeasible("the label pool is empty".into()));
    }
    if p > n {
        return Err(Error::Infeasible(format!(
            "{p} participants cannot split a pool of {n} samples"
        )));
    }
    let assignment = match cfg.kind {
        SkewKind::Iid => {
            let sizes = even_sizes(n, p);
            contiguous(&shuffled_pool(n, cfg.seed), &sizes, n)
        }
        SkewKind::Qs => {
            let sizes = quantity_sizes(n, p, cfg.alpha_quantity.unwrap(), cfg.seed);
            contiguous(&shuffled_pool(n, cfg.seed), &sizes, n)
        }
        SkewKind::Ls => label_skew(labels, p, cfg.alpha_label.unwrap(), cfg.seed),
        SkewKind::Lqs => label_quantity_skew(
            labels,
            p,
            cfg.alpha_quantity.unwrap(),
            cfg.alpha_label.unwrap(),
            cfg.seed,
        ),
        SkewKind::Ms => {
            return Err(Error::InvalidConfig(
                "manual skew is generated by manual_skew_partition".into(),
            ))
        }
    };
    PartitionPlan::new(p, assignment)
}

/// Dedicated (non-shared) classes are dealt round-robin by class index, so
/// participant `k` owns dedicated classes `k, k + P, ...` of the sorted
/// dedicated list. Samples of each shared class are shuffled and cut into
/// `P` near-equal runs.
pub fn manual_skew_partition(
    labels: &[usize],
    class_count: usize,
    participants: usize,
    shared_classes: &[usize],
    seed: u64,
) -> Result<PartitionPlan> {
    if participants == 0 {
        return Err(Error::InvalidConfig("participants must be at least 1".into()));
    }
    let shared: BTreeSet<usize> = shared_classes.iter().copied().collect();
    if let Some(&bad) = shared.iter().find(|&&c| c >= class_count) {
        return Err(Error::InvalidConfig(format!(
            "shared class {bad} is outside [0, {class_count})"
        )));
    }
    if class_count < participants + shared.len() {
        return Err(Error::Infeasible(format!(
            "{class_count} classes cannot give {participants} participants a class each \
             besides {} shared ones",
            shared.len()
        )));
    }
    let owner = dedicated_owners(class_count, participants, &shared);
    let by_class = indices_by_class(labels, class_count)?;

    let mut assignment = vec![0; labels.len()];
    for (class, indices) in by_class.into_iter().enumerate() {
        match owner[class] {
            Some(p) => indices.into_iter().for_each(|i| assignment[i] = p),
            None => {
                let mut indices = indices;
                indices.shuffle(&mut keyed(seed, Domain::SharedClasses, class as u64));
                let sizes = even_sizes(indices.len(), participants);
                let mut start = 0;
                for (p, size) in sizes.into_iter().enumerate() {
                    for &i in &indices[start..start + size] {
                        assignment[i] = p;
                    }
                    start += size;
                }
            }
        }
    }
    PartitionPlan::new(participants, assignment)
}

/// Owner of every class under manual skew; `None` for shared classes.
pub fn dedicated_owners(class_count: usize, participants: usize, shared: &BTreeSet<usize>) -> Vec<Option<usize>> {
    let mut owner = vec![None; class_count];
    for (k, class) in (0..class_count).filter(|c| !shared.contains(c)).enumerate() {
        owner[class] = Some(k % participants);
    }
    owner
}

fn indices_by_class(labels: &[usize], class_count: usize) -> Result<Vec<Vec<usize>>> {
    let mut by_class = vec![Vec::new(); class_count];
    for (i, &label) in labels.iter().enumerate() {
        if label >= class_count {
            return Err(Error::LabelOutOfRange {
                index: i,
                label,
                class_count,
            });
        }
        by_class[label].push(i);
    }
    Ok(by_class)
}

fn shuffled_pool(n: usize, seed: u64) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    pool.shuffle(&mut keyed(seed, Domain::Shuffle, 0));
    pool
}

fn even_sizes(n: usize, p: usize) -> Vec<usize> {
    (0..p).map(|i| n / p + usize::from(i < n % p)).collect()
}

/// Split sizes from rounded cumulative proportions; sums to `n` exactly.
fn sizes_from_proportions(proportions: &[f64], n: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(proportions.len());
    let mut cumulative = 0.0;
    let mut previous = 0usize;
    for (i, &q) in proportions.iter().enumerate() {
        cumulative += q;
        let bound = if i + 1 == proportions.len() {
            n
        } else {
            ((cumulative * n as f64).round() as usize).clamp(previous, n)
        };
        sizes.push(bound - previous);
        previous = bound;
    }
    sizes
}

fn quantity_sizes(n: usize, p: usize, alpha: f64, seed: u64) -> Vec<usize> {
    let proportions = dirichlet(&mut keyed(seed, Domain::Quantity, 0), alpha, p);
    sizes_from_proportions(&proportions, n)
}

fn contiguous(order: &[usize], sizes: &[usize], n: usize) -> Vec<usize> {
    let mut assignment = vec![0; n];
    let mut start = 0;
    for (p, &size) in sizes.iter().enumerate() {
        for &i in &order[start..start + size] {
            assignment[i] = p;
        }
        start += size;
    }
    assignment
}

fn label_proportions(class: usize, p: usize, alpha: f64, seed: u64) -> Vec<f64> {
    dirichlet(&mut keyed(seed, Domain::LabelProportions, class as u64), alpha, p)
}

fn label_skew(labels: &[usize], p: usize, alpha: f64, seed: u64) -> Vec<usize> {
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    let by_class = indices_by_class(labels, class_count).expect("class count covers every label");
    let mut assignment = vec![0; labels.len()];
    for (class, indices) in by_class.iter().enumerate() {
        if indices.is_empty() {
            continue;
        }
        let proportions = label_proportions(class, p, alpha, seed);
        let mut rng = keyed(seed, Domain::LabelAssignment, class as u64);
        for &i in indices {
            assignment[i] = categorical(&mut rng, &proportions).expect("proportions sum to one");
        }
    }
    assignment
}

/// Participant sizes come from the quantity draw. Participants are then
/// filled one after another: each slot picks a class with probability
/// proportional to (that participant's label proportion) × (samples of the
/// class still unassigned). The last participant takes whatever remains.
fn label_quantity_skew(labels: &[usize], p: usize, alpha_quantity: f64, alpha_label: f64, seed: u64) -> Vec<usize> {
    let n = labels.len();
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    let sizes = quantity_sizes(n, p, alpha_quantity, seed);
    let proportions: Vec<Vec<f64>> = (0..class_count)
        .map(|c| label_proportions(c, p, alpha_label, seed))
        .collect();
    let mut remaining = indices_by_class(labels, class_count).expect("class count covers every label");
    for (class, indices) in remaining.iter_mut().enumerate() {
        indices.shuffle(&mut keyed(seed, Domain::Shuffle, class as u64 + 1));
    }

    let mut assignment = vec![0; n];
    for (participant, &size) in sizes.iter().enumerate() {
        if participant + 1 == p {
            for indices in &remaining {
                indices.iter().for_each(|&i| assignment[i] = participant);
            }
            break;
        }
        let mut rng = keyed(seed, Domain::QuantityLabelFill, participant as u64);
        for _ in 0..size {
            let preference: Vec<f64> = (0..class_count)
                .map(|c| proportions[c][participant] * remaining[c].len() as f64)
                .collect();
            let class = categorical(&mut rng, &preference)
                .or_else(|| {
                    let available: Vec<f64> = remaining.iter().map(|r| r.len() as f64).collect();
                    categorical(&mut rng, &available)
                })
                .expect("sizes never exceed the pool");
            let i = remaining[class].pop().expect("class has samples left");
            assignment[i] = participant;
        }
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced_labels(n: usize, c: usize) -> Vec<usize> {
        (0..n).map(|i| i % c).collect()
    }

    fn assert_cover(plan: &PartitionPlan, n: usize) {
        assert_eq!(plan.len(), n);
        assert_eq!(plan.sizes().iter().sum::<usize>(), n);
        let mut seen = vec![false; n];
        for group in plan.groups() {
            for i in group {
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        assert!(seen.into_iter().all(|s| s));
    }

    #[test]
    fn iid_splits_evenly() {
        let plan = dirichlet_partition(&balanced_labels(100, 10), &SkewConfig::iid(4, 3)).unwrap();
        assert_eq!(plan.sizes(), vec![25, 25, 25, 25]);
        assert_cover(&plan, 100);
    }

    #[test]
    fn every_kind_covers_the_pool() {
        let labels = balanced_labels(500, 10);
        let configs = [
            SkewConfig::iid(4, 1),
            SkewConfig::quantity(2.0, 4, 1),
            SkewConfig::label(0.6, 4, 1),
            SkewConfig::label(7.0, 4, 1),
            SkewConfig::label_quantity(10.0, 1.0, 4, 1),
            SkewConfig::label_quantity(3.0, 0.7, 4, 1),
            SkewConfig::manual(vec![0, 1], 4, 1),
        ];
        for cfg in configs {
            let plan = partition(&labels, Some(10), &cfg).unwrap();
            assert_cover(&plan, labels.len());
            assert_eq!(plan, partition(&labels, Some(10), &cfg).unwrap(), "{cfg:?}");
        }
    }

    #[test]
    fn lqs_honours_quantity_sizes() {
        let labels = balanced_labels(1000, 5);
        let cfg = SkewConfig::label_quantity(3.0, 0.7, 4, 11);
        let plan = dirichlet_partition(&labels, &cfg).unwrap();
        assert_eq!(plan.sizes(), quantity_sizes(1000, 4, 3.0, 11));
    }

    #[test]
    fn manual_skew_deals_dedicated_classes_round_robin() {
        let shared: BTreeSet<usize> = [0, 1].into();
        let owners = dedicated_owners(10, 4, &shared);
        assert_eq!(
            owners,
            vec![None, None, Some(0), Some(1), Some(2), Some(3), Some(0), Some(1), Some(2), Some(3)]
        );
        let labels = balanced_labels(400, 10);
        let plan = manual_skew_partition(&labels, 10, 4, &[0, 1], 5).unwrap();
        let groups = plan.groups();
        for (p, group) in groups.iter().enumerate() {
            let classes: BTreeSet<usize> = group.iter().map(|&i| labels[i]).collect();
            let expected: BTreeSet<usize> = [0, 1, p + 2, p + 6].into();
            assert_eq!(classes, expected);
            // 40 samples per shared class, split 4 ways
            assert_eq!(group.iter().filter(|&&i| labels[i] == 0).count(), 10);
        }
    }

    #[test]
    fn manual_skew_minimal_and_infeasible() {
        let labels = vec![0, 1, 0, 1];
        let plan = manual_skew_partition(&labels, 2, 2, &[], 0).unwrap();
        assert_eq!(plan.assignment(), &[0, 1, 0, 1]);
        assert!(matches!(
            manual_skew_partition(&[0, 1, 2], 3, 4, &[], 0),
            Err(Error::Infeasible(_))
        ));
        assert!(matches!(
            manual_skew_partition(&[0, 1, 2], 3, 2, &[5], 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn rejects_bad_configs() {
        let labels = balanced_labels(10, 2);
        assert!(matches!(
            dirichlet_partition(&labels, &SkewConfig::iid(11, 0)),
            Err(Error::Infeasible(_))
        ));
        let mut missing = SkewConfig::label(0.6, 2, 0);
        missing.alpha_label = None;
        let err = dirichlet_partition(&labels, &missing).unwrap_err();
        assert!(err.to_string().contains("alpha-label"));
        assert!(dirichlet_partition(&labels, &SkewConfig::quantity(-1.0, 2, 0)).is_err());
        assert!(dirichlet_partition(&labels, &SkewConfig::quantity(f64::NAN, 2, 0)).is_err());
        assert!(dirichlet_partition(&[], &SkewConfig::iid(1, 0)).is_err());
    }

    #[test]
    fn plan_csv_round_trip() {
        let plan = dirichlet_partition(&balanced_labels(30, 3), &SkewConfig::label(0.6, 3, 9)).unwrap();
        let mut buf = Vec::new();
        plan.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("pool_index,participant_id\n0,"));
        let back = PartitionPlan::read_csv(buf.as_slice(), Some(3)).unwrap();
        assert_eq!(back, plan);
        let dup = "pool_index,participant_id\n0,1\n0,0\n";
        assert!(PartitionPlan::read_csv(dup.as_bytes(), None).is_err());
    }

    #[test]
    fn sizes_from_proportions_sum_to_n() {
        assert_eq!(sizes_from_proportions(&[0.5, 0.5], 7).iter().sum::<usize>(), 7);
        assert_eq!(sizes_from_proportions(&[1.0, 0.0, 0.0], 5), vec![5, 0, 0]);
        assert_eq!(sizes_from_proportions(&[0.0, 0.0, 1.0], 5), vec![0, 0, 5]);
    }
}
