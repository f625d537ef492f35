//! Keyed random streams.
//!
//! Every random draw is taken from a ChaCha stream selected by
//! `(seed, domain, key)`, e.g. the label-proportion draw for class 3 under
//! seed 7. Results then depend only on those keys, never on the order in
//! which classes, participants or sweep cells are processed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub(crate) enum Domain {
    Shuffle = 1,
    LabelProportions = 2,
    LabelAssignment = 3,
    Quantity = 4,
    QuantityLabelFill = 5,
    SharedClasses = 6,
    Kernel = 7,
    Noise = 8,
    Synthetic = 9,
}

pub(crate) fn keyed(seed: u64, domain: Domain, key: u64) -> ChaCha8Rng {
    let mixed = seed ^ (domain as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    rng.set_stream(key);
    rng
}

/// Symmetric Dirichlet(alpha · 1_k) draw via normalized gamma variates.
///
/// At very small alpha every gamma variate can underflow to zero; the draw
/// then degenerates to a one-hot vector at a uniformly chosen index, which is
/// the limit the distribution approaches anyway.
pub(crate) fn dirichlet<R: Rng>(rng: &mut R, alpha: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated as positive and finite");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        let mut one_hot = vec![0.0; k];
        one_hot[rng.random_range(0..k)] = 1.0;
        one_hot
    }
}

/// Index drawn with probability proportional to `weights` (not necessarily
/// normalized). Returns `None` when every weight is zero.
pub(crate) fn categorical<R: Rng>(rng: &mut R, weights: &[f64]) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = Some(i);
            if target < acc {
                return Some(i);
            }
        }
    }
    last_positive
}
