//! Inlier fitness and the a-contrario adaptive inlier threshold.
//!
//! The threshold compares the distribution of model distances on the real
//! data with the distribution obtained on random re-pairings of the same
//! points. For an inlier rate `δ`, `Cdf_noise(Cdf_data⁻¹(δ)) / δ` bounds the
//! share of inliers that random matches could explain (the false discovery
//! rate bound). The chosen threshold is the largest data quantile whose bound
//! stays below the noise pollution rate `p`.

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::RobustError;

/// Minimum number of random pairings in a noise distribution.
pub const MIN_NOISE_SAMPLES: usize = 100;

/// `Σ max(thr − d, 0)` over all distances.
pub fn inlier_fitness<T: Float>(distances: &[T], thr: T) -> T {
    distances
        .iter()
        .fold(T::zero(), |acc, &d| acc + (thr - d).max(T::zero()))
}

/// Largest data distance `Cdf_data⁻¹(k/n)` such that
/// `Cdf_noise(Cdf_data⁻¹(k/n)) / (k/n) < p`.
///
/// Both slices must be sorted ascending. The scan is exhaustive over
/// `k = 1..=n`; `Cdf_noise` counts noise distances `≤` the candidate.
pub fn adaptive_threshold<T: Float>(data: &[T], noise: &[T], p: T) -> Result<T, RobustError> {
    debug_assert!(data.windows(2).all(|w| w[0] <= w[1]), "data distances must be sorted");
    debug_assert!(noise.windows(2).all(|w| w[0] <= w[1]), "noise distances must be sorted");
    if data.is_empty() || noise.is_empty() {
        return Err(RobustError::NoReliableThreshold);
    }
    let n = T::from(data.len()).unwrap();
    let m = T::from(noise.len()).unwrap();
    let mut below = 0usize;
    let mut best = None;
    for (k, &t) in data.iter().enumerate() {
        while below < noise.len() && noise[below] <= t {
            below += 1;
        }
        let delta = T::from(k + 1).unwrap() / n;
        let fdrb = (T::from(below).unwrap() / m) / delta;
        if fdrb < p {
            best = Some(t);
        }
    }
    best.ok_or(RobustError::NoReliableThreshold)
}

/// True when some data quantile keeps the false discovery rate bound below
/// `p` even with the noise CDF replaced by the upper bound
/// `(count + 3) / m`, which for a zero count is the one-sided 95% bound of
/// the rule of three. Below that resolution an empirical noise CDF of zero
/// carries no evidence.
pub fn resolvable_threshold<T: Float>(data: &[T], noise: &[T], p: T) -> bool {
    let n = T::from(data.len()).unwrap();
    let m = T::from(noise.len()).unwrap();
    let three = T::from(3.0).unwrap();
    let mut below = 0usize;
    for (k, &t) in data.iter().enumerate() {
        while below < noise.len() && noise[below] <= t {
            below += 1;
        }
        let delta = T::from(k + 1).unwrap() / n;
        if (T::from(below).unwrap() + three) / m < p * delta {
            return true;
        }
    }
    false
}

/// Sorted distances of a model to random re-pairings of the data.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDistribution {
    distances: Vec<f64>,
}

impl NoiseDistribution {
    /// Sorts the given distances; non-finite values are kept and sort last.
    pub fn from_distances(mut distances: Vec<f64>) -> Result<Self, RobustError> {
        if distances.len() < MIN_NOISE_SAMPLES {
            return Err(RobustError::InvalidConfig("noise distribution needs at least 100 samples"));
        }
        distances.sort_by(f64::total_cmp);
        Ok(Self { distances })
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }
}

/// `n_samples` uniformly random index pairs `(i, j)` with `i ≠ j`, drawn
/// from `[0, n_a) × [0, n_b)`. Deterministic for a given seed.
pub fn random_pairings(n_a: usize, n_b: usize, n_samples: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_samples)
        .map(|_| loop {
            let i = rng.random_range(0..n_a);
            let j = rng.random_range(0..n_b);
            if i != j || n_a.min(n_b) < 2 {
                break (i, j);
            }
        })
        .collect()
}

/// Distances of `model` to `n_samples` random pairings of `points_a` with
/// `points_b`.
pub fn build_noise_distribution<A, B, M>(
    points_a: &[A],
    points_b: &[B],
    model: &M,
    distance_fn: impl Fn(&M, &A, &B) -> f64,
    n_samples: usize,
    seed: u64,
) -> Result<NoiseDistribution, RobustError> {
    if points_a.len() < 2 || points_b.len() < 2 {
        return Err(RobustError::InsufficientData { needed: 2, got: points_a.len().min(points_b.len()) });
    }
    let d = random_pairings(points_a.len(), points_b.len(), n_samples, seed)
        .into_iter()
        .map(|(i, j)| distance_fn(model, &points_a[i], &points_b[j]))
        .collect();
    NoiseDistribution::from_distances(d)
}
