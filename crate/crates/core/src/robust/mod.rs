//! Generic RANSAC with local optimization and an adaptive a-contrario
//! inlier threshold, plus the model estimators used by the pipeline.
//!
//! An [`Estimator`] produces candidate models from samples and measures
//! data-to-model distances. With [`ThresholdPolicy::Adaptive`] the inlier
//! threshold is derived per model from a noise distribution built by
//! re-pairing data items ([`Repairable`]); until a non-trivial model is
//! found every candidate gets its own threshold, afterwards a single global
//! threshold is used and re-estimated from every new best model.
//!
//! A model is non-trivial when its threshold exists and is resolvable by the
//! noise sample, and it has at least twice the minimal sample size of
//! inliers.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod essential;
pub mod five_point;
pub mod homography;
pub mod line;
pub mod plane;
pub mod threshold;

pub use threshold::{adaptive_threshold, build_noise_distribution, inlier_fitness, NoiseDistribution};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RobustError {
    #[error("no threshold keeps the false discovery rate bound below p")]
    NoReliableThreshold,
    #[error("no non-trivial model found")]
    NoModelFound,
    #[error("degenerate sample")]
    DegenerateSample,
    #[error("not enough data: need {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("no pose factorization places more points in front of both cameras")]
    AmbiguousChirality,
    #[error("invalid robust-fitting configuration: {0}")]
    InvalidConfig(&'static str),
}

/// Model generator and distance function for one kind of model.
pub trait Estimator {
    type Datum: Clone;
    type Model: Clone;

    fn min_sample_size(&self) -> usize;

    /// Candidate models through a minimal sample; empty when degenerate.
    fn fit_minimal(&self, sample: &[Self::Datum]) -> Vec<Self::Model>;

    /// Candidate models fitted to a larger sample (used by local
    /// optimization); empty when degenerate.
    fn fit_non_minimal(&self, sample: &[Self::Datum]) -> Vec<Self::Model>;

    /// Non-negative distance of a datum to a model; `+∞` when undefined.
    fn distance(&self, model: &Self::Model, datum: &Self::Datum) -> f64;
}

/// Data items made of two parts that can be re-paired at random to produce
/// noise samples (e.g. the two points of a match).
pub trait Repairable: Estimator {
    /// A datum combining the first part of `a` with the second part of `b`.
    fn cross_pair(&self, a: &Self::Datum, b: &Self::Datum) -> Self::Datum;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    /// Hard cap on the number of sampling iterations.
    pub max_iterations: usize,
    /// Iterations run even when the confidence budget is met earlier.
    pub min_iterations: usize,
    /// Confidence used to update the iteration budget from the inlier rate.
    pub confidence: f64,
    /// Bound `p` on the false discovery rate for the adaptive threshold.
    pub noise_pollution_p: f64,
    /// Random pairings per noise distribution.
    pub noise_samples: usize,
    /// Sample size of local optimization draws.
    pub lo_sample_size: usize,
    /// Draws per local optimization round.
    pub lo_iterations: usize,
    /// Maximum restarts of local optimization from an improved model.
    pub lo_max_restarts: usize,
    pub local_optimization: bool,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10_000,
            min_iterations: 0,
            confidence: 0.99,
            noise_pollution_p: 0.03,
            noise_samples: 1000,
            lo_sample_size: 10,
            lo_iterations: 10,
            lo_max_restarts: 3,
            local_optimization: true,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self, min_sample_size: usize) -> Result<(), RobustError> {
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(RobustError::InvalidConfig("confidence must lie in (0, 1)"));
        }
        if !(self.noise_pollution_p > 0.0 && self.noise_pollution_p < 1.0) {
            return Err(RobustError::InvalidConfig("noise_pollution_p must lie in (0, 1)"));
        }
        if self.max_iterations == 0 {
            return Err(RobustError::InvalidConfig("max_iterations must be positive"));
        }
        if self.lo_sample_size < min_sample_size {
            return Err(RobustError::InvalidConfig("lo_sample_size must be at least the minimal sample size"));
        }
        if self.noise_samples < threshold::MIN_NOISE_SAMPLES {
            return Err(RobustError::InvalidConfig("noise_samples must be at least 100"));
        }
        Ok(())
    }
}

/// How inliers are separated from outliers.
#[derive(Debug, Clone)]
pub enum ThresholdPolicy<D> {
    /// Static threshold in distance units.
    Fixed(f64),
    /// A-contrario threshold from distances to the given noise data (random
    /// re-pairings of the input).
    Adaptive { noise: Vec<D> },
}

impl<D: Clone> ThresholdPolicy<D> {
    /// Adaptive policy with `n_samples` random re-pairings of `data`.
    pub fn adaptive<E>(estimator: &E, data: &[D], n_samples: usize, seed: u64) -> Self
    where
        E: Repairable<Datum = D>,
    {
        let noise = threshold::random_pairings(data.len(), data.len(), n_samples, seed)
            .into_iter()
            .map(|(i, j)| estimator.cross_pair(&data[i], &data[j]))
            .collect();
        ThresholdPolicy::Adaptive { noise }
    }
}

/// Outcome of a robust fit.
#[derive(Debug, Clone)]
pub struct FitResult<M> {
    pub model: M,
    /// Indices of the data within `threshold` of `model`, ascending.
    pub inliers: Vec<usize>,
    pub threshold: f64,
    /// Inlier fitness `Σ max(threshold − d, 0)` over all data.
    pub fitness: f64,
    pub iterations_run: usize,
}

impl<M> FitResult<M> {
    pub fn inlier_rate(&self, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            self.inliers.len() as f64 / n as f64
        }
    }
}

/// Model scored at a given threshold.
#[derive(Debug, Clone)]
struct Scored<M> {
    model: M,
    count: usize,
    fitness: f64,
}

impl<M> Scored<M> {
    fn beats(&self, other: &Self) -> bool {
        self.count > other.count || (self.count == other.count && self.fitness > other.fitness)
    }
}

fn distances<E: Estimator>(est: &E, model: &E::Model, data: &[E::Datum], out: &mut Vec<f64>) {
    out.clear();
    out.extend(data.iter().map(|d| {
        let v = est.distance(model, d);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }));
}

fn score<M>(model: M, dist: &[f64], thr: f64) -> Scored<M> {
    let count = dist.iter().filter(|&&d| d <= thr).count();
    Scored { model, count, fitness: inlier_fitness(dist, thr) }
}

/// Adaptive threshold of one model against the policy's noise data, and
/// whether it is resolvable by the noise sample ([`threshold::resolvable_threshold`]).
/// The sample the model was fitted to lies on it by construction and is left
/// out of the data distribution.
fn model_threshold<E: Estimator>(
    est: &E,
    model: &E::Model,
    data_dist: &[f64],
    sample_idx: &[usize],
    noise: &[E::Datum],
    p: f64,
    scratch: &mut Vec<f64>,
) -> Result<(f64, bool), RobustError> {
    let mut sorted: Vec<f64> =
        data_dist.iter().enumerate().filter(|(i, _)| !sample_idx.contains(i)).map(|(_, &d)| d).collect();
    sorted.sort_by(f64::total_cmp);
    distances(est, model, noise, scratch);
    scratch.sort_by(f64::total_cmp);
    let t = adaptive_threshold(&sorted, scratch, p)?;
    Ok((t, threshold::resolvable_threshold(&sorted, scratch, p)))
}

/// Iterations needed to draw an all-inlier sample of size `s` with the given
/// confidence when the inlier rate is `rate`.
pub fn iteration_budget(rate: f64, s: usize, confidence: f64, cap: usize) -> usize {
    let p_good = rate.clamp(0.0, 1.0).powi(s as i32);
    if p_good >= 1.0 {
        return 1;
    }
    if p_good <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    if !n.is_finite() {
        return cap;
    }
    (n.ceil() as usize).clamp(1, cap)
}

const LO_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Robust model fit. Deterministic for a given seed.
pub fn ransac<E: Estimator>(
    data: &[E::Datum],
    estimator: &E,
    policy: &ThresholdPolicy<E::Datum>,
    config: &RansacConfig,
    seed: u64,
) -> Result<FitResult<E::Model>, RobustError> {
    let s = estimator.min_sample_size();
    config.validate(s)?;
    let n = data.len();
    if n < s {
        return Err(RobustError::InsufficientData { needed: s, got: n });
    }
    if let ThresholdPolicy::Fixed(t) = policy {
        if !(*t > 0.0) {
            return Err(RobustError::InvalidConfig("fixed threshold must be positive"));
        }
    }
    let p = config.noise_pollution_p;
    let min_inliers = (2 * s).min(n);

    // Separate streams keep the main sampling sequence identical whether or
    // not local optimization consumes random numbers.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lo_rng = ChaCha8Rng::seed_from_u64(seed ^ LO_STREAM);

    let mut global: Option<f64> = match policy {
        ThresholdPolicy::Fixed(t) => Some(*t),
        ThresholdPolicy::Adaptive { .. } => None,
    };
    let mut best: Option<Scored<E::Model>> = None;
    let mut budget = config.max_iterations;
    let mut iterations = 0usize;
    let mut dist = Vec::with_capacity(n);
    let mut scratch = Vec::new();
    let mut sample = Vec::with_capacity(s);

    while iterations < budget {
        iterations += 1;
        let idx = index::sample(&mut rng, n, s).into_vec();
        sample.clear();
        sample.extend(idx.iter().map(|&i| data[i].clone()));

        for model in estimator.fit_minimal(&sample) {
            distances(estimator, &model, data, &mut dist);
            let thr = match (global, policy) {
                (Some(t), _) => t,
                (None, ThresholdPolicy::Adaptive { noise }) => {
                    match model_threshold(estimator, &model, &dist, &idx, noise, p, &mut scratch) {
                        Ok((t, true)) => t,
                        _ => continue,
                    }
                }
                (None, ThresholdPolicy::Fixed(_)) => unreachable!(),
            };
            let mut cand = score(model, &dist, thr);
            if cand.count < min_inliers || best.as_ref().is_some_and(|b| !cand.beats(b)) {
                continue;
            }

            // New best: (re)define the global threshold from it, keeping the
            // previous one when the re-estimate fails or leaves the model
            // trivial.
            if let (ThresholdPolicy::Adaptive { noise }, Some(old)) = (policy, global) {
                if let Ok((t, _)) = model_threshold(estimator, &cand.model, &dist, &idx, noise, p, &mut scratch) {
                    let rescored = score(cand.model.clone(), &dist, t);
                    if rescored.count >= min_inliers && t != old {
                        cand = rescored;
                        global = Some(t);
                        if let Some(b) = best.as_mut() {
                            distances(estimator, &b.model, data, &mut dist);
                            *b = score(b.model.clone(), &dist, t);
                        }
                    }
                }
            }
            let thr = *global.get_or_insert(thr);

            if config.local_optimization {
                cand = local_optimize(cand, data, estimator, thr, config, &mut lo_rng);
            }
            if best.as_ref().is_none_or(|b| cand.beats(b)) {
                budget = iteration_budget(cand.count as f64 / n as f64, s, config.confidence, config.max_iterations)
                    .max(iterations)
                    .max(config.min_iterations.min(config.max_iterations));
                best = Some(cand);
            }
        }
    }

    let best = best.ok_or(RobustError::NoModelFound)?;
    let thr = global.expect("threshold set once a model was found");
    distances(estimator, &best.model, data, &mut dist);
    let inliers = dist.iter().enumerate().filter(|(_, &d)| d <= thr).map(|(i, _)| i).collect();
    Ok(FitResult {
        fitness: inlier_fitness(&dist, thr),
        model: best.model,
        inliers,
        threshold: thr,
        iterations_run: iterations,
    })
}

/// Resamples `lo_sample_size` items from the inliers of the current model,
/// keeping any candidate with a higher inlier fitness and restarting from its
/// inlier set, at most `lo_max_restarts` times.
fn local_optimize<E: Estimator>(
    start: Scored<E::Model>,
    data: &[E::Datum],
    estimator: &E,
    thr: f64,
    config: &RansacConfig,
    rng: &mut ChaCha8Rng,
) -> Scored<E::Model> {
    let mut current = start;
    let mut dist = Vec::with_capacity(data.len());
    let mut restarts = 0;
    'rounds: loop {
        distances(estimator, &current.model, data, &mut dist);
        let inliers: Vec<usize> = dist.iter().enumerate().filter(|(_, &d)| d <= thr).map(|(i, _)| i).collect();
        if inliers.len() < config.lo_sample_size {
            break;
        }
        for _ in 0..config.lo_iterations {
            let sample: Vec<E::Datum> = index::sample(rng, inliers.len(), config.lo_sample_size)
                .into_iter()
                .map(|i| data[inliers[i]].clone())
                .collect();
            for model in estimator.fit_non_minimal(&sample) {
                distances(estimator, &model, data, &mut dist);
                let cand = score(model, &dist, thr);
                if cand.fitness > current.fitness {
                    current = cand;
                    if restarts == config.lo_max_restarts {
                        break 'rounds;
                    }
                    restarts += 1;
                    continue 'rounds;
                }
            }
        }
        break;
    }
    current
}

/// Plain local optimization entry point on an existing fit, at its threshold.
pub fn local_optimize_fit<E: Estimator>(
    best: &FitResult<E::Model>,
    data: &[E::Datum],
    estimator: &E,
    config: &RansacConfig,
    seed: u64,
) -> FitResult<E::Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dist = Vec::with_capacity(data.len());
    distances(estimator, &best.model, data, &mut dist);
    let start = score(best.model.clone(), &dist, best.threshold);
    let out = local_optimize(start, data, estimator, best.threshold, config, &mut rng);
    distances(estimator, &out.model, data, &mut dist);
    FitResult {
        inliers: dist.iter().enumerate().filter(|(_, &d)| d <= best.threshold).map(|(i, _)| i).collect(),
        fitness: out.fitness,
        model: out.model,
        threshold: best.threshold,
        iterations_run: best.iterations_run,
    }
}
