//! Score-based diffusion of fractional coordinates on the unit torus.
//!
//! Noise is a wrapped normal: `F_t = wrap(F_0 + sigma_t * eps)`. Its score is
//! evaluated from a truncated image sum in log-sum-exp form so that very small
//! `sigma` does not underflow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crystal::{periodic_diff, wrap, wrap_vec, Frac};
use crate::error::{Error, Result};

pub const DEFAULT_SIGMA_MIN: f64 = 0.005;
pub const DEFAULT_SIGMA_MAX: f64 = 0.5;
pub const DEFAULT_LAMBDA_MC_SAMPLES: usize = 100_000;

/// Exponentially annealed noise levels `sigma_t = sigma_min * (sigma_max / sigma_min)^(t / T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaSchedule {
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    sigmas: Vec<f64>,
}

impl SigmaSchedule {
    pub fn new(steps: usize, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        if !(sigma_min > 0.0 && sigma_max > sigma_min) {
            return Err(Error::Config(format!("need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")));
        }
        let ratio = sigma_max / sigma_min;
        let mut sigmas: Vec<f64> =
            (1..=steps).map(|t| sigma_min * ratio.powf(t as f64 / steps as f64)).collect();
        sigmas[steps - 1] = sigma_max;
        Ok(Self { steps, sigma_min, sigma_max, sigmas })
    }

    pub fn with_defaults(steps: usize) -> Result<Self> {
        Self::new(steps, DEFAULT_SIGMA_MIN, DEFAULT_SIGMA_MAX)
    }

    /// `sigma_t` for `t` in `1..=T`; `sigma_0` is taken to be 0 so the last
    /// reverse step removes the remaining noise.
    pub fn sigma(&self, t: usize) -> f64 {
        match t {
            0 => 0.0,
            t => self.sigmas[t.min(self.steps) - 1],
        }
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

fn truncation(sigma: f64) -> i64 {
    ((5.0 * sigma).ceil() as i64 + 3).max(3)
}

/// Canonical residual in `[-0.5, 0.5)`.
#[inline]
fn canonical(u: f64) -> f64 {
    wrap(u + 0.5) - 0.5
}

/// `d/du log sum_z exp(-(u + z)^2 / (2 sigma^2))` for a scalar residual `u`.
pub fn wrapped_normal_score_scalar(u: f64, sigma: f64) -> f64 {
    let u = canonical(u);
    let zmax = truncation(sigma);
    let s2 = sigma * sigma;
    let mut peak = f64::NEG_INFINITY;
    for z in -zmax..=zmax {
        let x = u + z as f64;
        peak = peak.max(-x * x / (2.0 * s2));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for z in -zmax..=zmax {
        let x = u + z as f64;
        let w = (-x * x / (2.0 * s2) - peak).exp();
        num += -x / s2 * w;
        den += w;
    }
    num / den
}

/// Unnormalized log-density of the truncated wrapped normal.
pub fn wrapped_normal_log_density(u: f64, sigma: f64) -> f64 {
    let u = canonical(u);
    let zmax = truncation(sigma);
    let terms: Vec<f64> = (-zmax..=zmax)
        .map(|z| {
            let x = u + z as f64;
            -x * x / (2.0 * sigma * sigma)
        })
        .collect();
    let peak = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    peak + terms.iter().map(|a| (a - peak).exp()).sum::<f64>().ln()
}

/// Score of `q(F_t | F_0)` with respect to `F_t`, entry by entry.
pub fn wrapped_normal_score(f_t: &[Frac], f_0: &[Frac], sigma: f64) -> Result<Vec<Frac>> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    if f_t.len() != f_0.len() {
        return Err(Error::Shape(format!("{} noisy vs {} clean sites", f_t.len(), f_0.len())));
    }
    Ok(f_t
        .iter()
        .zip(f_0)
        .map(|(a, b)| (a - b).map(|u| wrapped_normal_score_scalar(u, sigma)))
        .collect())
}

/// Noise a clean configuration to step `t`; returns `(F_t, eps)`.
pub fn forward_sample_f(
    f_0: &[Frac],
    t: usize,
    schedule: &SigmaSchedule,
    rng: &mut impl Rng,
) -> (Vec<Frac>, Vec<Frac>) {
    let sigma = schedule.sigma(t);
    let eps: Vec<Frac> = f_0
        .iter()
        .map(|_| Frac::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect();
    let f_t = f_0.iter().zip(&eps).map(|(f, e)| wrap_vec(&(f + sigma * e))).collect();
    (f_t, eps)
}

/// Monte Carlo estimate of `1 / E[score^2]` per scalar coordinate at step `t`.
pub fn lambda_weight(t: usize, schedule: &SigmaSchedule, mc_samples: usize, rng: &mut impl Rng) -> Result<f64> {
    let sigma = schedule.sigma(t);
    if mc_samples == 0 || !(sigma > 0.0) {
        return Err(Error::Domain(format!("cannot estimate lambda at t = {t} with {mc_samples} samples")));
    }
    let mut acc = 0.0;
    for _ in 0..mc_samples {
        let e: f64 = rng.sample(StandardNormal);
        let s = wrapped_normal_score_scalar(wrap(sigma * e), sigma);
        acc += s * s;
    }
    let mean = acc / mc_samples as f64;
    if !mean.is_finite() {
        return Err(Error::Domain(format!("non-finite score moment at t = {t}")));
    }
    if mean < 1e-12 {
        log::warn!("score moment at t = {t} is {mean:e}; flooring at 1e-12");
    }
    Ok(1.0 / mean.max(1e-12))
}

/// Per-step loss weights, estimated once and cached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaWeights {
    pub mc_samples: usize,
    pub seed: u64,
    weights: Vec<f64>,
}

impl LambdaWeights {
    /// Estimates every step in parallel; each step draws from its own seeded stream.
    pub fn estimate(schedule: &SigmaSchedule, mc_samples: usize, seed: u64) -> Result<Self> {
        let weights = (1..=schedule.steps)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                lambda_weight(t, schedule, mc_samples, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { mc_samples, seed, weights })
    }

    pub fn get(&self, t: usize) -> f64 {
        self.weights[t - 1]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// `lambda * ||target - estimate||^2` (squared Frobenius norm).
pub fn loss_f(score_target: &[Frac], estimate: &[Frac], lambda: f64) -> Result<f64> {
    if score_target.len() != estimate.len() {
        return Err(Error::Shape(format!("{} targets vs {} estimates", score_target.len(), estimate.len())));
    }
    Ok(lambda * score_target.iter().zip(estimate).map(|(a, b)| (a - b).norm_squared()).sum::<f64>())
}

/// Mean minimum-image distance between two configurations, in fractional units.
pub fn mean_torus_distance(a: &[Frac], b: &[Frac]) -> f64 {
    a.iter().zip(b).map(|(x, y)| periodic_diff(x, y).norm()).sum::<f64>() / a.len().max(1) as f64
}
