//! DDPM on the raw 3x3 lattice matrix.

use nalgebra::Matrix3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::crystal::Lattice;
use crate::error::{Error, Result};

const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl BetaSchedule {
    /// Build from explicit betas; `alpha_bar` is their running product.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self { steps: betas.len(), betas, alphas, alpha_bars })
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Posterior variance `beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

fn cosine_beta(t: usize, steps: usize) -> f64 {
    let f = |t: usize| {
        let x = ((t as f64 / steps as f64) + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0);
    (1.0 - (f(t) / f0) / (f(t - 1) / f0)).clamp(1e-5, 0.999)
}

/// Cosine `alpha_bar` schedule with offset `s = 0.008`; betas clipped to `[1e-5, 0.999]`.
pub fn make_cosine_schedule(steps: usize) -> Result<BetaSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("cosine schedule needs T >= 2, got {steps}")));
    }
    BetaSchedule::from_betas((1..=steps).map(|t| cosine_beta(t, steps)).collect())
}

/// `alpha_bar_t` of [`make_cosine_schedule`] without building the table; bit-identical to it.
pub fn cosine_alpha_bar(t: usize, steps: usize) -> f64 {
    (1..=t).fold(1.0, |acc, k| acc * (1.0 - cosine_beta(k, steps)))
}

pub fn standard_normal_matrix(rng: &mut impl Rng) -> Matrix3<f64> {
    Matrix3::from_fn(|_, _| rng.sample(StandardNormal))
}

/// `L_t = sqrt(alpha_bar_t) L_0 + sqrt(1 - alpha_bar_t) eps`; returns `(L_t, eps)`.
pub fn forward_sample_l(
    l_0: &Lattice,
    t: usize,
    schedule: &BetaSchedule,
    rng: &mut impl Rng,
) -> (Lattice, Matrix3<f64>) {
    let eps = standard_normal_matrix(rng);
    (noised_lattice(l_0, &eps, schedule.alpha_bar(t)), eps)
}

pub fn noised_lattice(l_0: &Lattice, eps: &Matrix3<f64>, alpha_bar: f64) -> Lattice {
    alpha_bar.sqrt() * l_0 + (1.0 - alpha_bar).sqrt() * eps
}

/// `mu = (L_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)`.
pub fn reverse_mean(l_t: &Lattice, eps_hat: &Matrix3<f64>, t: usize, schedule: &BetaSchedule) -> Lattice {
    let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    (l_t - coef * eps_hat) / schedule.alpha(t).sqrt()
}

/// Squared Frobenius distance between true and predicted lattice noise.
pub fn loss_l(eps: &Matrix3<f64>, eps_hat: &Matrix3<f64>) -> f64 {
    (eps - eps_hat).norm_squared()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_schedule_shape() {
        let s = make_cosine_schedule(1000).unwrap();
        assert!(s.alpha_bar(1) > 0.999);
        assert!(s.alpha_bar(1000) < 0.01);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
        let mut prod = 1.0;
        for t in 1..=1000 {
            prod *= 1.0 - s.beta(t);
            assert!((s.alpha_bar(t) - prod).abs() < 1e-12);
        }
        assert!(make_cosine_schedule(1).is_err());
        for t in [0, 1, 17, 999, 1000] {
            assert_eq!(cosine_alpha_bar(t, 1000), s.alpha_bar(t));
        }
    }

    #[test]
    fn forward_endpoints() {
        let l0 = Matrix3::new(4.0, 0.1, 0.0, 0.0, 3.9, 0.2, 0.1, 0.0, 4.1);
        let eps = Matrix3::from_element(0.3);
        assert_eq!(noised_lattice(&l0, &eps, 1.0), l0);
        assert_eq!(noised_lattice(&l0, &eps, 0.0), eps);
    }

    #[test]
    fn forward_rotation_pushforward() {
        let s = make_cosine_schedule(100).unwrap();
        let l0 = Matrix3::new(4.0, 0.1, 0.0, 0.0, 3.9, 0.2, 0.1, 0.0, 4.1);
        let (lt, eps) = forward_sample_l(&l0, 40, &s, &mut ChaCha8Rng::seed_from_u64(1));
        let q = nalgebra::Rotation3::from_euler_angles(0.3, -1.1, 2.0).into_inner();
        let rotated = noised_lattice(&(q * l0), &(q * eps), s.alpha_bar(40));
        assert!((rotated - q * lt).amax() < 1e-12);
    }

    #[test]
    fn reverse_mean_examples() {
        let s = make_cosine_schedule(100).unwrap();
        let lt = Matrix3::new(1.0, 2.0, 0.5, -0.3, 0.8, 0.1, 0.0, 0.4, 1.5);
        assert_eq!(reverse_mean(&lt, &Matrix3::zeros(), 30, &s), lt / s.alpha(30).sqrt());
        let eh = Matrix3::new(0.2, -0.1, 0.4, 0.0, 0.3, -0.5, 0.1, 0.1, 0.2);
        let mu = reverse_mean(&lt, &eh, 30, &s);
        let (a, b, ab) = (s.alpha(30), s.beta(30), s.alpha_bar(30));
        for r in 0..3 {
            for c in 0..3 {
                let direct = 1.0 / a.sqrt() * (lt[(r, c)] - b / (1.0 - ab).sqrt() * eh[(r, c)]);
                assert!((mu[(r, c)] - direct).abs() < 1e-14);
            }
        }
        // zero beta leaves only the 1/sqrt(alpha) scaling
        let zero = BetaSchedule { steps: 1, betas: vec![0.0], alphas: vec![1.0], alpha_bars: vec![0.5] };
        assert_eq!(reverse_mean(&lt, &eh, 1, &zero), lt);
    }

    #[test]
    fn reverse_mean_with_true_noise_is_posterior_mean() {
        // with eps_hat = eps the reverse mean equals the mean of q(L_{t-1} | L_t, L_0)
        let s = make_cosine_schedule(200).unwrap();
        let l0 = Matrix3::new(4.0, 0.0, 0.3, 0.1, 3.8, 0.0, 0.0, 0.2, 4.2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in [2, 50, 120, 199] {
            let (lt, eps) = forward_sample_l(&l0, t, &s, &mut rng);
            let (ab, ab_prev, a, b) = (s.alpha_bar(t), s.alpha_bar(t - 1), s.alpha(t), s.beta(t));
            let posterior = ab_prev.sqrt() * b / (1.0 - ab) * l0 + a.sqrt() * (1.0 - ab_prev) / (1.0 - ab) * lt;
            assert!((reverse_mean(&lt, &eps, t, &s) - posterior).amax() < 1e-10);
        }
    }

    #[test]
    fn loss_examples() {
        let e = Matrix3::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0);
        assert_eq!(loss_l(&e, &e), 0.0);
        assert_eq!(loss_l(&e, &e.add_scalar(1.0)), 9.0);
        let f = Matrix3::new(0.5, -1.0, 0.0, 2.0, 1.0, 0.3, -0.7, 0.0, 1.0);
        let oracle: f64 = e.iter().zip(f.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!((loss_l(&e, &f) - oracle).abs() < 1e-12);
    }

    #[test]
    fn schedule_serializes() {
        let s = make_cosine_schedule(10).unwrap();
        let back: BetaSchedule = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
