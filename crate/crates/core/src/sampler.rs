//! Reverse diffusion: ancestral steps on the lattice, predictor-corrector on coordinates.

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coord_diffusion::{self, SigmaSchedule};
use crate::crystal::{lattice_to_rows, wrap_vec, Crystal, Frac, Lattice};
use crate::denoiser::{self, DenoiserParams};
use crate::error::{Error, Result};
use crate::hypergraph::HypergraphSpec;
use crate::lattice_diffusion::{self, standard_normal_matrix};
use crate::trainer::Schedules;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub corrector_steps: usize,
    /// Signal-to-noise ratio of the Langevin corrector.
    pub snr: f64,
    pub seed: u64,
    pub hypergraph: HypergraphSpec,
    #[serde(default)]
    pub record_trajectory: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { corrector_steps: 1, snr: 0.16, seed: 0, hypergraph: HypergraphSpec::default(), record_trajectory: false }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.snr > 0.0) {
            return Err(Error::Config(format!("snr must be positive, got {}", self.snr)));
        }
        Ok(())
    }
}

/// Lattice-noise estimate and coordinate score at one noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub eps_lattice: Matrix3<f64>,
    pub score_frac: Vec<Frac>,
}

pub trait ScoreModel: Sync {
    fn predict(&self, species: &[usize], frac: &[Frac], lattice: &Lattice, t: usize) -> Result<Prediction>;
}

/// The trained network; the hypergraph is rebuilt from the current state on every call.
pub struct NetworkModel<'a> {
    pub params: &'a DenoiserParams,
    pub schedules: &'a Schedules,
    pub hypergraph: &'a HypergraphSpec,
}

impl ScoreModel for NetworkModel<'_> {
    fn predict(&self, species: &[usize], frac: &[Frac], lattice: &Lattice, t: usize) -> Result<Prediction> {
        self.schedules.check_model(&self.params.config)?;
        let graph = self.hypergraph.build_raw(frac, lattice)?;
        let out = denoiser::denoise(species, frac, lattice, t, &graph, self.params)?;
        let inv = 1.0 / self.schedules.lambda.get(t).sqrt();
        Ok(Prediction { eps_lattice: out.eps_lattice, score_frac: out.eps_frac.iter().map(|r| r * inv).collect() })
    }
}

/// Exact noise and score for a single known target structure.
pub struct OracleModel<'a> {
    pub target: &'a Crystal,
    pub schedules: &'a Schedules,
}

impl ScoreModel for OracleModel<'_> {
    fn predict(&self, _species: &[usize], frac: &[Frac], lattice: &Lattice, t: usize) -> Result<Prediction> {
        let ab = self.schedules.beta.alpha_bar(t);
        let eps_lattice = (lattice - ab.sqrt() * self.target.lattice()) / (1.0 - ab).sqrt();
        let score_frac =
            coord_diffusion::wrapped_normal_score(frac, self.target.frac_coords(), self.schedules.sigma.sigma(t))?;
        Ok(Prediction { eps_lattice, score_frac })
    }
}

fn standard_normal_frac(n: usize, rng: &mut impl Rng) -> Vec<Frac> {
    (0..n).map(|_| Frac::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))).collect()
}

fn frobenius(v: &[Frac]) -> f64 {
    v.iter().map(|x| x.norm_squared()).sum::<f64>().sqrt()
}

/// `F + (sigma_t^2 - sigma_{t-1}^2) s + sqrt(sigma_t^2 - sigma_{t-1}^2) z`, no noise at `t = 1`.
pub fn predictor_step_f(
    frac: &[Frac],
    score: &[Frac],
    t: usize,
    schedule: &SigmaSchedule,
    rng: &mut impl Rng,
) -> Vec<Frac> {
    let step = schedule.sigma(t).powi(2) - schedule.sigma(t - 1).powi(2);
    let noise = if t > 1 { Some(standard_normal_frac(frac.len(), rng)) } else { None };
    predictor_update(frac, score, step, noise.as_deref())
}

fn predictor_update(frac: &[Frac], score: &[Frac], step: f64, noise: Option<&[Frac]>) -> Vec<Frac> {
    let root = step.max(0.0).sqrt();
    frac.iter()
        .zip(score)
        .enumerate()
        .map(|(i, (f, s))| {
            let z = noise.map_or(Frac::zeros(), |z| z[i]);
            wrap_vec(&(f + step * s + root * z))
        })
        .collect()
}

/// Langevin step with `delta = 2 (snr ||z|| / ||s||)^2`, capped at `0.25 sigma^2`.
/// A zero score leaves `F` unchanged.
pub fn corrector_step_f(frac: &[Frac], score: &[Frac], snr: f64, sigma: f64, rng: &mut impl Rng) -> Vec<Frac> {
    let z = standard_normal_frac(frac.len(), rng);
    let score_norm = frobenius(score);
    if score_norm == 0.0 || !score_norm.is_finite() {
        return frac.to_vec();
    }
    let delta = (2.0 * (snr * frobenius(&z) / score_norm).powi(2)).min(0.25 * sigma * sigma);
    let root = (2.0 * delta).sqrt();
    frac.iter().zip(score).zip(&z).map(|((f, s), z)| wrap_vec(&(f + delta * s + root * z))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFrame {
    pub t: usize,
    pub lattice: [[f64; 3]; 3],
    pub frac_coords: Vec<[f64; 3]>,
}

impl TrajectoryFrame {
    fn new(t: usize, frac: &[Frac], lattice: &Lattice) -> Self {
        Self { t, lattice: lattice_to_rows(lattice), frac_coords: frac.iter().map(|f| [f.x, f.y, f.z]).collect() }
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub crystal: Crystal,
    pub trajectory: Vec<TrajectoryFrame>,
}

fn ensure_finite(frac: &[Frac], lattice: &Lattice, step: usize) -> Result<()> {
    if lattice.iter().any(|x| !x.is_finite()) {
        return Err(Error::Divergence { step, what: "lattice".into() });
    }
    if frac.iter().any(|f| f.iter().any(|x| !x.is_finite())) {
        return Err(Error::Divergence { step, what: "fractional coordinates".into() });
    }
    Ok(())
}

/// Generate one structure with the given species. `frame` rotates the initial
/// lattice and every lattice-noise draw; an equivariant model then yields the
/// rotated result of the unrotated run.
pub fn sample_structure(
    species: &[usize],
    num_species: usize,
    model: &impl ScoreModel,
    schedules: &Schedules,
    config: &SampleConfig,
    frame: Option<&Matrix3<f64>>,
    rng: &mut impl Rng,
) -> Result<SampleOutput> {
    config.validate()?;
    if species.is_empty() {
        return Err(Error::InvalidCrystal("composition is empty".into()));
    }
    if let Some(&s) = species.iter().find(|&&s| s >= num_species) {
        return Err(Error::Species { index: s, size: num_species });
    }
    let rotate = |m: Matrix3<f64>| frame.map_or(m, |q| q * m);
    let n = species.len();
    let steps = schedules.steps();
    let mut lattice = rotate(standard_normal_matrix(rng));
    let mut frac: Vec<Frac> = (0..n).map(|_| Frac::new(rng.random(), rng.random(), rng.random())).collect();
    let mut trajectory = Vec::new();
    if config.record_trajectory {
        trajectory.push(TrajectoryFrame::new(steps, &frac, &lattice));
    }

    for t in (1..=steps).rev() {
        let pred = model.predict(species, &frac, &lattice, t)?;
        let mean = lattice_diffusion::reverse_mean(&lattice, &pred.eps_lattice, t, &schedules.beta);
        lattice = if t > 1 {
            mean + schedules.beta.posterior_variance(t).sqrt() * rotate(standard_normal_matrix(rng))
        } else {
            mean
        };
        frac = predictor_step_f(&frac, &pred.score_frac, t, &schedules.sigma, rng);
        ensure_finite(&frac, &lattice, t)?;
        if t > 1 {
            for _ in 0..config.corrector_steps {
                let pred = model.predict(species, &frac, &lattice, t - 1)?;
                frac = corrector_step_f(&frac, &pred.score_frac, config.snr, schedules.sigma.sigma(t - 1), rng);
                ensure_finite(&frac, &lattice, t)?;
            }
        }
        if config.record_trajectory {
            trajectory.push(TrajectoryFrame::new(t - 1, &frac, &lattice));
        }
    }
    let crystal = Crystal::new(species.to_vec(), num_species, frac, lattice)
        .map_err(|e| Error::Divergence { step: 0, what: format!("final structure: {e}") })?;
    Ok(SampleOutput { crystal, trajectory })
}

/// Independent samples in parallel; sample `k` uses the `k`-th seed drawn from `config.seed`.
pub fn sample_many(
    compositions: &[Vec<usize>],
    num_species: usize,
    model: &impl ScoreModel,
    schedules: &Schedules,
    config: &SampleConfig,
) -> Result<Vec<SampleOutput>> {
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let seeds: Vec<u64> = compositions.iter().map(|_| master.random()).collect();
    compositions
        .par_iter()
        .zip(seeds)
        .map(|(species, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_structure(species, num_species, model, schedules, config, None, &mut rng)
        })
        .collect()
}
