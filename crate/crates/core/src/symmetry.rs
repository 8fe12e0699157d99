//! Executable symmetry checks for a denoiser and its sampler.

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crystal::{Crystal, Frac, Lattice};
use crate::denoiser::{denoise, DenoiserOutput, DenoiserParams};
use crate::error::Result;
use crate::hypergraph::HypergraphSpec;
use crate::lattice_diffusion::standard_normal_matrix;
use crate::sampler::{sample_structure, NetworkModel, SampleConfig};
use crate::trainer::Schedules;

pub const O3_TOL: f64 = 1e-8;
pub const TRANSLATION_TOL: f64 = 1e-8;
pub const PERMUTATION_TOL: f64 = 1e-10;
pub const PUSHFORWARD_TOL: f64 = 1e-5;

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with `R` given a positive diagonal.
pub fn random_orthogonal(rng: &mut impl Rng) -> Matrix3<f64> {
    let qr = standard_normal_matrix(rng).qr();
    let (q, r) = (qr.q(), qr.r());
    let signs = Matrix3::from_diagonal(&r.diagonal().map(|d| if d < 0.0 { -1.0 } else { 1.0 }));
    q * signs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, trials: usize, max_deviation: f64, tolerance: f64) -> Self {
        Self { name: name.into(), trials, max_deviation, tolerance, passed: max_deviation < tolerance }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SymmetryReport {
    pub checks: Vec<CheckResult>,
}

impl SymmetryReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<24} {:>6} {:>14} {:>10}  result\n", "check", "trials", "max_deviation", "tolerance");
        for c in &self.checks {
            s.push_str(&format!(
                "{:<24} {:>6} {:>14.3e} {:>10.0e}  {}\n",
                c.name,
                c.trials,
                c.max_deviation,
                c.tolerance,
                if c.passed { "pass" } else { "FAIL" }
            ));
        }
        s
    }
}

fn run(params: &DenoiserParams, spec: &HypergraphSpec, c: &Crystal, t: usize) -> Result<DenoiserOutput> {
    let graph = spec.build(c)?;
    denoise(c.species(), c.frac_coords(), c.lattice(), t, &graph, params)
}

fn frac_deviation(a: &[Frac], b: &[Frac]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

fn random_step(params: &DenoiserParams, rng: &mut impl Rng) -> usize {
    rng.random_range(1..=params.config.diffusion_steps)
}

/// `eps_L(QL) = Q eps_L(L)` and `eps_F(QL) = eps_F(L)`.
pub fn check_o3_equivariance(
    params: &DenoiserParams,
    spec: &HypergraphSpec,
    crystal: &Crystal,
    trials: usize,
    rng: &mut impl Rng,
) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let q = random_orthogonal(rng);
        let t = random_step(params, rng);
        let base = run(params, spec, crystal, t)?;
        let rotated = run(params, spec, &crystal.with_lattice(q * crystal.lattice())?, t)?;
        worst = worst
            .max((rotated.eps_lattice - q * base.eps_lattice).amax())
            .max(frac_deviation(&rotated.eps_frac, &base.eps_frac));
    }
    Ok(CheckResult::new("o3_equivariance", trials, worst, O3_TOL))
}

/// Both outputs unchanged under `F -> wrap(F + t)`, hypergraph rebuilt.
pub fn check_periodic_translation(
    params: &DenoiserParams,
    spec: &HypergraphSpec,
    crystal: &Crystal,
    trials: usize,
    rng: &mut impl Rng,
) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let shift = Frac::from_fn(|_, _| rng.random_range(-3.0..3.0));
        let t = random_step(params, rng);
        let base = run(params, spec, crystal, t)?;
        let moved = run(params, spec, &crystal.translated(&shift)?, t)?;
        worst = worst
            .max((moved.eps_lattice - base.eps_lattice).amax())
            .max(frac_deviation(&moved.eps_frac, &base.eps_frac));
    }
    Ok(CheckResult::new("periodic_translation", trials, worst, TRANSLATION_TOL))
}

/// Permuting the atoms permutes the coordinate output and leaves the lattice output alone.
pub fn check_permutation(
    params: &DenoiserParams,
    spec: &HypergraphSpec,
    crystal: &Crystal,
    trials: usize,
    rng: &mut impl Rng,
) -> Result<CheckResult> {
    use rand::seq::SliceRandom;
    let graph = spec.build(crystal)?;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mut perm: Vec<usize> = (0..crystal.num_atoms()).collect();
        perm.shuffle(rng);
        let t = random_step(params, rng);
        let c = crystal.permuted(&perm)?;
        let base = denoise(crystal.species(), crystal.frac_coords(), crystal.lattice(), t, &graph, params)?;
        let out = denoise(c.species(), c.frac_coords(), c.lattice(), t, &graph.relabeled(&perm)?, params)?;
        let expected: Vec<Frac> = perm.iter().map(|&i| base.eps_frac[i]).collect();
        worst = worst
            .max((out.eps_lattice - base.eps_lattice).amax())
            .max(frac_deviation(&out.eps_frac, &expected));
    }
    Ok(CheckResult::new("permutation", trials, worst, PERMUTATION_TOL))
}

/// Paired sampler runs from one seed, the second with the initial lattice and
/// every lattice-noise draw rotated by `Q`; the final lattices must differ by `Q`.
pub fn check_sampler_pushforward(
    params: &DenoiserParams,
    schedules: &Schedules,
    spec: &HypergraphSpec,
    species: &[usize],
    seeds: &[u64],
    rotations: usize,
    rng: &mut impl Rng,
) -> Result<CheckResult> {
    let model = NetworkModel { params, schedules, hypergraph: spec };
    let config = SampleConfig { hypergraph: *spec, ..SampleConfig::default() };
    let k = params.config.num_species;
    let mut worst: f64 = 0.0;
    for &seed in seeds {
        let base = sample_structure(species, k, &model, schedules, &config, None, &mut ChaCha8Rng::seed_from_u64(seed))?;
        for _ in 0..rotations {
            let q = random_orthogonal(rng);
            let turned =
                sample_structure(species, k, &model, schedules, &config, Some(&q), &mut ChaCha8Rng::seed_from_u64(seed))?;
            let lattice_dev = (turned.crystal.lattice() - q * base.crystal.lattice()).amax();
            worst = worst.max(lattice_dev);
        }
    }
    Ok(CheckResult::new("sampler_pushforward", seeds.len() * rotations, worst, PUSHFORWARD_TOL))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub trials: usize,
    pub seed: u64,
    pub hypergraph: HypergraphSpec,
    pub pushforward_seeds: usize,
    pub pushforward_rotations: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { trials: 20, seed: 0, hypergraph: HypergraphSpec::default(), pushforward_seeds: 3, pushforward_rotations: 3 }
    }
}

/// All four checks against one test crystal.
pub fn run_suite(
    params: &DenoiserParams,
    schedules: &Schedules,
    crystal: &Crystal,
    config: &SuiteConfig,
) -> Result<SymmetryReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let spec = &config.hypergraph;
    let seeds: Vec<u64> = (0..config.pushforward_seeds).map(|_| rng.random()).collect();
    Ok(SymmetryReport {
        checks: vec![
            check_o3_equivariance(params, spec, crystal, config.trials, &mut rng)?,
            check_periodic_translation(params, spec, crystal, config.trials, &mut rng)?,
            check_permutation(params, spec, crystal, config.trials, &mut rng)?,
            check_sampler_pushforward(
                params,
                schedules,
                spec,
                crystal.species(),
                &seeds,
                config.pushforward_rotations,
                &mut rng,
            )?,
        ],
    })
}

/// A skewed cell with random sites, used as the default probe structure.
pub fn probe_crystal(num_species: usize, num_atoms: usize, rng: &mut impl Rng) -> Result<Crystal> {
    let lattice = Lattice::from_fn(|r, c| if r == c { rng.random_range(3.5..5.0) } else { rng.random_range(-0.8..0.8) });
    let frac = (0..num_atoms).map(|_| Frac::new(rng.random(), rng.random(), rng.random())).collect();
    Crystal::new((0..num_atoms).map(|i| i % num_species.max(1)).collect(), num_species, frac, lattice)
}
