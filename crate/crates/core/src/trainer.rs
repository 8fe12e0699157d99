//! Joint lattice/coordinate denoising objective, minibatch loop and Adam updates.
//!
//! The coordinate head predicts a normalized score `sqrt(lambda_t) * s`; the
//! score estimate used by the sampler is `raw / sqrt(lambda_t)`. The weighted
//! loss `lambda * ||s - raw / sqrt(lambda)||^2` is then `||sqrt(lambda) s - raw||^2`,
//! which keeps the head output at unit scale across noise levels.

use nalgebra::Matrix3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coord_diffusion::{self, LambdaWeights, SigmaSchedule};
use crate::crystal::{wrap_vec, Crystal, Frac};
use crate::denoiser::{self, DenoiserParams};
use crate::error::{Error, Result};
use crate::hypergraph::HypergraphSpec;
use crate::lattice_diffusion::{self, BetaSchedule};
use crate::nn::Adam;

/// Noise schedule settings; everything needed to rebuild [`Schedules`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub lambda_mc_samples: usize,
    pub lambda_seed: u64,
}

impl DiffusionConfig {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            sigma_min: coord_diffusion::DEFAULT_SIGMA_MIN,
            sigma_max: coord_diffusion::DEFAULT_SIGMA_MAX,
            lambda_mc_samples: coord_diffusion::DEFAULT_LAMBDA_MC_SAMPLES,
            lambda_seed: 0,
        }
    }
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self::new(1000)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedules {
    pub config: DiffusionConfig,
    pub beta: BetaSchedule,
    pub sigma: SigmaSchedule,
    pub lambda: LambdaWeights,
}

impl Schedules {
    pub fn new(config: DiffusionConfig) -> Result<Self> {
        let sigma = SigmaSchedule::new(config.steps, config.sigma_min, config.sigma_max)?;
        let lambda = LambdaWeights::estimate(&sigma, config.lambda_mc_samples, config.lambda_seed)?;
        Ok(Self { config, beta: lattice_diffusion::make_cosine_schedule(config.steps)?, sigma, lambda })
    }

    /// Reuse previously estimated weights instead of sampling them again.
    pub fn with_lambda(config: DiffusionConfig, lambda: LambdaWeights) -> Result<Self> {
        if lambda.weights().len() != config.steps
            || lambda.mc_samples != config.lambda_mc_samples
            || lambda.seed != config.lambda_seed
        {
            return Err(Error::Config("lambda weights do not belong to this diffusion config".into()));
        }
        if lambda.weights().iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::Config("lambda weights must be positive and finite".into()));
        }
        let sigma = SigmaSchedule::new(config.steps, config.sigma_min, config.sigma_max)?;
        Ok(Self { config, beta: lattice_diffusion::make_cosine_schedule(config.steps)?, sigma, lambda })
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    /// The lattice head converts through its own copy of the schedule length.
    pub fn check_model(&self, model: &crate::denoiser::DenoiserConfig) -> Result<()> {
        if model.diffusion_steps != self.steps() {
            return Err(Error::Config(format!(
                "model expects {} diffusion steps, schedule has {}",
                model.diffusion_steps,
                self.steps()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weight_lattice: f64,
    pub weight_frac: f64,
    pub hypergraph: HypergraphSpec,
    /// Epochs between checkpoint callbacks; 0 disables them.
    pub checkpoint_interval: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            weight_lattice: 1.0,
            weight_frac: 1.0,
            hypergraph: HypergraphSpec::default(),
            checkpoint_interval: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.weight_lattice < 0.0 || self.weight_frac < 0.0 || !(self.weight_lattice + self.weight_frac > 0.0) {
            return Err(Error::Config("loss weights must be nonnegative with a positive sum".into()));
        }
        Ok(())
    }
}

/// The random draws of one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub t: usize,
    pub eps_lattice: Matrix3<f64>,
    pub eps_frac: Vec<Frac>,
}

impl TrainSample {
    pub fn draw(num_atoms: usize, steps: usize, rng: &mut impl Rng) -> Self {
        let t = rng.random_range(1..=steps);
        let eps_lattice = lattice_diffusion::standard_normal_matrix(rng);
        let eps_frac = (0..num_atoms)
            .map(|_| Frac::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)))
            .collect();
        Self { t, eps_lattice, eps_frac }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub lattice: f64,
    pub frac: f64,
    pub total: f64,
}

/// Loss of one example under fixed noise draws, with flat parameter gradients if asked.
pub fn sample_objective(
    crystal: &Crystal,
    params: &DenoiserParams,
    schedules: &Schedules,
    config: &TrainConfig,
    sample: &TrainSample,
    with_grad: bool,
) -> Result<(LossParts, Option<Vec<f64>>)> {
    let t = sample.t;
    if t == 0 || t > schedules.steps() || sample.eps_frac.len() != crystal.num_atoms() {
        return Err(Error::Shape("training sample does not fit the crystal or schedule".into()));
    }
    let l_t = lattice_diffusion::noised_lattice(crystal.lattice(), &sample.eps_lattice, schedules.beta.alpha_bar(t));
    let sigma = schedules.sigma.sigma(t);
    let f_0 = crystal.frac_coords();
    let f_t: Vec<Frac> = f_0.iter().zip(&sample.eps_frac).map(|(f, e)| wrap_vec(&(f + sigma * e))).collect();
    let score = coord_diffusion::wrapped_normal_score(&f_t, f_0, sigma)?;
    let root_lambda = schedules.lambda.get(t).sqrt();

    let graph = config.hypergraph.build_raw(&f_t, &l_t)?;
    let (out, tape) = denoiser::denoise_with_tape(crystal.species(), &f_t, &l_t, t, &graph, params)?;

    let diff_l = sample.eps_lattice - out.eps_lattice;
    let diff_f: Vec<Frac> = score.iter().zip(&out.eps_frac).map(|(s, r)| root_lambda * s - r).collect();
    let lattice = diff_l.norm_squared();
    let frac: f64 = diff_f.iter().map(|d| d.norm_squared()).sum();
    let parts = LossParts { lattice, frac, total: config.weight_lattice * lattice + config.weight_frac * frac };
    if !parts.total.is_finite() {
        return Err(Error::Divergence { step: t, what: "training loss".into() });
    }
    if !with_grad {
        return Ok((parts, None));
    }
    let g_l = -2.0 * config.weight_lattice * diff_l;
    let g_f: Vec<Frac> = diff_f.iter().map(|d| -2.0 * config.weight_frac * d).collect();
    let grads = denoiser::backward(params, &tape, &g_l, &g_f)?;
    Ok((parts, Some(grads.to_flat())))
}

/// One training example: draws `t`, `eps_L`, `eps_F`, and returns loss and gradients.
pub fn train_step(
    crystal: &Crystal,
    params: &DenoiserParams,
    schedules: &Schedules,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(LossParts, Vec<f64>)> {
    let sample = TrainSample::draw(crystal.num_atoms(), schedules.steps(), rng);
    let (loss, grads) = sample_objective(crystal, params, schedules, config, &sample, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

/// Batch loss and gradient, both averaged over the batch. Examples run in
/// parallel and are summed in batch order, so results do not depend on the pool size.
pub fn batch_objective(
    batch: &[(&Crystal, TrainSample)],
    params: &DenoiserParams,
    schedules: &Schedules,
    config: &TrainConfig,
) -> Result<(LossParts, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let results = batch
        .par_iter()
        .map(|(c, s)| sample_objective(c, params, schedules, config, s, true))
        .collect::<Result<Vec<_>>>()?;
    let inv = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; params.num_params()];
    let mut loss = LossParts::default();
    for (parts, g) in results {
        for (acc, x) in grad.iter_mut().zip(g.expect("gradients requested")) {
            *acc += x;
        }
        loss.lattice += parts.lattice;
        loss.frac += parts.frac;
        loss.total += parts.total;
    }
    grad.iter_mut().for_each(|g| *g *= inv);
    loss.lattice *= inv;
    loss.frac *= inv;
    loss.total *= inv;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss_l: f64,
    pub mean_loss_f: f64,
}

impl EpochLoss {
    pub const CSV_HEADER: &'static str = "epoch,mean_loss_L,mean_loss_F";

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.epoch, self.mean_loss_l, self.mean_loss_f)
    }
}

pub fn loss_curve_csv(curve: &[EpochLoss]) -> String {
    let mut s = String::from(EpochLoss::CSV_HEADER);
    s.push('\n');
    for row in curve {
        s.push_str(&row.csv_row());
        s.push('\n');
    }
    s
}

pub struct TrainOutcome {
    pub params: DenoiserParams,
    pub optimizer: Adam,
    pub curve: Vec<EpochLoss>,
    pub steps: usize,
}

/// Shuffled minibatch training. `on_checkpoint(epoch, params)` runs every
/// `checkpoint_interval` epochs and after the last one.
pub fn train_loop(
    data: &[Crystal],
    mut params: DenoiserParams,
    schedules: &Schedules,
    config: &TrainConfig,
    mut on_checkpoint: impl FnMut(usize, &DenoiserParams) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    schedules.check_model(&params.config)?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut flat = params.to_flat();
    let mut adam = Adam::new(flat.len(), config.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    let mut steps = 0;

    'epochs: for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut sum_l, mut sum_f, mut seen) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&Crystal, TrainSample)> = chunk
                .iter()
                .map(|&i| {
                    let mut sample_rng = ChaCha8Rng::seed_from_u64(rng.random());
                    (&data[i], TrainSample::draw(data[i].num_atoms(), schedules.steps(), &mut sample_rng))
                })
                .collect();
            let (loss, grad) = batch_objective(&batch, &params, schedules, config)?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { step: steps, what: "gradient".into() });
            }
            adam.step(&mut flat, &grad)?;
            params.load_flat(&flat)?;
            steps += 1;
            sum_l += loss.lattice * chunk.len() as f64;
            sum_f += loss.frac * chunk.len() as f64;
            seen += chunk.len();
            if config.max_steps.is_some_and(|m| steps >= m) {
                curve.push(EpochLoss { epoch, mean_loss_l: sum_l / seen as f64, mean_loss_f: sum_f / seen as f64 });
                on_checkpoint(epoch, &params)?;
                break 'epochs;
            }
        }
        curve.push(EpochLoss { epoch, mean_loss_l: sum_l / seen as f64, mean_loss_f: sum_f / seen as f64 });
        log::info!("epoch {epoch}: loss_L {:.4} loss_F {:.4}", sum_l / seen as f64, sum_f / seen as f64);
        let interval_hit = config.checkpoint_interval > 0 && epoch % config.checkpoint_interval == 0;
        if interval_hit || epoch == config.epochs {
            on_checkpoint(epoch, &params)?;
        }
    }
    Ok(TrainOutcome { params, optimizer: adam, curve, steps })
}
