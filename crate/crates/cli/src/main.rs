//! `crysdiff` command-line driver.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crysdiff::checkpoint::Checkpoint;
use crysdiff::dataset::{self, Dataset};
use crysdiff::denoiser::{DenoiserConfig, DenoiserParams};
use crysdiff::evaluation::{self, Tolerances};
use crysdiff::hypergraph::{Extent, HyperedgeMode, HypergraphSpec, DEFAULT_MAX_ORDER, DEFAULT_RADIUS_SCALE, DEFAULT_SIDE_SCALE};
use crysdiff::sampler::{self, NetworkModel, SampleConfig};
use crysdiff::symmetry::{self, SuiteConfig};
use crysdiff::trainer::{self, DiffusionConfig, Schedules, TrainConfig};

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "crysdiff", version, about = "Crystal structure diffusion toolkit", args_override_self = true)]
struct Cli {
    /// Master seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON file of flag values; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic ABX3 perovskite dataset as JSONL.
    SynthData(SynthArgs),
    /// Build one hypergraph per structure.
    BuildHypergraph(HypergraphArgs),
    /// Train a denoiser and write a checkpoint.
    Train(TrainArgs),
    /// Generate structures for the compositions of a dataset.
    Sample(SampleArgs),
    /// Match predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Run the equivariance and invariance checks.
    VerifySymmetry(SymmetryArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0.02)]
    jitter: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write `<stem>_train`, `_val` and `_test` files with these fractions.
    #[arg(long, value_delimiter = ',')]
    split: Option<Vec<f64>>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum Mode {
    Sphere,
    Cube,
    Pairwise,
}

#[derive(Args, Debug, Clone)]
struct GraphFlags {
    #[arg(long, value_enum, default_value = "sphere")]
    mode: Mode,
    /// Absolute sphere radius; default scales with the shortest basis vector.
    #[arg(long, conflicts_with = "side")]
    radius: Option<f64>,
    /// Absolute cube side; default scales with the shortest basis vector.
    #[arg(long)]
    side: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_MAX_ORDER)]
    max_order: usize,
    /// Add every atom pair as an extra order-2 hyperedge.
    #[arg(long)]
    augment_pairwise: bool,
}

impl GraphFlags {
    fn spec(&self) -> anyhow::Result<HypergraphSpec> {
        let mode = match self.mode {
            Mode::Sphere => {
                if self.side.is_some() {
                    bail!(UsageError("--side only applies to --mode cube".into()));
                }
                HyperedgeMode::Sphere {
                    radius: self.radius.map_or(Extent::RelativeToShortest(DEFAULT_RADIUS_SCALE), Extent::Absolute),
                }
            }
            Mode::Cube => {
                if self.radius.is_some() {
                    bail!(UsageError("--radius only applies to --mode sphere".into()));
                }
                HyperedgeMode::Cube {
                    side: self
                        .side
                        .map_or(Extent::RelativeToShortest(DEFAULT_RADIUS_SCALE * DEFAULT_SIDE_SCALE), Extent::Absolute),
                }
            }
            Mode::Pairwise => HyperedgeMode::Pairwise,
        };
        Ok(HypergraphSpec { mode, max_order: self.max_order, augment_pairwise: self.augment_pairwise })
    }
}

#[derive(Args, Debug)]
struct HypergraphArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    graph: GraphFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ModelFlags {
    #[arg(long, default_value_t = 128)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 16)]
    fourier_k: usize,
    #[arg(long, default_value_t = 64)]
    time_embed_dim: usize,
    #[arg(long, default_value_t = 16)]
    order_embed_dim: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Number of diffusion steps.
    #[arg(long = "T", default_value_t = 1000)]
    steps: usize,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Write an intermediate checkpoint every this many epochs.
    #[arg(long, default_value_t = 0)]
    checkpoint_interval: usize,
    #[arg(long, default_value_t = crysdiff::coord_diffusion::DEFAULT_LAMBDA_MC_SAMPLES)]
    lambda_samples: usize,
    #[arg(long)]
    out_ckpt: PathBuf,
    /// Per-epoch loss CSV; defaults to `loss.csv` next to the checkpoint.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[command(flatten)]
    graph: GraphFlags,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset whose structures supply the compositions to generate.
    #[arg(long)]
    composition_from: PathBuf,
    /// Samples per composition.
    #[arg(long, default_value_t = 1)]
    num_samples: usize,
    #[arg(long, default_value_t = 1)]
    corrector_steps: usize,
    #[arg(long, default_value_t = 0.16)]
    snr: f64,
    #[arg(long)]
    out: PathBuf,
    /// Write every intermediate state as JSONL.
    #[arg(long)]
    trajectory: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    stol: f64,
    #[arg(long, default_value_t = 10.0)]
    angle_tol: f64,
    #[arg(long, default_value_t = 0.3)]
    ltol: f64,
    /// Summary JSON.
    #[arg(long)]
    out: PathBuf,
    /// Per-structure CSV.
    #[arg(long)]
    rows: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[group(id = "model_source", required = true, multiple = false, args = ["ckpt", "random_init"])]
struct SymmetryArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Check a freshly initialized network.
    #[arg(long)]
    random_init: bool,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Diffusion steps for a random-init network.
    #[arg(long = "T", default_value_t = 50)]
    steps: usize,
    /// Atoms in the probe crystal.
    #[arg(long, default_value_t = 6)]
    atoms: usize,
    #[arg(long, default_value_t = 3)]
    num_species: usize,
    /// Hypergraph for a random-init network; a checkpoint brings its own.
    #[command(flatten)]
    graph: GraphFlags,
    /// Report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

struct Ctx {
    seed: u64,
    out_dir: Option<PathBuf>,
}

impl Ctx {
    fn output(&self, p: &Path) -> anyhow::Result<PathBuf> {
        let path = match &self.out_dir {
            Some(d) if p.is_relative() => d.join(p),
            _ => p.to_path_buf(),
        };
        if let Some(parent) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(path)
    }

    fn write(&self, p: &Path, text: &str) -> anyhow::Result<PathBuf> {
        let path = self.output(p)?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn load_dataset(path: &Path, num_species: Option<usize>) -> anyhow::Result<Dataset> {
    dataset::load_jsonl(path, num_species).with_context(|| format!("loading {}", path.display()))
}

fn synth_data(ctx: &Ctx, a: &SynthArgs) -> anyhow::Result<u8> {
    if a.split.as_ref().is_some_and(|f| f.len() != 3) {
        bail!(UsageError("--split takes three comma-separated fractions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let data = dataset::synth_perovskite(a.count, a.jitter, &mut rng)?;
    let path = ctx.write(&a.out, &data.to_jsonl())?;
    log::info!("wrote {} structures to {}", data.len(), path.display());
    if let Some(f) = &a.split {
        let (train, val, test) = dataset::split(&data, [f[0], f[1], f[2]], ctx.seed)?;
        let stem = a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
        for (part, name) in [(train, "train"), (val, "val"), (test, "test")] {
            ctx.write(&a.out.with_file_name(format!("{stem}_{name}.jsonl")), &part.to_jsonl())?;
        }
    }
    Ok(0)
}

fn build_hypergraph(ctx: &Ctx, a: &HypergraphArgs) -> anyhow::Result<u8> {
    let data = load_dataset(&a.input, None)?;
    let spec = a.graph.spec()?;
    let mut out = String::new();
    for (id, c) in data.iter() {
        let h = spec.build(c).with_context(|| format!("structure {id}"))?;
        let graph: serde_json::Value = serde_json::from_str(&h.to_json())?;
        out.push_str(&serde_json::json!({ "id": id, "hypergraph": graph }).to_string());
        out.push('\n');
    }
    ctx.write(&a.out, &out)?;
    Ok(0)
}

fn train(ctx: &Ctx, a: &TrainArgs) -> anyhow::Result<u8> {
    let data = load_dataset(&a.data, None)?;
    if data.is_empty() {
        bail!("training set {} is empty", a.data.display());
    }
    let spec = a.graph.spec()?;
    let schedules = Schedules::new(DiffusionConfig {
        lambda_mc_samples: a.lambda_samples,
        lambda_seed: ctx.seed,
        ..DiffusionConfig::new(a.steps)
    })?;
    let m = &a.model;
    let model = DenoiserConfig {
        hidden_dim: m.hidden_dim,
        num_layers: m.layers,
        fourier_k: m.fourier_k,
        time_embed_dim: m.time_embed_dim,
        order_embed_dim: m.order_embed_dim,
        max_order: a.graph.max_order.max(2),
        diffusion_steps: a.steps,
        ..DenoiserConfig::new(data.num_species())
    };
    let params = DenoiserParams::init(model, ctx.seed)?;
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        seed: ctx.seed,
        hypergraph: spec,
        checkpoint_interval: a.checkpoint_interval,
        max_steps: a.max_steps,
        ..TrainConfig::default()
    };
    let ckpt_path = ctx.output(&a.out_ckpt)?;
    let outcome = trainer::train_loop(data.crystals(), params, &schedules, &config, |epoch, p| {
        let path = ckpt_path.with_file_name(format!(
            "{}_epoch{epoch}.json",
            ckpt_path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint")
        ));
        Checkpoint::new(p.clone(), &schedules, spec).save(&path)
    })?;
    Checkpoint::new(outcome.params, &schedules, spec).save(&ckpt_path)?;
    let csv = a.loss_csv.clone().unwrap_or_else(|| a.out_ckpt.with_file_name("loss.csv"));
    ctx.write(&csv, &trainer::loss_curve_csv(&outcome.curve))?;
    log::info!("trained {} steps; checkpoint {}", outcome.steps, ckpt_path.display());
    Ok(0)
}

fn sample(ctx: &Ctx, a: &SampleArgs) -> anyhow::Result<u8> {
    let ck = Checkpoint::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let k = ck.params.config.num_species;
    let truth = load_dataset(&a.composition_from, Some(k))?;
    let schedules = ck.schedules()?;
    let config = SampleConfig {
        corrector_steps: a.corrector_steps,
        snr: a.snr,
        seed: ctx.seed,
        hypergraph: ck.hypergraph,
        record_trajectory: a.trajectory.is_some(),
    };
    config.validate()?;
    let model = NetworkModel { params: &ck.params, schedules: &schedules, hypergraph: &ck.hypergraph };
    let mut ids = Vec::new();
    let mut compositions = Vec::new();
    for (id, c) in truth.iter() {
        for s in 0..a.num_samples {
            ids.push(if a.num_samples == 1 { id.to_string() } else { format!("{id}#{s}") });
            compositions.push(c.species().to_vec());
        }
    }
    let outputs = sampler::sample_many(&compositions, k, &model, &schedules, &config)?;
    if let Some(path) = &a.trajectory {
        let mut text = String::new();
        for (id, o) in ids.iter().zip(&outputs) {
            for frame in &o.trajectory {
                text.push_str(&serde_json::json!({ "id": id, "frame": frame }).to_string());
                text.push('\n');
            }
        }
        ctx.write(path, &text)?;
    }
    let pred = Dataset::new(ids, outputs.into_iter().map(|o| o.crystal).collect(), truth.vocabulary().to_vec())?;
    ctx.write(&a.out, &pred.to_jsonl())?;
    Ok(0)
}

fn evaluate(ctx: &Ctx, a: &EvaluateArgs) -> anyhow::Result<u8> {
    let truth = load_dataset(&a.truth, None)?;
    let pred = load_dataset(&a.pred, Some(truth.num_species()))?;
    let tol = Tolerances { stol: a.stol, angle_tol: a.angle_tol, ltol: a.ltol };
    let (rows, summary) = evaluation::evaluate(&pred, &truth, &tol)?;
    let json = serde_json::to_string_pretty(&summary)?;
    ctx.write(&a.out, &json)?;
    if let Some(p) = &a.rows {
        ctx.write(p, &evaluation::report_csv(&rows))?;
    }
    println!("{json}");
    Ok(0)
}

fn verify_symmetry(ctx: &Ctx, a: &SymmetryArgs) -> anyhow::Result<u8> {
    let (params, schedules, spec) = match &a.ckpt {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            let s = ck.schedules()?;
            (ck.params, s, ck.hypergraph)
        }
        None => {
            let cfg = DenoiserConfig {
                max_order: a.graph.max_order.max(2),
                diffusion_steps: a.steps,
                ..DenoiserConfig::new(a.num_species)
            };
            let s = Schedules::new(DiffusionConfig { lambda_seed: ctx.seed, ..DiffusionConfig::new(a.steps) })?;
            (DenoiserParams::init(cfg, ctx.seed)?, s, a.graph.spec()?)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let crystal = symmetry::probe_crystal(params.config.num_species, a.atoms, &mut rng)?;
    let config = SuiteConfig { trials: a.trials, seed: ctx.seed, hypergraph: spec, ..SuiteConfig::default() };
    let report = symmetry::run_suite(&params, &schedules, &crystal, &config)?;
    print!("{}", report.table());
    if let Some(p) = &a.out {
        ctx.write(p, &report.to_json())?;
    }
    Ok(if report.all_passed() { 0 } else { EXIT_CHECK_FAILED })
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("CRYSDIFF_THREADS") {
        let n: usize = v.parse().map_err(|_| UsageError(format!("CRYSDIFF_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            bail!(UsageError("CRYSDIFF_THREADS must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    init_threads()?;
    let ctx = Ctx { seed: cli.seed, out_dir: cli.out_dir };
    match &cli.command {
        Command::SynthData(a) => synth_data(&ctx, a),
        Command::BuildHypergraph(a) => build_hypergraph(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Sample(a) => sample(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::VerifySymmetry(a) => verify_symmetry(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv = match config::merge_config_file(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_CHECK_FAILED)
            }
        }
    }
}
