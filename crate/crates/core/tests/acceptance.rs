//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Run with `cargo test -p crysdiff --test acceptance -- --nocapture --test-threads 1`
//! to see the lines in order.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use crysdiff::coord_diffusion::{wrapped_normal_log_density, wrapped_normal_score_scalar};
use crysdiff::crystal::{wrap_vec, Crystal, Frac, Lattice};
use crysdiff::dataset::{split, synth_perovskite, Dataset};
use crysdiff::denoiser::{fourier_psi, DenoiserConfig, DenoiserParams, Mutation};
use crysdiff::evaluation::{competition_ranks, evaluate, match_structures, rank_score, Tolerances};
use crysdiff::hypergraph::{HyperedgeMode, Hypergraph, HypergraphSpec};
use crysdiff::lattice_diffusion::{forward_sample_l, make_cosine_schedule};
use crysdiff::nn::finite_diff_check;
use crysdiff::sampler::{sample_many, NetworkModel, SampleConfig};
use crysdiff::symmetry::{self, random_orthogonal, CheckResult};
use crysdiff::trainer::{sample_objective, train_loop, DiffusionConfig, Schedules, TrainConfig, TrainSample};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(criterion: u32, name: &str, passed: bool, detail: &str, elapsed: Duration, limit: Duration) -> bool {
    let in_time = elapsed <= limit;
    let ok = passed && in_time;
    println!(
        "criterion {criterion:>2} {name}: {} ({detail}; {:.2?} of {:.0?})",
        if ok { "PASS" } else { "FAIL" },
        elapsed,
        limit
    );
    ok
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_frac(rng: &mut impl Rng) -> Frac {
    Frac::new(rng.random(), rng.random(), rng.random())
}

#[test]
fn criterion_01_fourier_features_ignore_wrapping() {
    let start = Instant::now();
    let mut r = rng(1);
    let k = DenoiserConfig::new(1).fourier_k;
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let (fi, fj) = (random_frac(&mut r), random_frac(&mut r));
        let shift = Frac::from_fn(|_, _| r.random_range(-5.0..5.0));
        let raw = fourier_psi(&(fj - fi), k);
        let wrapped = fourier_psi(&(wrap_vec(&(fj + shift)) - wrap_vec(&(fi + shift))), k);
        worst = raw.iter().zip(&wrapped).fold(worst, |m, (a, b)| m.max((a - b).abs()));
    }
    let ok = report(1, "fourier features", worst < 1e-9, &format!("max deviation {worst:.2e} < 1e-9"), start.elapsed(), Duration::from_secs(1));
    assert!(ok);
}

fn check_line(c: &CheckResult) -> String {
    format!("{} {:.2e} < {:.0e}", c.name, c.max_deviation, c.tolerance)
}

#[test]
fn criterion_02_symmetry_suite_and_mutations() {
    let start = Instant::now();
    let mut r = rng(2);
    let cfg = DenoiserConfig { diffusion_steps: 50, ..DenoiserConfig::new(3) };
    let params = DenoiserParams::init(cfg, 2).unwrap();
    let spec = HypergraphSpec::default();
    let crystal = symmetry::probe_crystal(3, 6, &mut r).unwrap();
    let trials = 20;

    let checks = [
        symmetry::check_o3_equivariance(&params, &spec, &crystal, trials, &mut r).unwrap(),
        symmetry::check_periodic_translation(&params, &spec, &crystal, trials, &mut r).unwrap(),
        symmetry::check_permutation(&params, &spec, &crystal, trials, &mut r).unwrap(),
    ];
    let tolerances_ok = checks[0].tolerance == 1e-8 && checks[1].tolerance == 1e-8 && checks[2].tolerance == 1e-10;
    let clean_ok = tolerances_ok && checks.iter().all(|c| c.passed);

    type Check = fn(&DenoiserParams, &HypergraphSpec, &Crystal, usize, &mut ChaCha8Rng) -> crysdiff::error::Result<CheckResult>;
    let pairs: [(Mutation, Check); 4] = [
        (Mutation::RawLattice, symmetry::check_o3_equivariance),
        (Mutation::UnrotatedReadout, symmetry::check_o3_equivariance),
        (Mutation::AbsolutePositions, symmetry::check_periodic_translation),
        (Mutation::PositionalEmbedding, symmetry::check_permutation),
    ];
    let mut mutants_caught = true;
    let mut mutant_lines = Vec::new();
    for (mutation, check) in pairs {
        let result = check(&params.with_mutation(Some(mutation)), &spec, &crystal, trials, &mut r).unwrap();
        mutants_caught &= !result.passed;
        mutant_lines.push(format!("{mutation:?} {}", if result.passed { "missed" } else { "caught" }));
    }
    let detail = format!(
        "{}; mutants: {}",
        checks.iter().map(check_line).collect::<Vec<_>>().join(", "),
        mutant_lines.join(", ")
    );
    let ok = report(2, "symmetry suite", clean_ok && mutants_caught, &detail, start.elapsed(), Duration::from_secs(30));
    assert!(ok);
}

#[test]
fn criterion_03_wrapped_normal_score() {
    let start = Instant::now();
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for sigma in [0.01, 0.1, 0.5] {
        let h = 1e-5 * sigma;
        for _ in 0..100 {
            let u: f64 = r.random();
            let numeric = (wrapped_normal_log_density(u + h, sigma) - wrapped_normal_log_density(u - h, sigma)) / (2.0 * h);
            let analytic = wrapped_normal_score_scalar(u, sigma);
            worst = worst.max((analytic - numeric).abs() / numeric.abs().max(1e-12));
        }
    }
    let ok = report(3, "wrapped-normal score", worst < 1e-4, &format!("max relative error {worst:.2e} < 1e-4"), start.elapsed(), Duration::from_secs(5));
    assert!(ok);
}

#[test]
fn criterion_04_training_gradient() {
    let start = Instant::now();
    let schedules = Schedules::new(DiffusionConfig::new(50)).unwrap();
    let cfg = DenoiserConfig {
        hidden_dim: 16,
        num_layers: 2,
        fourier_k: 4,
        time_embed_dim: 8,
        order_embed_dim: 4,
        diffusion_steps: 50,
        ..DenoiserConfig::new(2)
    };
    let mut params = DenoiserParams::init(cfg, 4).unwrap();
    let lattice = Lattice::new(3.9, 0.3, -0.2, 0.1, 4.2, 0.4, -0.3, 0.2, 4.6);
    let crystal = Crystal::new(vec![0, 1], 2, vec![Frac::new(0.1, 0.2, 0.3), Frac::new(0.6, 0.4, 0.9)], lattice).unwrap();
    let train = TrainConfig { hypergraph: HypergraphSpec { augment_pairwise: true, ..HypergraphSpec::default() }, ..TrainConfig::default() };
    let sample = TrainSample::draw(2, 50, &mut rng(4));
    let analytic = sample_objective(&crystal, &params, &schedules, &train, &sample, true).unwrap().1.unwrap();
    let flat = params.to_flat();
    let probes = 400;
    let worst = finite_diff_check(
        |x| {
            params.load_flat(x).unwrap();
            sample_objective(&crystal, &params, &schedules, &train, &sample, false).unwrap().0.total
        },
        &flat,
        &analytic,
        probes,
        1e-5,
        4,
    );
    let detail = format!("t {}, {probes} probed parameters, max relative error {worst:.2e} < 1e-4", sample.t);
    let ok = report(4, "training gradient", worst < 1e-4, &detail, start.elapsed(), Duration::from_secs(120));
    assert!(ok);
}

#[test]
fn criterion_05_lattice_forward_marginal() {
    let start = Instant::now();
    let schedule = make_cosine_schedule(1000).unwrap();
    let l0 = Lattice::new(4.0, 0.5, -0.3, 0.0, 3.6, 0.8, 0.2, -0.1, 5.1);
    let draws = 100_000;
    let mut r = rng(5);
    let mut worst_z: f64 = 0.0;
    for t in [100, 500, 900] {
        let ab = schedule.alpha_bar(t);
        let (mut sum, mut sum_sq) = (Matrix3::<f64>::zeros(), Matrix3::<f64>::zeros());
        for _ in 0..draws {
            let (lt, _) = forward_sample_l(&l0, t, &schedule, &mut r);
            sum += lt;
            sum_sq += lt.component_mul(&lt);
        }
        let n = draws as f64;
        for idx in 0..9 {
            let mean = sum[idx] / n;
            let var = (sum_sq[idx] - n * mean * mean) / (n - 1.0);
            let target_var = 1.0 - ab;
            let z_mean = (mean - ab.sqrt() * l0[idx]).abs() / (target_var / n).sqrt();
            let z_var = (var - target_var).abs() / (target_var * (2.0 / (n - 1.0)).sqrt());
            worst_z = worst_z.max(z_mean).max(z_var);
        }
    }
    let detail = format!("{draws} draws per step, worst deviation {worst_z:.2} standard errors < 3");
    let ok = report(5, "lattice forward marginal", worst_z < 3.0, &detail, start.elapsed(), Duration::from_secs(30));
    assert!(ok);
}

fn edge_set(h: &Hypergraph) -> BTreeSet<Vec<usize>> {
    h.hyperedges()
        .iter()
        .map(|e| {
            let mut e = e.clone();
            e.sort_unstable();
            e
        })
        .collect()
}

fn image_offsets(r: i32) -> Vec<Vector3<f64>> {
    let mut out = Vec::new();
    for a in -r..=r {
        for b in -r..=r {
            for c in -r..=r {
                out.push(Vector3::new(a as f64, b as f64, c as f64));
            }
        }
    }
    out
}

/// Each atom's neighborhood by scanning images of every other atom; nearest
/// `max_order` members kept, ties broken by index.
fn brute_force_edges(crystal: &Crystal, max_order: usize, distance: impl Fn(&Vector3<f64>) -> f64, reach: f64) -> BTreeSet<Vec<usize>> {
    let f = crystal.frac_coords();
    let offsets = image_offsets(2);
    let mut edges = BTreeSet::new();
    for i in 0..f.len() {
        let mut members: Vec<(f64, usize)> = vec![(0.0, i)];
        for j in 0..f.len() {
            if j == i {
                continue;
            }
            let best = offsets
                .iter()
                .map(|k| distance(&(crystal.lattice() * (f[j] - f[i] + k))))
                .fold(f64::INFINITY, f64::min);
            if best <= reach {
                members.push((best, j));
            }
        }
        if members.len() < 2 {
            continue;
        }
        members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        members.truncate(max_order);
        let mut e: Vec<usize> = members.into_iter().map(|(_, j)| j).collect();
        e.sort_unstable();
        edges.insert(e);
    }
    edges
}

#[test]
fn criterion_06_hyperedges_match_brute_force() {
    let start = Instant::now();
    let mut r = rng(6);
    let mut mismatches = 0;
    let mut total_edges = 0;
    for _ in 0..200 {
        let n = r.random_range(1..=12);
        let crystal = symmetry::probe_crystal(3, n, &mut r).unwrap();
        for spec in [HypergraphSpec::default(), HypergraphSpec::cube_default()] {
            let built = edge_set(&spec.build(&crystal).unwrap());
            let expected = match spec.mode {
                HyperedgeMode::Sphere { radius } => {
                    brute_force_edges(&crystal, spec.max_order, |v| v.norm(), radius.resolve(crystal.lattice()))
                }
                HyperedgeMode::Cube { side } => {
                    brute_force_edges(&crystal, spec.max_order, |v| v.amax(), 0.5 * side.resolve(crystal.lattice()))
                }
                HyperedgeMode::Pairwise => unreachable!(),
            };
            total_edges += expected.len();
            mismatches += usize::from(built != expected);
        }
    }
    let detail = format!("400 builds, {total_edges} distinct hyperedges, {mismatches} mismatching sets");
    let ok = report(6, "hyperedge builders", mismatches == 0, &detail, start.elapsed(), Duration::from_secs(10));
    assert!(ok);
}

fn jittered(crystal: &Crystal, sigma: f64, rng: &mut impl Rng) -> Crystal {
    let frac = crystal
        .frac_coords()
        .iter()
        .map(|f| wrap_vec(&(f + Frac::from_fn(|_, _| rng.random_range(-sigma..sigma)))))
        .collect();
    crystal.with_frac(frac).unwrap()
}

#[test]
fn criterion_07_matcher_properties() {
    let start = Instant::now();
    let mut r = rng(7);
    let tol = Tolerances::default();
    let (mut worst_self, mut worst_shift): (f64, f64) = (0.0, 0.0);
    let mut decisions_ok = true;
    let mut matched = 0;
    for trial in 0..50 {
        let n = r.random_range(2..=10);
        let truth = symmetry::probe_crystal(3, n, &mut r).unwrap();
        let own = match_structures(&truth, &truth, &tol);
        decisions_ok &= own.matched;
        worst_self = worst_self.max(own.rmse.unwrap_or(f64::INFINITY));

        let pred = jittered(&truth, if trial % 2 == 0 { 0.03 } else { 0.3 }, &mut r);
        let base = match_structures(&pred, &truth, &tol);
        matched += usize::from(base.matched);
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut r);
        let q = random_orthogonal(&mut r);
        let variants = [
            pred.permuted(&perm).unwrap(),
            pred.translated(&random_frac(&mut r)).unwrap(),
            pred.with_lattice(q * pred.lattice()).unwrap(),
        ];
        for v in &variants {
            let other = match_structures(v, &truth, &tol);
            decisions_ok &= other.matched == base.matched;
            if let (Some(a), Some(b)) = (base.rmse, other.rmse) {
                worst_shift = worst_shift.max((a - b).abs());
            }
        }
    }
    let passed = decisions_ok && worst_self == 0.0 && worst_shift < 1e-8;
    let detail = format!(
        "self rmse {worst_self:.1e}, {matched}/50 perturbed pairs matched, decisions {}, rmse deviation {worst_shift:.2e} < 1e-8",
        if decisions_ok { "stable" } else { "changed" }
    );
    let ok = report(7, "matcher properties", passed, &detail, start.elapsed(), Duration::from_secs(30));
    assert!(ok);
}

#[test]
fn criterion_08_sampler_pushforward() {
    let start = Instant::now();
    let steps = 50;
    let schedules = Schedules::new(DiffusionConfig::new(steps)).unwrap();
    let cfg = DenoiserConfig { hidden_dim: 32, num_layers: 2, fourier_k: 8, diffusion_steps: steps, ..DenoiserConfig::new(3) };
    let params = DenoiserParams::init(cfg, 8).unwrap();
    let spec = HypergraphSpec::default();
    let species = [0, 1, 2, 2, 2];
    let result =
        symmetry::check_sampler_pushforward(&params, &schedules, &spec, &species, &[0, 1, 2], 3, &mut rng(8)).unwrap();
    let detail = format!("T {steps}, 3 seeds x 3 rotations, {}", check_line(&result));
    let ok = report(8, "sampler pushforward", result.passed && result.tolerance == 1e-5, &detail, start.elapsed(), Duration::from_secs(60));
    assert!(ok);
}

#[test]
fn criterion_09_toy_structure_prediction() {
    let start = Instant::now();
    let data = synth_perovskite(200, 0.02, &mut rng(9)).unwrap();
    let (train, _val, test) = split(&data, [0.6, 0.2, 0.2], 9).unwrap();
    let steps = 200;
    let schedules = Schedules::new(DiffusionConfig::new(steps)).unwrap();
    let spec = HypergraphSpec { augment_pairwise: true, ..HypergraphSpec::default() };
    let model_cfg = DenoiserConfig {
        hidden_dim: 64,
        num_layers: 3,
        fourier_k: 8,
        time_embed_dim: 32,
        order_embed_dim: 8,
        diffusion_steps: steps,
        ..DenoiserConfig::new(data.vocabulary().len())
    };
    let train_cfg = TrainConfig {
        epochs: 1000,
        batch_size: 32,
        learning_rate: 2e-3,
        hypergraph: spec,
        max_steps: Some(2000),
        seed: 9,
        ..TrainConfig::default()
    };
    let outcome = train_loop(train.crystals(), DenoiserParams::init(model_cfg, 9).unwrap(), &schedules, &train_cfg, |_, _| Ok(())).unwrap();
    let model = NetworkModel { params: &outcome.params, schedules: &schedules, hypergraph: &spec };
    let compositions: Vec<Vec<usize>> = test.crystals().iter().map(|c| c.species().to_vec()).collect();
    let sample_cfg = SampleConfig { hypergraph: spec, seed: 9, ..SampleConfig::default() };
    let samples = sample_many(&compositions, data.vocabulary().len(), &model, &schedules, &sample_cfg).unwrap();
    let pred = Dataset::new(test.ids().to_vec(), samples.into_iter().map(|s| s.crystal).collect(), test.vocabulary().to_vec()).unwrap();
    let (_, summary) = evaluate(&pred, &test, &Tolerances::default()).unwrap();
    let rmse = summary.mean_rmse.unwrap_or(f64::INFINITY);
    let detail = format!(
        "{} steps, {} held out, match rate {:.1}% >= 80%, mean rmse {rmse:.3} < 0.1",
        outcome.steps, summary.num_structures, summary.match_rate
    );
    let passed = outcome.steps <= 2000 && summary.match_rate >= 80.0 && rmse < 0.1;
    let ok = report(9, "toy structure prediction", passed, &detail, start.elapsed(), Duration::from_secs(30 * 60));
    assert!(ok);
}

#[test]
fn criterion_10_rank_score() {
    let start = Instant::now();
    // Perov-5 block, rows FTCP .. EH-Diff (Sphere), EH-Diff (Cube).
    let columns: [([f64; 10], bool); 7] = [
        ([0.24, 73.60, 99.92, 79.63, 100.0, 100.0, 100.0, 100.0, 100.0, 100.0], true),
        ([54.24, 82.95, 98.79, 99.13, 98.59, 97.40, 98.60, 98.85, 98.60, 98.75], true),
        ([0.00, 73.92, 0.18, 0.37, 99.45, 99.68, 99.60, 99.74, 99.68, 99.77], true),
        ([0.00, 10.13, 0.23, 0.25, 98.46, 98.64, 98.76, 98.27, 98.82, 98.82], true),
        ([10.27, 2.268, 1.625, 0.2755, 0.1258, 0.1893, 0.1110, 0.1110, 0.1116, 0.1103], false),
        ([156.0, 4.111, 4.746, 1.388, 0.0264, 0.2364, 0.0257, 0.0263, 0.0879, 0.0214], false),
        ([0.6297, 0.8373, 0.0368, 0.4552, 0.0628, 0.0177, 0.0503, 0.0128, 0.0118, 0.0620], false),
    ];
    let cube = 9;
    let ranks: Vec<usize> = columns.iter().map(|(v, higher)| competition_ranks(v, *higher)[cube]).collect();
    let score = rank_score(&ranks).unwrap();
    let rounded = (score * 10.0).round() / 10.0;
    let detail = format!("ranks {ranks:?}, score {score:.3} rounds to {rounded:.1}, expected 2.1");
    let ok = report(10, "rank score", rounded == 2.1, &detail, start.elapsed(), Duration::from_secs(1));
    assert!(ok);
}
