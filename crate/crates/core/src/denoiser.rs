//! Equivariant hypergraph denoiser.
//!
//! The network only ever sees the lattice through its metric `L^T L` and the
//! coordinates through periodic (Fourier) features of wrapped differences.
//! The lattice head estimates the clean lattice as `L0_hat = U W`, where `U` is
//! the orthogonal polar factor of `L` and `W` holds learned 3x3 weights, and returns the implied noise
//! `(L - sqrt(alpha_bar_t) L0_hat) / sqrt(1 - alpha_bar_t)`. Rotating the lattice
//! therefore rotates the lattice-noise estimate while the coordinate head is
//! untouched. Here `s^2 = tr(L^T L) / 3`; the metric enters as `L^T L / s^2`
//! together with `ln s^2`, so inputs stay at unit scale for any noisy lattice.

use std::f64::consts::PI;

use nalgebra::Matrix3;
use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crystal::{periodic_diff, Frac, Lattice};
use crate::error::{Error, Result};
use crate::hypergraph::Hypergraph;
use crate::nn::{Activation, GradTape, Mlp, MlpGrads};

/// Normalized metric entries plus the log scale.
const METRIC_DIM: usize = 10;

/// Isotropic length scale `sqrt(tr(L^T L) / 3)` of a lattice.
pub fn lattice_scale(lattice: &Lattice) -> f64 {
    (lattice.norm_squared() / 3.0).sqrt().max(1e-12)
}

/// Orthogonal factor `L (L^T L)^{-1/2}` of the polar decomposition, via SVD.
pub fn polar_factor(lattice: &Lattice) -> Matrix3<f64> {
    let svd = lattice.svd(true, true);
    svd.u.expect("u requested") * svd.v_t.expect("v_t requested")
}

/// How the Fourier features of a hyperedge are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PsiPooling {
    /// Mean of `psi` over wrapped differences of all ordered member pairs.
    #[default]
    PairMean,
    /// `psi` of the raw sum of all pairwise differences (identically `psi(0)`);
    /// kept for ablations.
    Literal,
}

/// Deliberate symmetry-breaking edits used to show the symmetry checks are not vacuous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    /// Message inputs see raw lattice entries instead of `L^T L`.
    RawLattice,
    /// Node states get an index-dependent offset after embedding.
    PositionalEmbedding,
    /// Hyperedge features use absolute instead of relative coordinates.
    AbsolutePositions,
    /// Lattice head returns the 3x3 weights without multiplying by `L`.
    UnrotatedReadout,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub num_species: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub fourier_k: usize,
    pub time_embed_dim: usize,
    pub order_embed_dim: usize,
    pub max_order: usize,
    /// Length of the cosine lattice schedule the head converts through.
    pub diffusion_steps: usize,
    pub psi_pooling: PsiPooling,
    /// Give every member of a hyperedge its own message, built from its own
    /// state and the Fourier features of its offsets to the other members.
    pub directional: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mutation: Option<Mutation>,
}

impl DenoiserConfig {
    pub fn new(num_species: usize) -> Self {
        Self {
            num_species,
            hidden_dim: 128,
            num_layers: 4,
            fourier_k: 16,
            time_embed_dim: 64,
            order_embed_dim: 16,
            max_order: crate::hypergraph::DEFAULT_MAX_ORDER,
            diffusion_steps: 1000,
            psi_pooling: PsiPooling::PairMean,
            directional: true,
            mutation: None,
        }
    }

    fn psi_dim(&self) -> usize {
        6 * self.fourier_k
    }

    /// Width of the per-hyperedge geometric block (metric, pooled and relative features).
    fn static_dim(&self) -> usize {
        METRIC_DIM + self.psi_dim() + if self.directional { self.psi_dim() } else { 0 }
    }

    pub(crate) fn message_input_dim(&self) -> usize {
        let own = if self.directional { self.hidden_dim } else { 0 };
        own + self.hidden_dim + self.static_dim() + self.order_embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_species == 0 {
            return bad("num_species must be positive");
        }
        if self.hidden_dim == 0 || self.num_layers == 0 || self.fourier_k == 0 {
            return bad("hidden_dim, num_layers and fourier_k must be positive");
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return bad("time_embed_dim must be a positive even number");
        }
        if self.max_order < 2 {
            return bad("max_order must be at least 2");
        }
        if self.diffusion_steps < 2 {
            return bad("diffusion_steps must be at least 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub message: Mlp,
    pub update: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    /// One row per species channel.
    pub atom_embed: Array2<f64>,
    pub input_mlp: Mlp,
    /// One row per hyperedge order `2..=max_order`.
    pub order_embed: Array2<f64>,
    pub layers: Vec<LayerParams>,
    /// Lattice head, 9 outputs read row-major as a 3x3 matrix.
    pub readout: Mlp,
    /// Coordinate head, 3 outputs per atom.
    pub coord_head: Mlp,
}

/// Node representations, one row per atom.
pub type NodeStates = Array2<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps_lattice: Matrix3<f64>,
    /// Per-atom coordinate output (normalized score).
    pub eps_frac: Vec<Frac>,
}

impl DenoiserParams {
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let act = Activation::Silu;
        let embed_scale = 1.0;
        let atom_embed =
            Array2::from_shape_fn((config.num_species, d), |_| rng.random_range(-embed_scale..embed_scale));
        let input_mlp = Mlp::init(&[d + config.time_embed_dim, d, d], act, &mut rng)?;
        let order_embed = Array2::from_shape_fn((config.max_order - 1, config.order_embed_dim), |_| {
            rng.random_range(-embed_scale..embed_scale)
        });
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(LayerParams {
                message: Mlp::init(&[config.message_input_dim(), d, d], act, &mut rng)?,
                update: Mlp::init(&[2 * d, d, d], act, &mut rng)?,
            });
        }
        let readout = Mlp::init(&[d, d, 9], act, &mut rng)?;
        let coord_head = Mlp::init(&[d, d, 3], act, &mut rng)?;
        Ok(Self { config, atom_embed, input_mlp, order_embed, layers, readout, coord_head })
    }

    pub fn num_params(&self) -> usize {
        self.atom_embed.len()
            + self.input_mlp.num_params()
            + self.order_embed.len()
            + self.layers.iter().map(|l| l.message.num_params() + l.update.num_params()).sum::<usize>()
            + self.readout.num_params()
            + self.coord_head.num_params()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend(self.atom_embed.iter());
        self.input_mlp.write_flat(&mut out);
        out.extend(self.order_embed.iter());
        for l in &self.layers {
            l.message.write_flat(&mut out);
            l.update.write_flat(&mut out);
        }
        self.readout.write_flat(&mut out);
        self.coord_head.write_flat(&mut out);
        out
    }

    pub fn load_flat(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.num_params() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.num_params(), src.len())));
        }
        let mut at = 0;
        for x in self.atom_embed.iter_mut() {
            *x = src[at];
            at += 1;
        }
        at += self.input_mlp.read_flat(&src[at..])?;
        for x in self.order_embed.iter_mut() {
            *x = src[at];
            at += 1;
        }
        for l in &mut self.layers {
            at += l.message.read_flat(&src[at..])?;
            at += l.update.read_flat(&src[at..])?;
        }
        at += self.readout.read_flat(&src[at..])?;
        at += self.coord_head.read_flat(&src[at..])?;
        debug_assert_eq!(at, src.len());
        Ok(())
    }

    pub fn with_mutation(&self, mutation: Option<Mutation>) -> Self {
        let mut p = self.clone();
        p.config.mutation = mutation;
        p
    }
}

/// Gradients with the same layout as [`DenoiserParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserGrads {
    pub atom_embed: Array2<f64>,
    pub input_mlp: MlpGrads,
    pub order_embed: Array2<f64>,
    pub layers: Vec<(MlpGrads, MlpGrads)>,
    pub readout: MlpGrads,
    pub coord_head: MlpGrads,
}

impl DenoiserGrads {
    pub fn zeros_like(p: &DenoiserParams) -> Self {
        Self {
            atom_embed: Array2::zeros(p.atom_embed.raw_dim()),
            input_mlp: MlpGrads::zeros_like(&p.input_mlp),
            order_embed: Array2::zeros(p.order_embed.raw_dim()),
            layers: p
                .layers
                .iter()
                .map(|l| (MlpGrads::zeros_like(&l.message), MlpGrads::zeros_like(&l.update)))
                .collect(),
            readout: MlpGrads::zeros_like(&p.readout),
            coord_head: MlpGrads::zeros_like(&p.coord_head),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.atom_embed.iter());
        self.input_mlp.write_flat(&mut out);
        out.extend(self.order_embed.iter());
        for (m, u) in &self.layers {
            m.write_flat(&mut out);
            u.write_flat(&mut out);
        }
        self.readout.write_flat(&mut out);
        self.coord_head.write_flat(&mut out);
        out
    }
}

/// Sinusoidal encoding of the diffusion step: channel `2m` is
/// `sin(t / 10000^(2m/d))`, channel `2m+1` the matching cosine.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for m in 0..dim / 2 {
        let freq = 10000f64.powf(-((2 * m) as f64) / dim as f64);
        out[2 * m] = (t * freq).sin();
        out[2 * m + 1] = (t * freq).cos();
    }
    out
}

/// Periodic Fourier features of a fractional displacement, `3 x 2K` flattened
/// row-major: `[c][2m-2] = sin(2 pi m d_c)`, `[c][2m-1] = cos(2 pi m d_c)`.
pub fn fourier_psi(d: &Frac, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; 6 * k];
    fourier_psi_into(d, k, &mut out);
    out
}

fn fourier_psi_into(d: &Frac, k: usize, out: &mut [f64]) {
    for c in 0..3 {
        for m in 1..=k {
            let arg = 2.0 * PI * m as f64 * d[c];
            out[c * 2 * k + 2 * m - 2] = arg.sin();
            out[c * 2 * k + 2 * m - 1] = arg.cos();
        }
    }
}

fn positional_offset(i: usize, c: usize) -> f64 {
    0.5 * ((i + 1) as f64 * (c + 1) as f64 * 0.37).sin()
}

/// `h_i^(0) = input_mlp(concat(atom_embed[a_i], time_embedding(t)))`.
pub fn embed_inputs(species: &[usize], t: f64, params: &DenoiserParams) -> Result<NodeStates> {
    Ok(embed_forward(species, t, params)?.0)
}

fn embed_forward(species: &[usize], t: f64, params: &DenoiserParams) -> Result<(NodeStates, GradTape)> {
    let cfg = &params.config;
    let d = cfg.hidden_dim;
    let temb = time_embedding(t, cfg.time_embed_dim);
    let mut x = Array2::zeros((species.len(), d + cfg.time_embed_dim));
    for (i, &s) in species.iter().enumerate() {
        if s >= cfg.num_species {
            return Err(Error::Species { index: s, size: cfg.num_species });
        }
        x.slice_mut(s![i, ..d]).assign(&params.atom_embed.row(s));
        x.slice_mut(s![i, d..]).assign(&Array1::from(temb.clone()));
    }
    let tape = params.input_mlp.forward(x.view())?;
    let mut h = tape.output().clone();
    if cfg.mutation == Some(Mutation::PositionalEmbedding) {
        for ((i, c), v) in h.indexed_iter_mut() {
            *v += positional_offset(i, c);
        }
    }
    Ok((h, tape))
}

/// Message rows of one EHNN layer: which hyperedge each row belongs to, which
/// nodes receive it, and the geometric block that does not change across layers.
#[derive(Debug, Clone)]
struct MessageLayout {
    /// `(hyperedge index, receiving node)`; the receiver is `None` when the
    /// hyperedge message goes to all of its members.
    rows: Vec<(usize, Option<usize>)>,
    geometry: Array2<f64>,
}

fn message_layout(
    frac: &[Frac],
    lattice: &Lattice,
    graph: &Hypergraph,
    cfg: &DenoiserConfig,
) -> Result<MessageLayout> {
    let n = frac.len();
    if graph.num_nodes() != n {
        return Err(Error::Graph(format!("hypergraph has {} nodes for {n} atoms", graph.num_nodes())));
    }
    for e in graph.hyperedges() {
        if e.len() > cfg.max_order {
            return Err(Error::Graph(format!("hyperedge of order {} exceeds max_order {}", e.len(), cfg.max_order)));
        }
        if e.iter().any(|&v| v >= n) {
            return Err(Error::Graph(format!("hyperedge {e:?} out of range")));
        }
    }
    let k = cfg.fourier_k;
    let pd = cfg.psi_dim();
    let scale = lattice_scale(lattice);
    let metric: Matrix3<f64> = match cfg.mutation {
        Some(Mutation::RawLattice) => lattice / scale,
        _ => lattice.transpose() * lattice / (scale * scale),
    };
    let mut rows = Vec::new();
    for (ei, e) in graph.hyperedges().iter().enumerate() {
        if cfg.directional {
            rows.extend(e.iter().map(|&v| (ei, Some(v))));
        } else {
            rows.push((ei, None));
        }
    }
    let mut geometry = Array2::zeros((rows.len(), cfg.static_dim()));
    let mut psi = vec![0.0; pd];
    let mut pooled_cache: Vec<Option<Vec<f64>>> = vec![None; graph.hyperedges().len()];
    for (r, &(ei, recv)) in rows.iter().enumerate() {
        let e = &graph.hyperedges()[ei];
        let mut row = geometry.row_mut(r);
        for a in 0..3 {
            for b in 0..3 {
                row[3 * a + b] = metric[(a, b)];
            }
        }
        row[9] = (scale * scale).ln();
        let pooled = pooled_cache[ei].get_or_insert_with(|| {
            let mut acc = vec![0.0; pd];
            match (cfg.mutation, cfg.psi_pooling) {
                (Some(Mutation::AbsolutePositions), _) => {
                    for &v in e {
                        fourier_psi_into(&frac[v], k, &mut psi);
                        acc.iter_mut().zip(&psi).for_each(|(a, p)| *a += p / e.len() as f64);
                    }
                }
                (_, PsiPooling::PairMean) => {
                    let pairs = (e.len() * (e.len() - 1)) as f64;
                    for &i in e {
                        for &j in e {
                            if i != j {
                                fourier_psi_into(&periodic_diff(&frac[i], &frac[j]), k, &mut psi);
                                acc.iter_mut().zip(&psi).for_each(|(a, p)| *a += p / pairs);
                            }
                        }
                    }
                }
                (_, PsiPooling::Literal) => {
                    let mut sum = Frac::zeros();
                    for &i in e {
                        for &j in e {
                            sum += frac[j] - frac[i];
                        }
                    }
                    fourier_psi_into(&sum, k, &mut acc);
                }
            }
            acc
        });
        row.slice_mut(s![METRIC_DIM..METRIC_DIM + pd]).assign(&ndarray::ArrayView1::from(&pooled[..]));
        if let Some(i) = recv {
            let others = (e.len() - 1) as f64;
            let mut acc = vec![0.0; pd];
            for &j in e {
                if j == i {
                    continue;
                }
                let d = if cfg.mutation == Some(Mutation::AbsolutePositions) {
                    frac[j]
                } else {
                    periodic_diff(&frac[i], &frac[j])
                };
                fourier_psi_into(&d, k, &mut psi);
                acc.iter_mut().zip(&psi).for_each(|(a, p)| *a += p / others);
            }
            row.slice_mut(s![METRIC_DIM + pd..METRIC_DIM + 2 * pd]).assign(&ndarray::ArrayView1::from(&acc[..]));
        }
    }
    Ok(MessageLayout { rows, geometry })
}

#[derive(Debug, Clone)]
struct LayerTape {
    message: GradTape,
    update: GradTape,
}

fn layer_forward(
    h: &NodeStates,
    graph: &Hypergraph,
    layout: &MessageLayout,
    layer: &LayerParams,
    params: &DenoiserParams,
) -> Result<(NodeStates, LayerTape)> {
    let cfg = &params.config;
    let d = cfg.hidden_dim;
    let n = h.nrows();
    let own = if cfg.directional { d } else { 0 };
    let sd = cfg.static_dim();
    let mut x = Array2::zeros((layout.rows.len(), cfg.message_input_dim()));
    for (r, &(ei, recv)) in layout.rows.iter().enumerate() {
        let e = &graph.hyperedges()[ei];
        let mut row = x.row_mut(r);
        if let Some(i) = recv {
            row.slice_mut(s![..d]).assign(&h.row(i));
        }
        {
            let mut mean = row.slice_mut(s![own..own + d]);
            for &v in e {
                mean.scaled_add(1.0 / e.len() as f64, &h.row(v));
            }
        }
        row.slice_mut(s![own + d..own + d + sd]).assign(&layout.geometry.row(r));
        row.slice_mut(s![own + d + sd..]).assign(&params.order_embed.row(e.len() - 2));
    }
    let message = layer.message.forward(x.view())?;
    let out = message.output();
    let mut agg = Array2::<f64>::zeros((n, d));
    for (r, &(ei, recv)) in layout.rows.iter().enumerate() {
        let e = &graph.hyperedges()[ei];
        let w = 1.0 / e.len() as f64;
        match recv {
            Some(i) => agg.row_mut(i).scaled_add(w, &out.row(r)),
            None => {
                for &v in e {
                    agg.row_mut(v).scaled_add(w, &out.row(r));
                }
            }
        }
    }
    let upd_in = ndarray::concatenate(Axis(1), &[h.view(), agg.view()]).expect("same row count");
    let update = layer.update.forward(upd_in.view())?;
    let h_next = h + update.output();
    Ok((h_next, LayerTape { message, update }))
}

/// One EHNN-MLP layer: hyperedge messages, mean aggregation onto member nodes
/// and a residual node update. Isolated nodes aggregate a zero message.
pub fn ehnn_layer(
    states: &NodeStates,
    graph: &Hypergraph,
    lattice: &Lattice,
    frac: &[Frac],
    layer: &LayerParams,
    params: &DenoiserParams,
) -> Result<NodeStates> {
    let layout = message_layout(frac, lattice, graph, &params.config)?;
    Ok(layer_forward(states, graph, &layout, layer, params)?.0)
}

/// Lattice noise implied by `L0_hat = U reshape(phi(mean_i h_i))`, and `eps_F[:, i] = phi_F(h_i)`.
pub fn readout(states: &NodeStates, lattice: &Lattice, t: usize, params: &DenoiserParams) -> Result<DenoiserOutput> {
    Ok(readout_forward(states, lattice, t, params)?.0)
}

/// `(sqrt(1 / (1 - alpha_bar_t)), sqrt(alpha_bar_t / (1 - alpha_bar_t)))`.
fn head_coefficients(t: usize, cfg: &DenoiserConfig) -> (f64, f64) {
    let ab = crate::lattice_diffusion::cosine_alpha_bar(t, cfg.diffusion_steps);
    let root = (1.0 - ab).sqrt();
    (1.0 / root, ab.sqrt() / root)
}

struct ReadoutTape {
    readout: GradTape,
    coord: GradTape,
}

fn readout_forward(
    states: &NodeStates,
    lattice: &Lattice,
    t: usize,
    params: &DenoiserParams,
) -> Result<(DenoiserOutput, ReadoutTape)> {
    let n = states.nrows();
    let mean = states.mean_axis(Axis(0)).ok_or_else(|| Error::Shape("no atoms".into()))?;
    let readout = params.readout.forward(mean.view().insert_axis(Axis(0)))?;
    let w = readout.output();
    let weights = Matrix3::from_fn(|r, c| w[[0, 3 * r + c]]);
    let clean = match params.config.mutation {
        Some(Mutation::UnrotatedReadout) => weights,
        _ => polar_factor(lattice) * weights,
    };
    let (a, b) = head_coefficients(t, &params.config);
    let eps_lattice = a * lattice - b * clean;
    let coord = params.coord_head.forward(states.view())?;
    let eps_frac = (0..n)
        .map(|i| {
            let o = coord.output();
            Frac::new(o[[i, 0]], o[[i, 1]], o[[i, 2]])
        })
        .collect();
    Ok((DenoiserOutput { eps_lattice, eps_frac }, ReadoutTape { readout, coord }))
}

/// Everything [`backward`] needs from one [`denoise_with_tape`] call.
pub struct DenoiseTape {
    species: Vec<usize>,
    lattice: Lattice,
    t: usize,
    graph: Hypergraph,
    layout: MessageLayout,
    embed: GradTape,
    layers: Vec<LayerTape>,
    head: ReadoutTape,
}

fn check_inputs(species: &[usize], frac: &[Frac], lattice: &Lattice) -> Result<()> {
    if species.len() != frac.len() {
        return Err(Error::Shape(format!("{} species for {} coordinates", species.len(), frac.len())));
    }
    if species.is_empty() {
        return Err(Error::Shape("crystal has no atoms".into()));
    }
    if frac.iter().any(|f| f.iter().any(|x| !x.is_finite())) || lattice.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("non-finite denoiser input".into()));
    }
    Ok(())
}

/// Full denoiser pass: embedding, `num_layers` EHNN layers, both heads.
pub fn denoise(
    species: &[usize],
    frac: &[Frac],
    lattice: &Lattice,
    t: usize,
    graph: &Hypergraph,
    params: &DenoiserParams,
) -> Result<DenoiserOutput> {
    Ok(denoise_with_tape(species, frac, lattice, t, graph, params)?.0)
}

pub fn denoise_with_tape(
    species: &[usize],
    frac: &[Frac],
    lattice: &Lattice,
    t: usize,
    graph: &Hypergraph,
    params: &DenoiserParams,
) -> Result<(DenoiserOutput, DenoiseTape)> {
    check_inputs(species, frac, lattice)?;
    if t == 0 || t > params.config.diffusion_steps {
        return Err(Error::Domain(format!("step {t} outside 1..={}", params.config.diffusion_steps)));
    }
    let layout = message_layout(frac, lattice, graph, &params.config)?;
    let (mut h, embed) = embed_forward(species, t as f64, params)?;
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (next, tape) = layer_forward(&h, graph, &layout, layer, params)?;
        h = next;
        layers.push(tape);
    }
    let (out, head) = readout_forward(&h, lattice, t, params)?;
    Ok((
        out,
        DenoiseTape {
            species: species.to_vec(),
            lattice: *lattice,
            t,
            graph: graph.clone(),
            layout,
            embed,
            layers,
            head,
        },
    ))
}

/// Parameter gradients of `sum(g_L * eps_L) + sum_i g_F[i] . eps_F[i]`.
pub fn backward(
    params: &DenoiserParams,
    tape: &DenoiseTape,
    grad_lattice: &Matrix3<f64>,
    grad_frac: &[Frac],
) -> Result<DenoiserGrads> {
    let mut grads = DenoiserGrads::zeros_like(params);
    backward_into(params, tape, grad_lattice, grad_frac, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`], accumulating into existing gradients.
pub fn backward_into(
    params: &DenoiserParams,
    tape: &DenoiseTape,
    grad_lattice: &Matrix3<f64>,
    grad_frac: &[Frac],
    grads: &mut DenoiserGrads,
) -> Result<()> {
    let cfg = &params.config;
    let d = cfg.hidden_dim;
    let n = tape.species.len();
    if grad_frac.len() != n || tape.layers.len() != params.layers.len() {
        return Err(Error::TapeMismatch);
    }

    // coordinate head
    let g_coord = Array2::from_shape_fn((n, 3), |(i, c)| grad_frac[i][c]);
    let mut dh = params.coord_head.backward_into(&tape.head.coord, g_coord.view(), &mut grads.coord_head)?;

    // lattice head
    let g_clean = -head_coefficients(tape.t, cfg).1 * grad_lattice;
    let g_weights = match cfg.mutation {
        Some(Mutation::UnrotatedReadout) => g_clean,
        _ => polar_factor(&tape.lattice).transpose() * g_clean,
    };
    let g_out = Array2::from_shape_fn((1, 9), |(_, k)| g_weights[(k / 3, k % 3)]);
    let d_mean = params.readout.backward_into(&tape.head.readout, g_out.view(), &mut grads.readout)?;
    for mut row in dh.rows_mut() {
        row.scaled_add(1.0 / n as f64, &d_mean.row(0));
    }

    let own = if cfg.directional { d } else { 0 };
    let sd = cfg.static_dim();
    for (li, layer) in params.layers.iter().enumerate().rev() {
        let lt = &tape.layers[li];
        let (g_msg, g_upd) = &mut grads.layers[li];
        let d_upd_in = layer.update.backward_into(&lt.update, dh.view(), g_upd)?;
        let mut dh_in = dh.clone();
        dh_in += &d_upd_in.slice(s![.., ..d]);
        let d_agg = d_upd_in.slice(s![.., d..]);

        let rows = &tape.layout.rows;
        let mut d_out = Array2::<f64>::zeros((rows.len(), d));
        for (r, &(ei, recv)) in rows.iter().enumerate() {
            let e = &tape.graph.hyperedges()[ei];
            let w = 1.0 / e.len() as f64;
            let mut row = d_out.row_mut(r);
            match recv {
                Some(i) => row.scaled_add(w, &d_agg.row(i)),
                None => {
                    for &v in e {
                        row.scaled_add(w, &d_agg.row(v));
                    }
                }
            }
        }
        let dx = layer.message.backward_into(&lt.message, d_out.view(), g_msg)?;
        for (r, &(ei, recv)) in rows.iter().enumerate() {
            let e = &tape.graph.hyperedges()[ei];
            if let Some(i) = recv {
                dh_in.row_mut(i).scaled_add(1.0, &dx.slice(s![r, ..d]));
            }
            let dmean = dx.slice(s![r, own..own + d]);
            for &v in e {
                dh_in.row_mut(v).scaled_add(1.0 / e.len() as f64, &dmean);
            }
            grads
                .order_embed
                .row_mut(e.len() - 2)
                .scaled_add(1.0, &dx.slice(s![r, own + d + sd..]));
        }
        dh = dh_in;
    }

    let dx0 = params.input_mlp.backward_into(&tape.embed, dh.view(), &mut grads.input_mlp)?;
    for (i, &s) in tape.species.iter().enumerate() {
        grads.atom_embed.row_mut(s).scaled_add(1.0, &dx0.slice(s![i, ..d]));
    }
    Ok(())
}
