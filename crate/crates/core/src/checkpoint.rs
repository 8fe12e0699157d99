//! Versioned JSON checkpoints.
//!
//! ```json
//! {"format": "crysdiff-checkpoint", "version": 1,
//!  "architecture": {...}, "diffusion": {...}, "hypergraph": {...},
//!  "lambda_weights": {...},
//!  "arrays": [{"name": "atom_embed", "shape": [3, 128], "data": [...]}, ...]}
//! ```
//!
//! Arrays are row-major. MLP weights are stored as `(fan_out, fan_in)` under
//! `<module>.w<k>` with biases under `<module>.b<k>`. Floats are written in
//! shortest round-trip form, so a save/load cycle is bit-exact.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coord_diffusion::LambdaWeights;
use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::hypergraph::HypergraphSpec;
use crate::nn::Mlp;
use crate::trainer::{DiffusionConfig, Schedules};

pub const FORMAT: &str = "crysdiff-checkpoint";
pub const VERSION: u32 = 1;

/// Upper bound on any single architecture width read from a file.
const MAX_WIDTH: usize = 1 << 16;
const MAX_LAYERS: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    format: String,
    version: u32,
    architecture: DenoiserConfig,
    diffusion: DiffusionConfig,
    hypergraph: HypergraphSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lambda_weights: Option<LambdaWeights>,
    arrays: Vec<NamedArray>,
}

/// Trained network together with what is needed to sample from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub diffusion: DiffusionConfig,
    pub hypergraph: HypergraphSpec,
    pub lambda_weights: Option<LambdaWeights>,
}

impl Checkpoint {
    pub fn new(params: DenoiserParams, schedules: &Schedules, hypergraph: HypergraphSpec) -> Self {
        Self {
            params,
            diffusion: schedules.config,
            hypergraph,
            lambda_weights: Some(schedules.lambda.clone()),
        }
    }

    /// Rebuild the schedules, reusing stored lambda weights when present.
    pub fn schedules(&self) -> Result<Schedules> {
        let s = match &self.lambda_weights {
            Some(l) => Schedules::with_lambda(self.diffusion, l.clone())?,
            None => Schedules::new(self.diffusion)?,
        };
        s.check_model(&self.params.config)?;
        Ok(s)
    }

    pub fn to_json(&self) -> Result<String> {
        let arrays = named_arrays(&self.params);
        if arrays.iter().any(|a| a.data.iter().any(|x| !x.is_finite())) {
            return Err(Error::Checkpoint("parameters contain non-finite values".into()));
        }
        let env = Envelope {
            format: FORMAT.into(),
            version: VERSION,
            architecture: self.params.config,
            diffusion: self.diffusion,
            hypergraph: self.hypergraph,
            lambda_weights: self.lambda_weights.clone(),
            arrays,
        };
        Ok(serde_json::to_string(&env)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let env: Envelope = serde_json::from_str(text)?;
        if env.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", env.format)));
        }
        if env.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", env.version)));
        }
        let config = env.architecture;
        check_bounds(&config)?;
        config.validate()?;
        if config.diffusion_steps != env.diffusion.steps {
            return Err(Error::Checkpoint(format!(
                "architecture expects {} diffusion steps, diffusion config has {}",
                config.diffusion_steps, env.diffusion.steps
            )));
        }
        if let Some(l) = &env.lambda_weights {
            if l.weights().len() != env.diffusion.steps {
                return Err(Error::Checkpoint("lambda weights length differs from diffusion steps".into()));
            }
        }
        let layout = expected_layout(&config);
        let supplied: usize = env.arrays.iter().map(|a| a.data.len()).sum();
        let needed = layout.iter().try_fold(0usize, |acc, (_, shape)| acc.checked_add(numel(shape)?));
        if needed != Some(supplied) {
            return Err(Error::Checkpoint(format!("arrays hold {supplied} values, architecture needs {needed:?}")));
        }
        let mut by_name: HashMap<&str, &NamedArray> = HashMap::new();
        for a in &env.arrays {
            if by_name.insert(&a.name, a).is_some() {
                return Err(Error::Checkpoint(format!("duplicate array {:?}", a.name)));
            }
        }
        if by_name.len() != layout.len() {
            return Err(Error::Checkpoint(format!("expected {} arrays, got {}", layout.len(), by_name.len())));
        }
        let mut flat = Vec::with_capacity(supplied);
        for (name, shape) in &layout {
            let a = by_name.get(name.as_str()).ok_or_else(|| Error::Checkpoint(format!("missing array {name:?}")))?;
            if &a.shape != shape || a.data.len() != numel(shape).unwrap_or(usize::MAX) {
                return Err(Error::Checkpoint(format!(
                    "array {name:?} has shape {:?} with {} values, expected {shape:?}",
                    a.shape,
                    a.data.len()
                )));
            }
            flat.extend_from_slice(&a.data);
        }
        let mut params = DenoiserParams::init(config, 0)?;
        params.load_flat(&flat)?;
        Ok(Self { params, diffusion: env.diffusion, hypergraph: env.hypergraph, lambda_weights: env.lambda_weights })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

fn check_bounds(c: &DenoiserConfig) -> Result<()> {
    let widths = [c.num_species, c.hidden_dim, c.fourier_k, c.time_embed_dim, c.order_embed_dim, c.max_order];
    if widths.iter().any(|&w| w > MAX_WIDTH) || c.num_layers > MAX_LAYERS {
        return Err(Error::Checkpoint("architecture dimensions out of range".into()));
    }
    Ok(())
}

fn mlp_layout(prefix: &str, sizes: &[usize], out: &mut Vec<(String, Vec<usize>)>) {
    for (k, w) in sizes.windows(2).enumerate() {
        out.push((format!("{prefix}.w{k}"), vec![w[1], w[0]]));
        out.push((format!("{prefix}.b{k}"), vec![w[1]]));
    }
}

/// Array names and shapes in flat-parameter order.
fn expected_layout(c: &DenoiserConfig) -> Vec<(String, Vec<usize>)> {
    let d = c.hidden_dim;
    let mut out = vec![("atom_embed".to_string(), vec![c.num_species, d])];
    mlp_layout("input_mlp", &[d + c.time_embed_dim, d, d], &mut out);
    out.push(("order_embed".into(), vec![c.max_order - 1, c.order_embed_dim]));
    for i in 0..c.num_layers {
        mlp_layout(&format!("layers.{i}.message"), &[c.message_input_dim(), d, d], &mut out);
        mlp_layout(&format!("layers.{i}.update"), &[2 * d, d, d], &mut out);
    }
    mlp_layout("readout", &[d, d, 9], &mut out);
    mlp_layout("coord_head", &[d, d, 3], &mut out);
    out
}

fn push_mlp(prefix: &str, mlp: &Mlp, out: &mut Vec<NamedArray>) {
    for (k, (w, b)) in mlp.weights().iter().zip(mlp.biases()).enumerate() {
        out.push(NamedArray { name: format!("{prefix}.w{k}"), shape: w.shape().to_vec(), data: w.iter().copied().collect() });
        out.push(NamedArray { name: format!("{prefix}.b{k}"), shape: b.shape().to_vec(), data: b.to_vec() });
    }
}

/// Every parameter tensor of the network, in flat-parameter order.
pub fn named_arrays(p: &DenoiserParams) -> Vec<NamedArray> {
    let mut out = vec![NamedArray {
        name: "atom_embed".into(),
        shape: p.atom_embed.shape().to_vec(),
        data: p.atom_embed.iter().copied().collect(),
    }];
    push_mlp("input_mlp", &p.input_mlp, &mut out);
    out.push(NamedArray {
        name: "order_embed".into(),
        shape: p.order_embed.shape().to_vec(),
        data: p.order_embed.iter().copied().collect(),
    });
    for (i, l) in p.layers.iter().enumerate() {
        push_mlp(&format!("layers.{i}.message"), &l.message, &mut out);
        push_mlp(&format!("layers.{i}.update"), &l.update, &mut out);
    }
    push_mlp("readout", &p.readout, &mut out);
    push_mlp("coord_head", &p.coord_head, &mut out);
    out
}
