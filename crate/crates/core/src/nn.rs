//! Dense networks with hand-written reverse mode.
//!
//! An [`Mlp`] evaluates a batch of row vectors at once. The forward pass
//! returns a [`GradTape`] holding every intermediate the backward pass needs;
//! the tape remembers which network (and which parameter revision) produced it.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static NEXT_MLP_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Affine layers with an activation between them; the last layer is affine only.
#[derive(Debug)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    activation: Activation,
    id: u64,
    revision: u64,
}

impl Clone for Mlp {
    fn clone(&self) -> Self {
        Self {
            layer_sizes: self.layer_sizes.clone(),
            weights: self.weights.clone(),
            biases: self.biases.clone(),
            activation: self.activation,
            id: NEXT_MLP_ID.fetch_add(1, Ordering::Relaxed),
            revision: 0,
        }
    }
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layer_sizes == other.layer_sizes
            && self.activation == other.activation
            && self.weights == other.weights
            && self.biases == other.biases
    }
}

/// Cached forward state for one batch.
#[derive(Debug, Clone)]
pub struct GradTape {
    mlp_id: u64,
    revision: u64,
    /// `inputs[k]` feeds layer `k`; the last entry is the network output.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of every hidden layer.
    pre: Vec<Array2<f64>>,
}

impl GradTape {
    pub fn output(&self) -> &Array2<f64> {
        self.inputs.last().expect("tape has at least the input")
    }

    pub fn into_output(mut self) -> Array2<f64> {
        self.inputs.pop().expect("tape has at least the input")
    }
}

/// Parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            weights: mlp.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: mlp.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn init(layer_sizes: &[usize], activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Shape(format!("bad layer sizes {layer_sizes:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-s..s)));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            activation,
            id: NEXT_MLP_ID.fetch_add(1, Ordering::Relaxed),
            revision: 0,
        })
    }

    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        let mut m = Self::init(layer_sizes, activation, &mut ChaCha8Rng::seed_from_u64(0))?;
        m.weights.iter_mut().for_each(|w| w.fill(0.0));
        Ok(m)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    /// Mutable parameter access; invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> (&mut [Array2<f64>], &mut [Array1<f64>]) {
        self.revision += 1;
        (&mut self.weights, &mut self.biases)
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Appends parameters as `W0, b0, W1, b1, ...` (weights row-major).
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
    }

    /// Inverse of [`Mlp::write_flat`]; returns the number of values consumed.
    pub fn read_flat(&mut self, src: &[f64]) -> Result<usize> {
        let need = self.num_params();
        if src.len() < need {
            return Err(Error::Shape(format!("need {need} parameters, got {}", src.len())));
        }
        self.revision += 1;
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for x in w.iter_mut() {
                *x = src[at];
                at += 1;
            }
            for x in b.iter_mut() {
                *x = src[at];
                at += 1;
            }
        }
        Ok(at)
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> Result<GradTape> {
        if input.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "MLP expects {} inputs, got {}",
                self.input_dim(),
                input.ncols()
            )));
        }
        let last = self.weights.len() - 1;
        let mut inputs = Vec::with_capacity(self.weights.len() + 1);
        let mut pre = Vec::with_capacity(last);
        inputs.push(input.to_owned());
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = inputs[k].dot(&w.t());
            z += b;
            if k == last {
                inputs.push(z);
            } else {
                let act = self.activation;
                inputs.push(z.mapv(|x| act.apply(x)));
                pre.push(z);
            }
        }
        Ok(GradTape { mlp_id: self.id, revision: self.revision, inputs, pre })
    }

    /// Single-vector convenience wrapper around [`Mlp::forward`].
    pub fn forward_vec(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.forward(x)?.into_output().into_raw_vec_and_offset().0)
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward_into(
        &self,
        tape: &GradTape,
        output_grad: ArrayView2<f64>,
        grads: &mut MlpGrads,
    ) -> Result<Array2<f64>> {
        if tape.mlp_id != self.id || tape.revision != self.revision {
            return Err(Error::TapeMismatch);
        }
        if output_grad.dim() != tape.output().dim() {
            return Err(Error::Shape(format!(
                "output gradient {:?} vs output {:?}",
                output_grad.dim(),
                tape.output().dim()
            )));
        }
        let mut delta = output_grad.to_owned();
        for k in (0..self.weights.len()).rev() {
            grads.weights[k] += &delta.t().dot(&tape.inputs[k]);
            grads.biases[k] += &delta.sum_axis(Axis(0));
            let back = delta.dot(&self.weights[k]);
            if k == 0 {
                return Ok(back);
            }
            let act = self.activation;
            delta = ndarray::Zip::from(&back)
                .and(&tape.pre[k - 1])
                .map_collect(|&g, &z| g * act.derivative(z));
        }
        unreachable!("network has at least one layer")
    }

    pub fn backward(&self, tape: &GradTape, output_grad: ArrayView2<f64>) -> Result<(MlpGrads, Array2<f64>)> {
        let mut grads = MlpGrads::zeros_like(self);
        let dx = self.backward_into(tape, output_grad, &mut grads)?;
        Ok((grads, dx))
    }
}

/// Adaptive-moment optimizer over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self::with_betas(num_params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(num_params: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, step: 0, m: vec![0.0; num_params], v: vec![0.0; num_params] }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} moments, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Largest relative error between `analytic` and central differences of `f`
/// over `probe_count` randomly chosen coordinates.
///
/// Relative error is `|analytic - numeric|` over `|numeric|`, floored at 1e-3 of the
/// largest analytic component so near-zero entries do not amplify rounding.
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    probe_count: usize,
    h: f64,
    seed: u64,
) -> f64 {
    assert_eq!(params.len(), analytic.len(), "gradient length must match parameters");
    if params.is_empty() {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let floor = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs())) * 1e-3;
    let mut x = params.to_vec();
    let mut worst: f64 = 0.0;
    for _ in 0..probe_count {
        let k = rng.random_range(0..params.len());
        let orig = x[k];
        x[k] = orig + h;
        let up = f(&x);
        x[k] = orig - h;
        let down = f(&x);
        x[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic[k] - numeric).abs() / numeric.abs().max(floor).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}
