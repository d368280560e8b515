//! Small fully-connected networks with hand-written backpropagation.
//!
//! Every head in the system is a scalar-output [`Mlp`]: the policy head squashes
//! its output to `[0, 1]` with a logistic, value and action-value heads use the
//! identity. Hidden layers use `tanh`.
//!
//! Gradients are exact. [`Mlp::forward_cached`] records the per-layer inputs
//! so that [`Mlp::backward`] can propagate an upstream scalar `dL/d(output)`
//! into a [`GradientTape`] shaped exactly like the network.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Output nonlinearity of the last layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// Logistic squashing to `[0, 1]`; used by policy heads.
    Logistic,
    /// No squashing; used by value heads.
    Identity,
}

impl OutputKind {
    fn apply(self, z: f64) -> f64 {
        match self {
            OutputKind::Logistic => logistic(z),
            OutputKind::Identity => z,
        }
    }

    /// Derivative expressed through the output value `y`.
    fn derivative(self, y: f64) -> f64 {
        match self {
            OutputKind::Logistic => y * (1.0 - y),
            OutputKind::Identity => 1.0,
        }
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Dense layer, weights stored row-major as `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.biases
            .iter()
            .enumerate()
            .map(|(o, b)| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
            })
            .collect()
    }
}

/// Scalar-output multilayer perceptron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    output: OutputKind,
}

/// Values recorded by [`Mlp::forward_cached`] and consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Activations {
    /// Input vector fed to each layer; entry 0 is the network input.
    layer_inputs: Vec<Vec<f64>>,
    output: f64,
}

impl Activations {
    pub fn output(&self) -> f64 {
        self.output
    }
}

/// Per-parameter gradient accumulators aligned with an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    layers: Vec<Layer>,
}

impl GradientTape {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn matches(&self, net: &Mlp) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.inputs == l.inputs && g.outputs == l.outputs)
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, other: &GradientTape, k: f64) -> Result<()> {
        if self.layers.len() != other.layers.len()
            || self
                .layers
                .iter()
                .zip(&other.layers)
                .any(|(a, b)| a.inputs != b.inputs || a.outputs != b.outputs)
        {
            return Err(Error::Shape("gradient tapes have different layouts".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += k * y;
            }
            for (x, y) in a.biases.iter_mut().zip(&b.biases) {
                *x += k * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w *= k);
            l.biases.iter_mut().for_each(|b| *b *= k);
        }
    }

    /// Flattened gradient in the same order as [`Mlp::parameters`].
    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn is_zero(&self) -> bool {
        self.flat().iter().all(|g| *g == 0.0)
    }
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(&l.weights);
        out.extend_from_slice(&l.biases);
    }
    out
}

impl Mlp {
    /// Xavier-uniform weights, zero biases. `sizes` runs input to output and
    /// must end in 1.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], output: OutputKind, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes, output)?;
        for l in &mut net.layers {
            let limit = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
            for w in &mut l.weights {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], output: OutputKind) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Shape(format!(
                "need at least input and output sizes, got {sizes:?}"
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::Shape(format!("zero-width layer in {sizes:?}")));
        }
        if *sizes.last().unwrap() != 1 {
            return Err(Error::Shape(format!(
                "output layer must have width 1, got {sizes:?}"
            )));
        }
        let layers = sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Ok(Self { layers, output })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].inputs];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_kind(&self) -> OutputKind {
        self.output
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Flat parameter vector: per layer, weights (row-major) then biases.
    pub fn parameters(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_parameters() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                params.len()
            )));
        }
        let mut i = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[i..i + nw]);
            i += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&params[i..i + nb]);
            i += nb;
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forward_cached(x)?.output)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<Activations> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(&current);
            layer_inputs.push(std::mem::take(&mut current));
            current = if i == last {
                z
            } else {
                z.into_iter().map(f64::tanh).collect()
            };
        }
        let output = self.output.apply(current[0]);
        Ok(Activations {
            layer_inputs,
            output,
        })
    }

    /// Gradient of `upstream * output` with respect to every parameter.
    pub fn backward(&self, acts: &Activations, upstream: f64) -> Result<GradientTape> {
        Ok(self.backprop(acts, upstream)?.0)
    }

    /// Gradient of `upstream * output` with respect to the network input.
    pub fn input_gradient(&self, acts: &Activations, upstream: f64) -> Result<Vec<f64>> {
        Ok(self.backprop(acts, upstream)?.1)
    }

    fn backprop(&self, acts: &Activations, upstream: f64) -> Result<(GradientTape, Vec<f64>)> {
        if acts.layer_inputs.len() != self.layers.len()
            || acts
                .layer_inputs
                .iter()
                .zip(&self.layers)
                .any(|(x, l)| x.len() != l.inputs)
        {
            return Err(Error::Shape(
                "activations were not produced by this network".into(),
            ));
        }
        let mut tape = GradientTape::zeros_like(self);
        let mut delta = vec![upstream * self.output.derivative(acts.output)];
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &acts.layer_inputs[i];
            let g = &mut tape.layers[i];
            for (o, d) in delta.iter().enumerate() {
                g.biases[o] = *d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (w, xi) in row.iter_mut().zip(input) {
                    *w = d * xi;
                }
            }
            let mut prev = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += w * d;
                }
            }
            if i > 0 {
                // input to layer i is tanh output of layer i-1
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
            }
            delta = prev;
        }
        Ok((tape, delta))
    }

    /// Plain gradient descent: `theta <- theta - lr * grad`.
    pub fn sgd_step(&mut self, tape: &GradientTape, lr: f64) -> Result<()> {
        if !tape.matches(self) {
            return Err(Error::Shape("gradient tape does not match network".into()));
        }
        for (l, g) in self.layers.iter_mut().zip(&tape.layers) {
            for (w, gw) in l.weights.iter_mut().zip(&g.weights) {
                *w -= lr * gw;
            }
            for (b, gb) in l.biases.iter_mut().zip(&g.biases) {
                *b -= lr * gb;
            }
        }
        if self.parameters().iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("parameter after gradient step".into()));
        }
        Ok(())
    }

    /// Squared-error loss `(f(x) - target)^2` and its parameter gradient.
    pub fn squared_error_gradient(&self, x: &[f64], target: f64) -> Result<(f64, GradientTape)> {
        let acts = self.forward_cached(x)?;
        let err = acts.output - target;
        let tape = self.backward(&acts, 2.0 * err)?;
        Ok((err * err, tape))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            sizes: self.sizes(),
            output: self.output,
            parameters: self.parameters(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        let mut net = Self::zeros(&ckpt.sizes, ckpt.output)?;
        net.set_parameters(&ckpt.parameters)?;
        if ckpt.parameters.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("checkpoint parameter".into()));
        }
        Ok(net)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_checkpoint(&ckpt)
    }
}

/// Self-describing network checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub sizes: Vec<usize>,
    pub output: OutputKind,
    pub parameters: Vec<f64>,
}

/// Log-density of `action` under a Gaussian with mean `policy(s)` and fixed `std`.
pub fn gaussian_log_prob(policy: &Mlp, s: &[f64], action: f64, std: f64) -> Result<f64> {
    let mean = policy.forward(s)?;
    let z = (action - mean) / std;
    Ok(-0.5 * z * z - std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
}

/// Parameter gradient of [`gaussian_log_prob`]: `(a - mu) / std^2 * dmu/dtheta`.
pub fn log_prob_gradient(policy: &Mlp, s: &[f64], action: f64, std: f64) -> Result<GradientTape> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::Domain(format!(
            "policy std must be positive, got {std}"
        )));
    }
    let acts = policy.forward_cached(s)?;
    let score = (action - acts.output) / (std * std);
    policy.backward(&acts, score)
}
