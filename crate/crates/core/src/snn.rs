//! Stochastic multilayer perceptrons.
//!
//! Dropout stays active when sampling, so repeated forward passes of the same
//! input draw from an approximate predictive posterior. Masks use inverted
//! scaling (`1/(1-rate)` on kept units) and are drawn per batch row from a
//! seed derived from `(seed, row)`, which makes every row an independent
//! sample regardless of how rows are batched.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array2, Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::rng_from;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

/// One fully connected layer; dropout (if any) follows the activation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub dropout_rate: f64,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation, dropout_rate: f64) -> Self {
        Self { input_dim, output_dim, activation, dropout_rate }
    }

    /// Plain fully connected layer (no dropout).
    pub fn fc(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self::new(input_dim, output_dim, activation, 0.0)
    }
}

/// Layer specs for a chain of widths; hidden layers use ReLU and
/// `hidden_dropout`, the output layer is linear without dropout.
pub fn mlp_specs(input_dim: usize, hidden: &[usize], output_dim: usize, hidden_dropout: f64) -> Vec<LayerSpec> {
    let mut specs = Vec::with_capacity(hidden.len() + 1);
    let mut prev = input_dim;
    for &w in hidden {
        specs.push(LayerSpec::new(prev, w, Activation::Relu, hidden_dropout));
        prev = w;
    }
    specs.push(LayerSpec::fc(prev, output_dim, Activation::None));
    specs
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Deterministic,
    Stochastic { seed: u64 },
}

/// Weights and biases of one network. Layer `k` maps rows of width
/// `input_dim_k` through a `(input_dim_k × output_dim_k)` weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub weights: Vec<Array2>,
    pub biases: Vec<Array2>,
    /// When set the network computes `x + mlp(x)`.
    #[serde(default)]
    pub residual: bool,
}

fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::structural("network needs at least one layer"));
    }
    for (k, s) in specs.iter().enumerate() {
        if s.input_dim == 0 || s.output_dim == 0 {
            return Err(Error::structural(format!("layer {k} has a zero dimension")));
        }
        if !(0.0..1.0).contains(&s.dropout_rate) {
            return Err(Error::structural(format!(
                "layer {k} dropout rate {} outside [0, 1)",
                s.dropout_rate
            )));
        }
        if k > 0 && specs[k - 1].output_dim != s.input_dim {
            return Err(Error::structural(format!(
                "layer {k} expects input width {} but layer {} outputs {}",
                s.input_dim,
                k - 1,
                specs[k - 1].output_dim
            )));
        }
    }
    Ok(())
}

/// Scaled-variance initialization: weights `N(0, 2/in)` before ReLU and
/// `N(0, 1/in)` otherwise; biases zero.
pub fn init_params(name: &str, specs: &[LayerSpec], seed: u64) -> Result<NetworkParams> {
    validate_specs(specs)?;
    let mut weights = Vec::with_capacity(specs.len());
    let mut biases = Vec::with_capacity(specs.len());
    for (k, s) in specs.iter().enumerate() {
        let mut rng = rng_from(seed, &[k as u64]);
        let gain = match s.activation {
            Activation::Relu => 2.0,
            Activation::None => 1.0,
        };
        let std = (gain / s.input_dim as f64).sqrt();
        let data = (0..s.input_dim * s.output_dim)
            .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); std * z })
            .collect();
        weights.push(Array2::from_vec(s.input_dim, s.output_dim, data)?);
        biases.push(Array2::zeros(1, s.output_dim));
    }
    Ok(NetworkParams { name: name.to_string(), layers: specs.to_vec(), weights, biases, residual: false })
}

impl NetworkParams {
    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Array2::len).sum()
    }

    pub fn with_residual(mut self) -> Result<Self> {
        if self.input_dim() != self.output_dim() {
            return Err(Error::structural(format!(
                "residual network {} needs equal input and output widths",
                self.name
            )));
        }
        self.residual = true;
        Ok(self)
    }

    /// Set every layer's dropout rate except the output layer's.
    pub fn set_hidden_dropout(&mut self, rate: f64) {
        let last = self.layers.len() - 1;
        for layer in &mut self.layers[..last] {
            layer.dropout_rate = rate;
        }
    }

    /// Check shapes, chain and finiteness of a (possibly deserialized) network.
    pub fn validate(&self) -> Result<()> {
        validate_specs(&self.layers)?;
        if self.weights.len() != self.layers.len() || self.biases.len() != self.layers.len() {
            return Err(Error::structural(format!("network {} has mismatched layer counts", self.name)));
        }
        for (k, s) in self.layers.iter().enumerate() {
            if self.weights[k].shape() != (s.input_dim, s.output_dim) {
                return Err(Error::structural(format!("network {} weight {k} has wrong shape", self.name)));
            }
            if self.biases[k].shape() != (1, s.output_dim) {
                return Err(Error::structural(format!("network {} bias {k} has wrong shape", self.name)));
            }
            if !self.weights[k].is_finite() || !self.biases[k].is_finite() {
                return Err(Error::numeric(format!("network {} layer {k} has non-finite parameters", self.name)));
            }
        }
        if self.residual && self.input_dim() != self.output_dim() {
            return Err(Error::structural(format!("residual network {} is not square", self.name)));
        }
        Ok(())
    }

    /// Flat list of parameter arrays: all weights then all biases.
    pub fn tensors(&self) -> impl Iterator<Item = &Array2> {
        self.weights.iter().chain(self.biases.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Array2> {
        self.weights.iter_mut().chain(self.biases.iter_mut())
    }

    /// Enter the parameters into `graph`, as gradient-receiving leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind<'a>(&'a self, graph: &mut Graph, trainable: bool) -> BoundNetwork<'a> {
        let mut enter = |a: &Array2| if trainable { graph.parameter(a.clone()) } else { graph.constant(a.clone()) };
        let weights = self.weights.iter().map(&mut enter).collect();
        let biases = self.biases.iter().map(&mut enter).collect();
        BoundNetwork { params: self, weights, biases }
    }
}

/// A network whose parameters live in a particular graph.
#[derive(Clone, Debug)]
pub struct BoundNetwork<'a> {
    pub params: &'a NetworkParams,
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl BoundNetwork<'_> {
    /// Parameter nodes in the same order as [`NetworkParams::tensors`].
    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.weights.iter().chain(self.biases.iter()).copied()
    }

    /// Forward pass over a batch (one sample per row).
    pub fn forward(&self, graph: &mut Graph, input: NodeId, mode: ForwardMode) -> Result<NodeId> {
        let p = self.params;
        let (rows, cols) = graph.shape(input);
        if cols != p.input_dim() {
            return Err(Error::structural(format!(
                "network {} expects {} input columns, got {cols}",
                p.name,
                p.input_dim()
            )));
        }
        let mut row_rngs = match mode {
            ForwardMode::Deterministic => Vec::new(),
            ForwardMode::Stochastic { seed } => (0..rows).map(|r| rng_from(seed, &[r as u64])).collect(),
        };
        let mut h = input;
        for (k, spec) in p.layers.iter().enumerate() {
            let z = graph.matmul(h, self.weights[k])?;
            h = graph.add_row(z, self.biases[k])?;
            if spec.activation == Activation::Relu {
                h = graph.relu(h);
            }
            if spec.dropout_rate > 0.0 && !row_rngs.is_empty() {
                let mask = dropout_mask(&mut row_rngs, spec.output_dim, spec.dropout_rate);
                h = graph.apply_mask(h, mask)?;
            }
        }
        if p.residual {
            h = graph.add(input, h)?;
        }
        Ok(h)
    }

    /// `count` independent stochastic passes. `input_rows` holds either one
    /// row (shared by every sample) or `count` rows (one per sample).
    pub fn sample_batch(&self, graph: &mut Graph, input_rows: NodeId, count: usize, seed: u64) -> Result<NodeId> {
        if count == 0 {
            return Err(Error::contract("sample count must be at least 1"));
        }
        let rows = graph.shape(input_rows).0;
        let input = if rows == count {
            input_rows
        } else if rows == 1 {
            graph.expand_rows(input_rows, count)?
        } else {
            return Err(Error::structural(format!(
                "sample_batch input has {rows} rows; expected 1 or {count}"
            )));
        };
        self.forward(graph, input, ForwardMode::Stochastic { seed })
    }
}

fn dropout_mask(row_rngs: &mut [crate::rng::Rng], width: usize, rate: f64) -> Array2 {
    let keep = 1.0 / (1.0 - rate);
    let mut mask = Array2::zeros(row_rngs.len(), width);
    for (r, rng) in row_rngs.iter_mut().enumerate() {
        for v in mask.row_mut(r) {
            *v = if rng.random::<f64>() < rate { 0.0 } else { keep };
        }
    }
    mask
}

/// Convenience forward without gradients: parameters enter as constants.
pub fn forward(params: &NetworkParams, input: &Array2, mode: ForwardMode) -> Result<Array2> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(input.clone());
    let y = bound.forward(&mut g, x, mode)?;
    Ok(g.value(y).clone())
}

/// Convenience [`BoundNetwork::sample_batch`] without gradients.
pub fn sample_batch(params: &NetworkParams, input_rows: &Array2, count: usize, seed: u64) -> Result<Array2> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(input_rows.clone());
    let y = bound.sample_batch(&mut g, x, count, seed)?;
    Ok(g.value(y).clone())
}
