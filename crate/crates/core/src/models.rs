//! The four learnable components and the hybrid motion update.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array2, Graph, NodeId};
use crate::error::{Error, Result};
use crate::filter::{self, EnsembleNode};
use crate::rng::derive_seed;
use crate::snn::{init_params, mlp_specs, BoundNetwork, NetworkParams};

/// Floor added after the softplus of the noise network.
pub const NOISE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub state: usize,
    pub obs: usize,
    pub raw: usize,
}

/// Known-kinematics update for a unicycle state `[x, y, θ, v, θ̇]`.
///
/// `kinematic_dims` lists the indices of `(x, y, θ)` and `learned_dims` the
/// indices of `(v, θ̇)`, in that order. States inside the filter are
/// standardized; `state_mean`/`state_dev` convert to physical units for the
/// kinematic step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridMotionConfig {
    pub enabled: bool,
    pub dt: f64,
    pub learned_dims: Vec<usize>,
    pub kinematic_dims: Vec<usize>,
    pub state_mean: Vec<f64>,
    pub state_dev: Vec<f64>,
}

impl HybridMotionConfig {
    /// Standard layout `[x, y, θ, v, θ̇]`.
    pub fn unicycle(dt: f64, state_mean: Vec<f64>, state_dev: Vec<f64>) -> Self {
        Self { enabled: true, dt, learned_dims: vec![3, 4], kinematic_dims: vec![0, 1, 2], state_mean, state_dev }
    }

    pub fn validate(&self, state_dim: usize) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if self.kinematic_dims.len() != 3 || self.learned_dims.len() != 2 {
            return Err(Error::structural("hybrid motion needs 3 kinematic dims (x, y, θ) and 2 learned dims (v, θ̇)"));
        }
        let mut seen = vec![false; state_dim];
        for &d in self.kinematic_dims.iter().chain(&self.learned_dims) {
            if d >= state_dim || seen[d] {
                return Err(Error::structural(format!("hybrid dims do not partition 0..{state_dim}")));
            }
            seen[d] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::structural(format!("hybrid dims do not partition 0..{state_dim}")));
        }
        if self.state_mean.len() != state_dim || self.state_dev.len() != state_dim {
            return Err(Error::structural("hybrid standardization has the wrong length"));
        }
        if self.state_dev.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::contract("hybrid standardization deviations must be positive"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::contract("hybrid dt must be positive"));
        }
        Ok(())
    }
}

/// Transition `f`, observation `h`, sensor `s` and noise `r` networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSet {
    pub transition: NetworkParams,
    pub observation: NetworkParams,
    pub sensor: NetworkParams,
    pub noise: NetworkParams,
    pub dims: ModelDims,
    #[serde(default)]
    pub hybrid: Option<HybridMotionConfig>,
}

/// Hidden widths of the transition network.
pub const TRANSITION_HIDDEN: [usize; 4] = [32, 32, 64, 64];
/// Hidden widths of the observation network.
pub const OBSERVATION_HIDDEN: [usize; 4] = [32, 32, 64, 64];
/// Hidden widths of the noise network.
pub const NOISE_HIDDEN: [usize; 2] = [16, 16];
/// Hidden widths of the sensor network (flattened raw input).
pub const SENSOR_HIDDEN: [usize; 4] = [64, 64, 32, 32];

/// Build the four networks with fresh initialization. Hidden layers of the
/// transition and sensor networks carry `dropout_rate`.
pub fn instantiate_models(dims: ModelDims, dropout_rate: f64, seed: u64) -> Result<ModelSet> {
    if dims.state == 0 || dims.obs == 0 || dims.raw == 0 {
        return Err(Error::structural(format!("model dims must be positive, got {dims:?}")));
    }
    let transition = init_params(
        "transition",
        &mlp_specs(dims.state, &TRANSITION_HIDDEN, dims.state, dropout_rate),
        derive_seed(seed, &[0]),
    )?;
    let observation =
        init_params("observation", &mlp_specs(dims.state, &OBSERVATION_HIDDEN, dims.obs, 0.0), derive_seed(seed, &[1]))?;
    let sensor = init_params("sensor", &mlp_specs(dims.raw, &SENSOR_HIDDEN, dims.obs, dropout_rate), derive_seed(seed, &[2]))?;
    let noise = init_params("noise", &mlp_specs(dims.obs, &NOISE_HIDDEN, dims.obs, 0.0), derive_seed(seed, &[3]))?;
    let models = ModelSet { transition, observation, sensor, noise, dims, hybrid: None };
    models.check_shapes()?;
    Ok(models)
}

impl ModelSet {
    pub fn with_hybrid(mut self, cfg: HybridMotionConfig) -> Result<Self> {
        cfg.validate(self.dims.state)?;
        self.hybrid = Some(cfg);
        Ok(self)
    }

    /// Networks in a fixed order: transition, observation, sensor, noise.
    pub fn networks(&self) -> [&NetworkParams; 4] {
        [&self.transition, &self.observation, &self.sensor, &self.noise]
    }

    pub fn networks_mut(&mut self) -> [&mut NetworkParams; 4] {
        [&mut self.transition, &mut self.observation, &mut self.sensor, &mut self.noise]
    }

    /// Every parameter tensor: networks in [`Self::networks`] order, each
    /// with its weights then biases.
    pub fn tensors(&self) -> impl Iterator<Item = &Array2> {
        self.networks().into_iter().flat_map(|n| n.tensors())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Array2> {
        self.networks_mut().into_iter().flat_map(|n| n.tensors_mut())
    }

    /// Names matching [`Self::tensors`], e.g. `transition.weight.0`.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for net in self.networks() {
            for kind in ["weight", "bias"] {
                for k in 0..net.layers.len() {
                    names.push(format!("{}.{kind}.{k}", net.name));
                }
            }
        }
        names
    }

    pub fn num_parameters(&self) -> usize {
        self.networks().iter().map(|n| n.num_parameters()).sum()
    }

    /// Static shape contract plus a dry-run filter step on a two-member
    /// ensemble, so every composition error surfaces at construction.
    pub fn check_shapes(&self) -> Result<()> {
        let d = self.dims;
        let want = [
            (&self.transition, d.state, d.state),
            (&self.observation, d.state, d.obs),
            (&self.sensor, d.raw, d.obs),
            (&self.noise, d.obs, d.obs),
        ];
        for (net, i, o) in want {
            net.validate()?;
            if net.input_dim() != i || net.output_dim() != o {
                return Err(Error::structural(format!(
                    "network {} maps {}->{}, expected {i}->{o}",
                    net.name,
                    net.input_dim(),
                    net.output_dim()
                )));
            }
        }
        if let Some(h) = &self.hybrid {
            h.validate(d.state)?;
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let ens = filter::Ensemble::new(Array2::zeros(2, d.state))?.enter(&mut g);
        filter::filter_step(&bound, ens, Some(&vec![0.0; d.raw]), 0, &mut g)?;
        Ok(())
    }

    pub fn bind<'a>(&'a self, graph: &mut Graph, trainable: bool) -> BoundModels<'a> {
        BoundModels {
            models: self,
            transition: self.transition.bind(graph, trainable),
            observation: self.observation.bind(graph, trainable),
            sensor: self.sensor.bind(graph, trainable),
            noise: self.noise.bind(graph, trainable),
        }
    }

    pub fn set_dropout(&mut self, rate: f64) {
        self.transition.set_hidden_dropout(rate);
        self.sensor.set_hidden_dropout(rate);
    }
}

/// A [`ModelSet`] entered into one graph.
#[derive(Clone, Debug)]
pub struct BoundModels<'a> {
    pub models: &'a ModelSet,
    pub transition: BoundNetwork<'a>,
    pub observation: BoundNetwork<'a>,
    pub sensor: BoundNetwork<'a>,
    pub noise: BoundNetwork<'a>,
}

impl BoundModels<'_> {
    pub fn networks(&self) -> [&BoundNetwork<'_>; 4] {
        [&self.transition, &self.observation, &self.sensor, &self.noise]
    }

    /// Parameter nodes in [`ModelSet::tensors`] order.
    pub fn nodes(&self) -> Vec<NodeId> {
        self.networks().into_iter().flat_map(|n| n.nodes()).collect()
    }
}

/// Observation-noise diagonal `softplus(r(ỹ)) + 1e-6` from the sensor
/// sample mean.
pub fn noise_diag(noise: &BoundNetwork, learned_obs_mean: NodeId, graph: &mut Graph) -> Result<NodeId> {
    let raw = noise.forward(graph, learned_obs_mean, crate::snn::ForwardMode::Deterministic)?;
    let sp = graph.softplus(raw);
    let (r, c) = graph.shape(sp);
    graph.add_const(sp, Array2::filled(r, c, NOISE_FLOOR))
}

/// Wrap an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let w = a - two_pi * ((a - PI) / two_pi).ceil();
    // ceil can land exactly on -π for inputs like -π
    if w <= -PI {
        w + two_pi
    } else {
        w
    }
}

/// One explicit-Euler unicycle step in physical units on
/// `[x, y, θ, v, θ̇]`-ordered values; velocities are held.
pub fn unicycle_step(pose: [f64; 3], v: f64, omega: f64, dt: f64) -> [f64; 3] {
    let [x, y, th] = pose;
    [x + v * th.cos() * dt, y + v * th.sin() * dt, wrap_angle(th + omega * dt)]
}

/// Prediction with known kinematics for `(x, y, θ)` and the transition
/// network for `(v, θ̇)`.
pub fn hybrid_predict(
    models: &BoundModels,
    config: &HybridMotionConfig,
    ensemble: EnsembleNode,
    seed: u64,
    graph: &mut Graph,
) -> Result<EnsembleNode> {
    if !config.enabled {
        return Err(Error::contract("hybrid_predict called with a disabled config"));
    }
    config.validate(ensemble.dim)?;
    let sampled = filter::predict(&models.transition, ensemble, seed, graph)?;

    let mean = graph.constant(Array2::row_vector(&config.state_mean));
    let dev = graph.constant(Array2::row_vector(&config.state_dev));
    let scaled = graph.mul_row(ensemble.node, dev)?;
    let phys = graph.add_row(scaled, mean)?;
    let col = |g: &mut Graph, src: NodeId, d: usize| g.slice_cols(src, d, d + 1);
    let [ix, iy, ith] = [config.kinematic_dims[0], config.kinematic_dims[1], config.kinematic_dims[2]];
    let [iv, iw] = [config.learned_dims[0], config.learned_dims[1]];
    let x = col(graph, phys, ix)?;
    let y = col(graph, phys, iy)?;
    let th = col(graph, phys, ith)?;
    let v = col(graph, phys, iv)?;
    let w = col(graph, phys, iw)?;

    let cos = graph.cos(th);
    let sin = graph.sin(th);
    let vc = graph.mul(v, cos)?;
    let vs = graph.mul(v, sin)?;
    let dx = graph.scale(vc, config.dt);
    let dy = graph.scale(vs, config.dt);
    let nx = graph.add(x, dx)?;
    let ny = graph.add(y, dy)?;
    let dth = graph.scale(w, config.dt);
    let nth_raw = graph.add(th, dth)?;
    // shift every member by a constant multiple of 2π so the headings stay
    // within π of the wrapped circular mean and the cloud never splits
    let offsets = {
        let raw = graph.value(nth_raw);
        let (s, c) = raw.as_slice().iter().fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
        let center = s.atan2(c);
        raw.map(|a| -2.0 * PI * ((a - center) / (2.0 * PI)).round())
    };
    let nth = graph.add_const(nth_raw, offsets)?;

    let mut columns = Vec::with_capacity(ensemble.dim);
    for d in 0..ensemble.dim {
        let c = if d == ix {
            standardize_col(graph, nx, config, d)?
        } else if d == iy {
            standardize_col(graph, ny, config, d)?
        } else if d == ith {
            standardize_col(graph, nth, config, d)?
        } else {
            col(graph, sampled.node, d)?
        };
        columns.push(c);
    }
    let next = graph.concat_cols(&columns)?;
    EnsembleNode::from_node(graph, next)
}

fn standardize_col(graph: &mut Graph, phys: NodeId, config: &HybridMotionConfig, d: usize) -> Result<NodeId> {
    let rows = graph.shape(phys).0;
    let shifted = graph.add_const(phys, Array2::filled(rows, 1, -config.state_mean[d]))?;
    Ok(graph.scale(shifted, 1.0 / config.state_dev[d]))
}
