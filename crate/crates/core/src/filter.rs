//! The differentiable ensemble Kalman filter.
//!
//! Belief is an `E×S` ensemble (one member per row). A step propagates every
//! member through one stochastic pass of the transition network, maps the
//! prior members into observation space, samples `E` learned observations
//! from the stochastic sensor network, and applies the perturbed-observation
//! Kalman update with the empirical gain
//!
//! ```text
//! A  = X - mean(X)                     (E×S)
//! HA = HX - mean(HX)                   (E×O)
//! S  = HAᵀHA/(E-1) + diag(r(ỹ))        (O×O)
//! K  = AᵀHA/(E-1) · S⁻¹                (S×O)
//! X' = X + (Ỹ - HX)·Kᵀ
//! ```
//!
//! Everything is recorded in a [`Graph`], so a loss on the posterior reaches
//! all four networks.

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Array2, Graph, NodeId};
use crate::error::{Error, Result};
use crate::models::{self, BoundModels};
use crate::rng::{derive_seed, rng_from};
use crate::snn::{BoundNetwork, ForwardMode};

/// Diagonal entries of the innovation covariance below this trigger jitter.
pub const MIN_INNOVATION_DIAGONAL: f64 = 1e-9;
/// First jitter added to the innovation covariance.
pub const INITIAL_JITTER: f64 = 1e-6;
/// Retries after the first jitter, each with ten times more.
pub const JITTER_RETRIES: usize = 3;

/// Detached ensemble: `size × dim` members, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    members: Array2,
}

impl Ensemble {
    pub fn new(members: Array2) -> Result<Self> {
        if members.rows() < 2 {
            return Err(Error::contract(format!("ensemble needs at least 2 members, got {}", members.rows())));
        }
        if members.cols() == 0 {
            return Err(Error::structural("ensemble state dimension is zero"));
        }
        if !members.is_finite() {
            return Err(Error::numeric("ensemble contains non-finite entries"));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &Array2 {
        &self.members
    }

    pub fn into_members(self) -> Array2 {
        self.members
    }

    pub fn size(&self) -> usize {
        self.members.rows()
    }

    pub fn dim(&self) -> usize {
        self.members.cols()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.members.mean_rows().into_vec()
    }

    /// Enter the members into `graph` as a constant.
    pub fn enter(&self, graph: &mut Graph) -> EnsembleNode {
        EnsembleNode { node: graph.constant(self.members.clone()), size: self.size(), dim: self.dim() }
    }
}

/// Ensemble living in a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnsembleNode {
    pub node: NodeId,
    pub size: usize,
    pub dim: usize,
}

impl EnsembleNode {
    pub fn from_node(graph: &Graph, node: NodeId) -> Result<Self> {
        let (size, dim) = graph.shape(node);
        if size < 2 {
            return Err(Error::contract(format!("ensemble needs at least 2 members, got {size}")));
        }
        Ok(Self { node, size, dim })
    }

    pub fn to_ensemble(self, graph: &Graph) -> Result<Ensemble> {
        Ensemble::new(graph.value(self.node).clone())
    }

    /// Ensemble mean as a `1×S` node.
    pub fn mean(self, graph: &mut Graph) -> Result<NodeId> {
        graph.mean_rows(self.node)
    }
}

/// `E` members drawn as `mean + spread ⊙ z`, `z ~ N(0, I)`, member `i` from
/// seed `(seed, i)`.
pub fn init_ensemble(mean: &[f64], spread: &[f64], size: usize, seed: u64) -> Result<Ensemble> {
    if size < 2 {
        return Err(Error::contract(format!("ensemble needs at least 2 members, got {size}")));
    }
    if mean.len() != spread.len() {
        return Err(Error::structural(format!(
            "mean has {} dims but spread has {}",
            mean.len(),
            spread.len()
        )));
    }
    if spread.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::contract("spread must be non-negative"));
    }
    let mut members = Array2::zeros(size, mean.len());
    for i in 0..size {
        let mut rng = rng_from(seed, &[i as u64]);
        for (d, v) in members.row_mut(i).iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = mean[d] + spread[d] * z;
        }
    }
    Ensemble::new(members)
}

/// Column mean and unbiased (divisor `E-1`) standard deviation.
pub fn ensemble_stats(ensemble: &Ensemble) -> (Array2, Array2) {
    let m = ensemble.members();
    let mean = m.mean_rows();
    let centered = m.sub_row(&mean);
    let var = centered.map(|v| v * v).sum_rows().scale(1.0 / (m.rows() - 1) as f64);
    (mean, var.map(f64::sqrt))
}

/// Prediction: one stochastic transition pass per member.
pub fn predict(transition: &BoundNetwork, ensemble: EnsembleNode, seed: u64, graph: &mut Graph) -> Result<EnsembleNode> {
    let p = transition.params;
    if p.input_dim() != ensemble.dim || p.output_dim() != ensemble.dim {
        return Err(Error::structural(format!(
            "transition network {} maps {}->{} but the state has {} dims",
            p.name,
            p.input_dim(),
            p.output_dim(),
            ensemble.dim
        )));
    }
    let next = transition.sample_batch(graph, ensemble.node, ensemble.size, seed)?;
    EnsembleNode::from_node(graph, next)
}

/// Predicted observations `h(xⁱ)` (deterministic pass) and their centered
/// version.
pub fn observe(observation_model: &BoundNetwork, ensemble: EnsembleNode, graph: &mut Graph) -> Result<(NodeId, NodeId)> {
    if observation_model.params.input_dim() != ensemble.dim {
        return Err(Error::structural(format!(
            "observation network {} expects {} state dims, ensemble has {}",
            observation_model.params.name,
            observation_model.params.input_dim(),
            ensemble.dim
        )));
    }
    let predicted = observation_model.forward(graph, ensemble.node, ForwardMode::Deterministic)?;
    let mean = graph.mean_rows(predicted)?;
    let centered = graph.sub_row(predicted, mean)?;
    Ok((predicted, centered))
}

/// `size` stochastic sensor passes on one raw observation; returns the
/// samples (`E×O`) and their mean (`1×O`).
pub fn sample_sensor(
    sensor: &BoundNetwork,
    raw_observation: &[f64],
    size: usize,
    seed: u64,
    graph: &mut Graph,
) -> Result<(NodeId, NodeId)> {
    if sensor.params.input_dim() != raw_observation.len() {
        return Err(Error::structural(format!(
            "sensor network {} expects raw length {}, got {}",
            sensor.params.name,
            sensor.params.input_dim(),
            raw_observation.len()
        )));
    }
    let raw = graph.constant(Array2::row_vector(raw_observation));
    let sampled = sensor.sample_batch(graph, raw, size, seed)?;
    let mean = graph.mean_rows(sampled)?;
    Ok((sampled, mean))
}

/// `S = sym(HAᵀHA/(E-1) + diag(noise))` with `sym(M) = (M+Mᵀ)/2`.
pub fn innovation_covariance(centered: NodeId, noise_diag: NodeId, graph: &mut Graph) -> Result<NodeId> {
    let (e, o) = graph.shape(centered);
    if e < 2 {
        return Err(Error::contract("innovation covariance needs at least 2 members"));
    }
    if graph.shape(noise_diag) != (1, o) {
        let (r, c) = graph.shape(noise_diag);
        return Err(Error::structural(format!("noise diagonal is {r}x{c}, expected 1x{o}")));
    }
    if graph.value(noise_diag).as_slice().iter().any(|v| !(*v > 0.0)) {
        return Err(Error::contract("observation noise entries must be positive"));
    }
    let ht = graph.transpose(centered);
    let outer = graph.matmul(ht, centered)?;
    let cov = graph.scale(outer, 1.0 / (e - 1) as f64);
    let noise = graph.diag(noise_diag)?;
    let s = graph.add(cov, noise)?;
    let st = graph.transpose(s);
    let sum = graph.add(s, st)?;
    Ok(graph.scale(sum, 0.5))
}

/// Invert the innovation covariance, adding `1e-6·I` (then ten times more,
/// up to three retries) if its diagonal is tiny or the solve fails.
/// Returns the inverse node and the jitter that was used.
pub fn invert_with_jitter(s: NodeId, graph: &mut Graph) -> Result<(NodeId, f64)> {
    let n = graph.shape(s).0;
    let tiny = graph.value(s).diagonal().iter().any(|d| *d < MIN_INNOVATION_DIAGONAL);
    if !tiny {
        if let Ok(inv) = graph.inverse(s) {
            return Ok((inv, 0.0));
        }
    }
    let mut jitter = INITIAL_JITTER;
    for _ in 0..=JITTER_RETRIES {
        let jittered = graph.add_const(s, Array2::identity(n).scale(jitter))?;
        if let Ok(inv) = graph.inverse(jittered) {
            return Ok((inv, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::numeric(format!("innovation covariance singular after jitter {:e}", jitter / 10.0)))
}

/// Output of [`kalman_update`].
#[derive(Clone, Copy, Debug)]
pub struct KalmanUpdate {
    pub posterior: EnsembleNode,
    pub gain: NodeId,
    pub anomalies: NodeId,
    pub jitter: f64,
}

/// Measurement update `xⁱ ← xⁱ + K(ỹⁱ - h(xⁱ))`.
pub fn kalman_update(
    prior: EnsembleNode,
    centered_obs: NodeId,
    sampled_obs: NodeId,
    predicted_obs: NodeId,
    innovation_cov: NodeId,
    graph: &mut Graph,
) -> Result<KalmanUpdate> {
    let e = prior.size;
    let o = graph.shape(centered_obs).1;
    for (what, id) in [("centered", centered_obs), ("sampled", sampled_obs), ("predicted", predicted_obs)] {
        if graph.shape(id) != (e, o) {
            let (r, c) = graph.shape(id);
            return Err(Error::structural(format!("{what} observations are {r}x{c}, expected {e}x{o}")));
        }
    }
    if graph.shape(innovation_cov) != (o, o) {
        return Err(Error::structural("innovation covariance shape does not match observations"));
    }
    let mean = graph.mean_rows(prior.node)?;
    let anomalies = graph.sub_row(prior.node, mean)?;
    let at = graph.transpose(anomalies);
    let cross = graph.matmul(at, centered_obs)?;
    let cross = graph.scale(cross, 1.0 / (e - 1) as f64);
    let (s_inv, jitter) = invert_with_jitter(innovation_cov, graph)?;
    let gain = graph.matmul(cross, s_inv)?;
    let innovation = graph.sub(sampled_obs, predicted_obs)?;
    let gain_t = graph.transpose(gain);
    let correction = graph.matmul(innovation, gain_t)?;
    let posterior = graph.add(prior.node, correction)?;
    Ok(KalmanUpdate { posterior: EnsembleNode::from_node(graph, posterior)?, gain, anomalies, jitter })
}

/// Nodes of the observation side of an update.
#[derive(Clone, Copy, Debug)]
pub struct ObservationEnsemble {
    pub predicted: NodeId,
    pub centered: NodeId,
    pub sampled: NodeId,
    pub sample_mean: NodeId,
}

/// Update artifacts; absent when the step had no observation.
#[derive(Clone, Copy, Debug)]
pub struct UpdateArtifacts {
    pub observations: ObservationEnsemble,
    pub anomalies: NodeId,
    pub gain: NodeId,
    pub innovation_cov: NodeId,
    pub noise_diag: NodeId,
    pub jitter: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct StepResult {
    pub prior: EnsembleNode,
    pub posterior: EnsembleNode,
    pub update: Option<UpdateArtifacts>,
}

/// Seed used by the prediction pass of a step.
pub fn predict_seed(step_seed: u64) -> u64 {
    derive_seed(step_seed, &[0])
}

/// Seed used by the sensor passes of a step.
pub fn sensor_seed(step_seed: u64) -> u64 {
    derive_seed(step_seed, &[1])
}

/// Seed of timestep `t` in a run with master seed `seed`.
pub fn step_seed(seed: u64, t: usize) -> u64 {
    derive_seed(seed, &[t as u64])
}

/// One full filter step. Without an observation the prior is returned as
/// the posterior.
pub fn filter_step(
    models: &BoundModels,
    ensemble: EnsembleNode,
    raw_observation: Option<&[f64]>,
    seed: u64,
    graph: &mut Graph,
) -> Result<StepResult> {
    let prior = match &models.models.hybrid {
        Some(cfg) if cfg.enabled => models::hybrid_predict(models, cfg, ensemble, predict_seed(seed), graph)?,
        _ => predict(&models.transition, ensemble, predict_seed(seed), graph)?,
    };
    let Some(raw) = raw_observation else {
        return Ok(StepResult { prior, posterior: prior, update: None });
    };
    let (predicted, centered) = observe(&models.observation, prior, graph)?;
    let (sampled, sample_mean) = sample_sensor(&models.sensor, raw, prior.size, sensor_seed(seed), graph)?;
    let noise_diag = models::noise_diag(&models.noise, sample_mean, graph)?;
    let innovation_cov = innovation_covariance(centered, noise_diag, graph)?;
    let upd = kalman_update(prior, centered, sampled, predicted, innovation_cov, graph)?;
    Ok(StepResult {
        prior,
        posterior: upd.posterior,
        update: Some(UpdateArtifacts {
            observations: ObservationEnsemble { predicted, centered, sampled, sample_mean },
            anomalies: upd.anomalies,
            gain: upd.gain,
            innovation_cov,
            noise_diag,
            jitter: upd.jitter,
        }),
    })
}
