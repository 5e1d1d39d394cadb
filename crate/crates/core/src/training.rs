//! End-to-end training through the filter.
//!
//! Each training window starts an ensemble at the window's first true state
//! and runs [`filter_step`] over the remaining steps. The loss is the
//! weighted sum of the posterior-mean error, the prior-mean error and the
//! sensor error; gradients reach all four networks through the update.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array2, Graph, NodeId};
use crate::error::{Error, Result};
use crate::filter::{self, filter_step, init_ensemble};
use crate::models::{instantiate_models, noise_diag, wrap_angle, HybridMotionConfig, ModelDims, ModelSet};
use crate::rng::{derive_seed, rng_from};
use crate::snn::{BoundNetwork, ForwardMode, NetworkParams};
use crate::tasks::{json_error, state_difference, Dataset, TaskKind, Trajectory, TrajectoryRecord};

/// Format tag of checkpoint files.
pub const CHECKPOINT_FORMAT: &str = "denkf-ckpt-v1";
/// Global gradient-norm clip applied before every optimizer step.
pub const GRAD_CLIP_NORM: f64 = 10.0;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Curriculum {
    Joint,
    /// Fit each network on its own supervised pairs before joint training.
    SensorPretrainThenJoint { pretrain_epochs: usize, pretrain_learning_rate: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub end_to_end: f64,
    pub transition: f64,
    pub sensor: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { end_to_end: 1.0, transition: 1.0, sensor: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ensemble_size: usize,
    pub window_length: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    pub curriculum: Curriculum,
    pub loss_weights: LossWeights,
    /// Standard deviation of the ensemble around the window's first state.
    pub init_spread: f64,
    /// Subsample of windows per epoch; all windows when absent.
    #[serde(default)]
    pub windows_per_epoch: Option<usize>,
}

impl TrainConfig {
    /// 50 epochs, batch 64, learning rate 1e-5, 32 members.
    pub fn paper_default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-5,
            ensemble_size: 32,
            window_length: 16,
            dropout_rate: 0.1,
            seed: 0,
            curriculum: Curriculum::Joint,
            loss_weights: LossWeights::default(),
            init_spread: 0.1,
            windows_per_epoch: None,
        }
    }

    /// Quick profile for checking a pipeline end to end.
    pub fn smoke() -> Self {
        Self {
            epochs: 2,
            batch_size: 8,
            learning_rate: 3e-4,
            curriculum: Curriculum::SensorPretrainThenJoint { pretrain_epochs: 2, pretrain_learning_rate: 1e-3 },
            ..Self::paper_default()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "paper-default" => Ok(Self::paper_default()),
            "smoke" => Ok(Self::smoke()),
            other => Err(Error::contract(format!("unknown profile {other:?}; expected paper-default or smoke"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::contract(m));
        if self.epochs < 1 {
            return fail("epochs must be at least 1".into());
        }
        if self.window_length < 2 {
            return fail(format!("window length must be at least 2, got {}", self.window_length));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return fail(format!("learning rate must be non-negative, got {}", self.learning_rate));
        }
        if let Curriculum::SensorPretrainThenJoint { pretrain_learning_rate: lr, .. } = self.curriculum {
            if !(lr >= 0.0) || !lr.is_finite() {
                return fail(format!("pretraining learning rate must be non-negative, got {lr}"));
            }
        }
        if self.batch_size < 1 {
            return fail("batch size must be at least 1".into());
        }
        if self.ensemble_size < 2 {
            return fail(format!("ensemble size must be at least 2, got {}", self.ensemble_size));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.init_spread >= 0.0) {
            return fail("initial spread must be non-negative".into());
        }
        let w = self.loss_weights;
        if [w.end_to_end, w.transition, w.sensor].iter().any(|v| !(*v >= 0.0)) {
            return fail("loss weights must be non-negative".into());
        }
        Ok(())
    }
}

/// Squared differences with angle dims wrapped; the wrap is a constant
/// shift so its derivative is one.
fn wrapped_difference(graph: &mut Graph, estimate: NodeId, truth: &Array2, angle_dims: &[usize]) -> Result<NodeId> {
    if graph.shape(estimate) != truth.shape() {
        let (r, c) = graph.shape(estimate);
        return Err(Error::structural(format!(
            "estimate is {r}x{c}, truth is {}x{}",
            truth.rows(),
            truth.cols()
        )));
    }
    let truth_node = graph.constant(truth.clone());
    let diff = graph.sub(estimate, truth_node)?;
    if angle_dims.is_empty() {
        return Ok(diff);
    }
    let value = graph.value(diff);
    let mut shift = Array2::zeros(value.rows(), value.cols());
    for r in 0..value.rows() {
        for &d in angle_dims {
            shift[(r, d)] = wrap_angle(value[(r, d)]) - value[(r, d)];
        }
    }
    graph.add_const(diff, shift)
}

fn mean_square(graph: &mut Graph, diff: NodeId) -> NodeId {
    let n = graph.value(diff).len().max(1) as f64;
    let sq = graph.square(diff);
    let total = graph.sum(sq);
    graph.scale(total, 1.0 / n)
}

/// Mean squared error of estimated state means over steps and dims.
pub fn loss_end_to_end(graph: &mut Graph, estimated_means: NodeId, truth: &Array2, angle_dims: &[usize]) -> Result<NodeId> {
    let diff = wrapped_difference(graph, estimated_means, truth, angle_dims)?;
    Ok(mean_square(graph, diff))
}

/// Prior-mean error against the true state and sensor-mean error against
/// the observation target.
pub fn loss_intermediate(
    graph: &mut Graph,
    transition_prior_means: NodeId,
    truth: &Array2,
    sensor_means: NodeId,
    obs_targets: &Array2,
    angle_dims: &[usize],
) -> Result<(NodeId, NodeId)> {
    let prior = wrapped_difference(graph, transition_prior_means, truth, angle_dims)?;
    let sensor = wrapped_difference(graph, sensor_means, obs_targets, &[])?;
    Ok((mean_square(graph, prior), mean_square(graph, sensor)))
}

/// Adam moments and step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<Array2>,
    pub second_moment: Vec<Array2>,
}

impl AdamState {
    pub fn new<'a>(shapes: impl Iterator<Item = &'a Array2>) -> Self {
        let zeros: Vec<Array2> = shapes.map(|a| Array2::zeros(a.rows(), a.cols())).collect();
        Self { step: 0, first_moment: zeros.clone(), second_moment: zeros }
    }
}

/// Euclidean norm over every gradient entry.
pub fn global_norm(grads: &[Array2]) -> f64 {
    grads.iter().map(Array2::norm_sq).sum::<f64>().sqrt()
}

/// Rescale `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Array2], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().for_each(|g| *g = g.scale(k));
    }
    norm
}

/// One Adam step with bias correction after clipping the global gradient
/// norm to [`GRAD_CLIP_NORM`]. Returns the unclipped norm.
pub fn optimizer_step(params: &mut [&mut Array2], grads: &[Array2], state: &mut AdamState, lr: f64) -> Result<f64> {
    if params.len() != grads.len() || state.first_moment.len() != grads.len() {
        return Err(Error::structural(format!(
            "optimizer got {} parameters, {} gradients and {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.first_moment[i].shape() != g.shape() {
            return Err(Error::structural(format!("gradient {i} does not match its parameter shape")));
        }
    }
    let mut grads = grads.to_vec();
    let norm = clip_global_norm(&mut grads, GRAD_CLIP_NORM);
    if !norm.is_finite() {
        return Err(Error::numeric("non-finite gradient norm"));
    }
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for (i, g) in grads.iter().enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        let p = params[i].as_mut_slice();
        for (k, gk) in g.as_slice().iter().enumerate() {
            let mk = &mut m.as_mut_slice()[k];
            *mk = ADAM_BETA1 * *mk + (1.0 - ADAM_BETA1) * gk;
            let vk = &mut v.as_mut_slice()[k];
            *vk = ADAM_BETA2 * *vk + (1.0 - ADAM_BETA2) * gk * gk;
            let m_hat = m.as_slice()[k] / bc1;
            let v_hat = v.as_slice()[k] / bc2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
    Ok(norm)
}

/// Instantiate networks sized for the dataset's task, with the known
/// unicycle kinematics when the task is odometry.
pub fn models_for_dataset(dataset: &Dataset, dropout_rate: f64, seed: u64) -> Result<ModelSet> {
    let spec = &dataset.spec;
    let dims = ModelDims { state: spec.state_dim(), obs: spec.obs_dim(), raw: spec.raw_dim() };
    let models = instantiate_models(dims, dropout_rate, seed)?;
    match spec.kind {
        TaskKind::UnicycleOdometry { .. } => models.with_hybrid(HybridMotionConfig::unicycle(
            spec.dt,
            dataset.stats.state_mean.clone(),
            dataset.stats.state_dev.clone(),
        )),
        _ => Ok(models),
    }
}

/// Outputs of filtering one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterRun {
    /// Posterior means, one per record; the first is the initial ensemble
    /// mean.
    pub means: Vec<Vec<f64>>,
    /// Mean wall time of one filter step in seconds.
    pub step_seconds: f64,
}

/// Filter a whole trajectory without gradients, starting from its first
/// true state.
pub fn run_filter(models: &ModelSet, trajectory: &[TrajectoryRecord], ensemble_size: usize, spread: f64, seed: u64) -> Result<FilterRun> {
    let first = trajectory.first().ok_or_else(|| Error::contract("empty trajectory"))?;
    let s = first.true_state.len();
    let mut ens = init_ensemble(&first.true_state, &vec![spread; s], ensemble_size, derive_seed(seed, &[u64::MAX]))?;
    let mut means = vec![ens.mean()];
    let start = Instant::now();
    for (t, rec) in trajectory.iter().enumerate().skip(1) {
        let mut g = Graph::new();
        let bound = models.bind(&mut g, false);
        let node = ens.enter(&mut g);
        let step = filter_step(&bound, node, rec.raw_observation.as_deref(), filter::step_seed(seed, t), &mut g)?;
        ens = step.posterior.to_ensemble(&g)?;
        means.push(ens.mean());
    }
    let steps = trajectory.len().saturating_sub(1).max(1);
    Ok(FilterRun { means, step_seconds: start.elapsed().as_secs_f64() / steps as f64 })
}

/// Mean squared (wrapped) error of `estimates` against the true states,
/// skipping the first step, which every method starts from exactly.
pub fn sequence_mse(estimates: &[Vec<f64>], trajectory: &[TrajectoryRecord], angle_dims: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (est, rec) in estimates.iter().zip(trajectory).skip(1) {
        for d in state_difference(est, &rec.true_state, angle_dims) {
            total += d * d;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Mean over trajectories of [`sequence_mse`] after filtering each one.
pub fn evaluate_mse(
    models: &ModelSet,
    trajectories: &[Trajectory],
    angle_dims: &[usize],
    ensemble_size: usize,
    spread: f64,
    seed: u64,
) -> Result<f64> {
    let per: Vec<f64> = trajectories
        .par_iter()
        .enumerate()
        .map(|(i, tr)| {
            let run = run_filter(models, tr, ensemble_size, spread, derive_seed(seed, &[i as u64]))?;
            Ok(sequence_mse(&run.means, tr, angle_dims))
        })
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len().max(1) as f64)
}

/// Loss of one window and its gradient for every parameter tensor.
#[derive(Clone, Debug)]
pub struct WindowGradient {
    pub loss: f64,
    pub end_to_end: f64,
    pub transition: f64,
    pub sensor: f64,
    pub grads: Vec<Array2>,
}

/// Run the filter over `window` with trainable parameters and
/// backpropagate the weighted loss.
pub fn window_gradient(
    models: &ModelSet,
    window: &[TrajectoryRecord],
    config: &TrainConfig,
    angle_dims: &[usize],
    seed: u64,
) -> Result<WindowGradient> {
    if window.len() < 2 {
        return Err(Error::contract("window needs at least 2 records"));
    }
    let mut g = Graph::new();
    let bound = models.bind(&mut g, true);
    let first = &window[0];
    let s = first.true_state.len();
    let init = init_ensemble(&first.true_state, &vec![config.init_spread; s], config.ensemble_size, derive_seed(seed, &[u64::MAX]))?;
    let mut ens = init.enter(&mut g);
    let (mut posts, mut priors, mut sensors) = (Vec::new(), Vec::new(), Vec::new());
    let mut targets: Vec<Vec<f64>> = Vec::new();
    for (t, rec) in window.iter().enumerate().skip(1) {
        let step = filter_step(&bound, ens, rec.raw_observation.as_deref(), filter::step_seed(seed, t), &mut g)?;
        posts.push(step.posterior.mean(&mut g)?);
        priors.push(step.prior.mean(&mut g)?);
        if let Some(u) = step.update {
            sensors.push(u.observations.sample_mean);
            targets.push(rec.learned_obs_target.clone());
        }
        ens = step.posterior;
    }
    let truth = Array2::from_rows(&window[1..].iter().map(|r| r.true_state.clone()).collect::<Vec<_>>())?;
    let post_node = g.concat_rows(&posts)?;
    let prior_node = g.concat_rows(&priors)?;
    let l_e2e = loss_end_to_end(&mut g, post_node, &truth, angle_dims)?;
    let w = config.loss_weights;
    let mut total = g.scale(l_e2e, w.end_to_end);
    let l_prior = {
        let diff = wrapped_difference(&mut g, prior_node, &truth, angle_dims)?;
        mean_square(&mut g, diff)
    };
    let weighted = g.scale(l_prior, w.transition);
    total = g.add(total, weighted)?;
    let mut sensor_loss = 0.0;
    if !sensors.is_empty() {
        let sensor_node = g.concat_rows(&sensors)?;
        let diff = wrapped_difference(&mut g, sensor_node, &Array2::from_rows(&targets)?, &[])?;
        let l_sensor = mean_square(&mut g, diff);
        sensor_loss = g.value(l_sensor).item();
        let weighted = g.scale(l_sensor, w.sensor);
        total = g.add(total, weighted)?;
    }
    let loss = g.value(total).item();
    if !loss.is_finite() {
        return Err(Error::numeric("non-finite loss"));
    }
    let grads = g.backward(total)?;
    let nodes = bound.nodes();
    let grads = nodes.iter().zip(models.tensors()).map(|(&n, p)| grads.get_or_zeros(n, p.shape())).collect();
    Ok(WindowGradient {
        loss,
        end_to_end: g.value(l_e2e).item(),
        transition: g.value(l_prior).item(),
        sensor: sensor_loss,
        grads,
    })
}

/// Every `(trajectory, start)` pair of non-overlapping windows.
pub fn window_starts(trajectories: &[Trajectory], window_length: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, tr) in trajectories.iter().enumerate() {
        let mut start = 0;
        while start + window_length <= tr.len() {
            out.push((i, start));
            start += window_length;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub wall_seconds: f64,
}

/// Parameters, configuration and optimizer state after some epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub models: ModelSet,
    pub config: TrainConfig,
    pub optimizer: AdamState,
    /// Number of completed joint epochs.
    pub epoch: usize,
    pub val_mse: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Lowest validation MSE over all epochs.
    pub best: Checkpoint,
    /// State after the final epoch, for resuming.
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
    pub pretrain_losses: Vec<f64>,
}

/// Angle dims of the state for a dataset's task.
pub fn angle_dims(dataset: &Dataset) -> Vec<usize> {
    dataset.spec.angle_dims()
}

fn check_dims(models: &ModelSet, dataset: &Dataset) -> Result<()> {
    let spec = &dataset.spec;
    let want = ModelDims { state: spec.state_dim(), obs: spec.obs_dim(), raw: spec.raw_dim() };
    if models.dims != want {
        return Err(Error::structural(format!("model dims {:?} do not match the dataset {:?}", models.dims, want)));
    }
    Ok(())
}

type PairPredictor<'p> = dyn Fn(&mut Graph, &BoundNetwork, NodeId, u64) -> Result<NodeId> + 'p;

/// Minimize the mean squared error between `predict(input)` and the
/// target of every pair, in shuffled minibatches.
fn fit_pairs(
    net: &mut NetworkParams,
    pairs: &[(Vec<f64>, Vec<f64>)],
    config: &TrainConfig,
    epochs: usize,
    learning_rate: f64,
    stream: u64,
    angle_dims: &[usize],
    predict: &PairPredictor,
) -> Result<Vec<f64>> {
    let batch = config.batch_size.max(32);
    let mut state = AdamState::new(net.tensors());
    let mut losses = Vec::with_capacity(epochs);
    if pairs.is_empty() {
        return Ok(vec![0.0; epochs]);
    }
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng_from(config.seed, &[stream, epoch as u64]));
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(batch).enumerate() {
            let input = Array2::from_rows(&chunk.iter().map(|&i| pairs[i].0.as_slice()).collect::<Vec<_>>())?;
            let target = Array2::from_rows(&chunk.iter().map(|&i| pairs[i].1.as_slice()).collect::<Vec<_>>())?;
            let mut g = Graph::new();
            let bound = net.bind(&mut g, true);
            let x = g.constant(input);
            let seed = derive_seed(config.seed, &[stream, epoch as u64, b as u64]);
            let y = predict(&mut g, &bound, x, seed)?;
            let diff = wrapped_difference(&mut g, y, &target, angle_dims)?;
            let loss = mean_square(&mut g, diff);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite {} loss at pretraining epoch {epoch} batch {b}",
                    net.name
                )));
            }
            let grads = g.backward(loss)?;
            let grads: Vec<Array2> =
                bound.nodes().zip(net.tensors()).map(|(n, p)| grads.get_or_zeros(n, p.shape())).collect();
            let mut params: Vec<&mut Array2> = net.tensors_mut().collect();
            optimizer_step(&mut params, &grads, &mut state, learning_rate)?;
            total += value;
            batches += 1;
        }
        losses.push(total / batches as f64);
    }
    Ok(losses)
}

/// Fit each network on its own supervised pairs from the training split:
/// the sensor on `(raw, target)`, the noise model on the sensor's squared
/// residuals, the observation model on `(true state, target)` and the
/// transition on consecutive true states (only the learned dims when known
/// kinematics handle the rest). Returns the summed mean loss per epoch.
pub fn pretrain_networks(
    models: &mut ModelSet,
    train: &[Trajectory],
    config: &TrainConfig,
    angle_dims: &[usize],
    epochs: usize,
    learning_rate: f64,
) -> Result<Vec<f64>> {
    let records: Vec<&TrajectoryRecord> = train.iter().flatten().collect();
    let stochastic = |g: &mut Graph, net: &BoundNetwork, x: NodeId, seed: u64| {
        net.forward(g, x, ForwardMode::Stochastic { seed })
    };
    let mut losses = vec![0.0; epochs];
    let mut add = |part: Vec<f64>| losses.iter_mut().zip(part).for_each(|(l, v)| *l += v);

    let sensor_pairs: Vec<(Vec<f64>, Vec<f64>)> = records
        .iter()
        .filter_map(|r| r.raw_observation.clone().map(|raw| (raw, r.learned_obs_target.clone())))
        .collect();
    add(fit_pairs(&mut models.sensor, &sensor_pairs, config, epochs, learning_rate, 1, &[], &stochastic)?);

    if !sensor_pairs.is_empty() {
        let raw = Array2::from_rows(&sensor_pairs.iter().map(|p| p.0.as_slice()).collect::<Vec<_>>())?;
        let readings = crate::snn::forward(&models.sensor, &raw, ForwardMode::Deterministic)?;
        let noise_pairs: Vec<(Vec<f64>, Vec<f64>)> = sensor_pairs
            .iter()
            .enumerate()
            .map(|(i, (_, target))| {
                let reading = readings.row(i).to_vec();
                let sq = reading.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).collect();
                (reading, sq)
            })
            .collect();
        let variance = |g: &mut Graph, net: &BoundNetwork, x: NodeId, _| noise_diag(net, x, g);
        add(fit_pairs(&mut models.noise, &noise_pairs, config, epochs, learning_rate, 2, &[], &variance)?);
    }

    let state_pairs: Vec<(Vec<f64>, Vec<f64>)> =
        records.iter().map(|r| (r.true_state.clone(), r.learned_obs_target.clone())).collect();
    add(fit_pairs(&mut models.observation, &state_pairs, config, epochs, learning_rate, 3, &[], &stochastic)?);

    let learned = models.hybrid.as_ref().filter(|h| h.enabled).map(|h| h.learned_dims.clone());
    let transition_pairs: Vec<(Vec<f64>, Vec<f64>)> = train
        .iter()
        .flat_map(|tr| tr.windows(2))
        .map(|w| {
            let next = &w[1].true_state;
            let target = match &learned {
                Some(cols) => cols.iter().map(|&c| next[c]).collect(),
                None => next.clone(),
            };
            (w[0].true_state.clone(), target)
        })
        .collect();
    let next_state = |g: &mut Graph, net: &BoundNetwork, x: NodeId, seed: u64| -> Result<NodeId> {
        let y = net.forward(g, x, ForwardMode::Stochastic { seed })?;
        match &learned {
            Some(cols) => {
                let parts = cols.iter().map(|&c| g.slice_cols(y, c, c + 1)).collect::<Result<Vec<_>>>()?;
                g.concat_cols(&parts)
            }
            None => Ok(y),
        }
    };
    let wrap: &[usize] = if learned.is_some() { &[] } else { angle_dims };
    add(fit_pairs(&mut models.transition, &transition_pairs, config, epochs, learning_rate, 4, wrap, &next_state)?);
    Ok(losses)
}

/// Train from fresh models. See [`resume`] for continuing a checkpoint.
pub fn train(config: &TrainConfig, dataset: &Dataset, models: ModelSet) -> Result<TrainOutcome> {
    config.validate()?;
    check_dims(&models, dataset)?;
    let mut models = models;
    models.set_dropout(config.dropout_rate);
    let pretrain_losses = match config.curriculum {
        Curriculum::SensorPretrainThenJoint { pretrain_epochs, pretrain_learning_rate } => pretrain_networks(
            &mut models,
            &dataset.train,
            config,
            &angle_dims(dataset),
            pretrain_epochs,
            pretrain_learning_rate,
        )?,
        Curriculum::Joint => Vec::new(),
    };
    let optimizer = AdamState::new(models.tensors());
    let start = Checkpoint { models, config: config.clone(), optimizer, epoch: 0, val_mse: f64::INFINITY };
    let mut outcome = run_epochs(start, dataset, None)?;
    outcome.pretrain_losses = pretrain_losses;
    Ok(outcome)
}

/// Continue training from `checkpoint` up to `config.epochs`, with the
/// checkpoint's configuration otherwise. Epoch seeds depend only on the
/// master seed and the epoch index, so a resumed run reproduces an
/// uninterrupted one.
pub fn resume(checkpoint: Checkpoint, dataset: &Dataset, best_so_far: Option<Checkpoint>) -> Result<TrainOutcome> {
    checkpoint.config.validate()?;
    check_dims(&checkpoint.models, dataset)?;
    run_epochs(checkpoint, dataset, best_so_far)
}

fn run_epochs(start: Checkpoint, dataset: &Dataset, best_so_far: Option<Checkpoint>) -> Result<TrainOutcome> {
    let config = start.config.clone();
    let angles = angle_dims(dataset);
    let windows = window_starts(&dataset.train, config.window_length);
    if windows.is_empty() {
        return Err(Error::contract(format!(
            "no training trajectory is at least {} steps long",
            config.window_length
        )));
    }
    let val_set: &[Trajectory] = if dataset.val.is_empty() { &dataset.train } else { &dataset.val };
    let val_seed = derive_seed(config.seed, &[2]);
    let mut current = start;
    let mut best = best_so_far;
    let mut log = Vec::new();
    while current.epoch < config.epochs {
        let epoch = current.epoch;
        let clock = Instant::now();
        let mut order = windows.clone();
        order.shuffle(&mut rng_from(config.seed, &[0, epoch as u64]));
        if let Some(n) = config.windows_per_epoch {
            order.truncate(n.max(1));
        }
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let results: Vec<Result<WindowGradient>> = chunk
                .par_iter()
                .enumerate()
                .map(|(k, &(tr, s))| {
                    let window = &dataset.train[tr][s..s + config.window_length];
                    let seed = derive_seed(config.seed, &[0, epoch as u64, b as u64, k as u64]);
                    window_gradient(&current.models, window, &config, &angles, seed)
                })
                .collect();
            let mut sum: Option<Vec<Array2>> = None;
            for r in results {
                let wg = r.map_err(|e| match e {
                    Error::Numeric(m) => Error::numeric(format!("{m} at epoch {epoch} batch {b}")),
                    other => other,
                })?;
                loss_sum += wg.loss;
                match sum.as_mut() {
                    None => sum = Some(wg.grads),
                    Some(acc) => acc.iter_mut().zip(&wg.grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            let grads: Vec<Array2> = sum.unwrap_or_default().iter().map(|g| g.scale(inv)).collect();
            let mut params: Vec<&mut Array2> = current.models.tensors_mut().collect();
            optimizer_step(&mut params, &grads, &mut current.optimizer, config.learning_rate)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::numeric(format!("{m} at epoch {epoch} batch {b}")),
                    other => other,
                })?;
        }
        let train_loss = loss_sum / order.len() as f64;
        let val_mse = evaluate_mse(&current.models, val_set, &angles, config.ensemble_size, config.init_spread, val_seed)?;
        if !val_mse.is_finite() {
            return Err(Error::numeric(format!("non-finite validation error after epoch {epoch}")));
        }
        current.epoch += 1;
        current.val_mse = val_mse;
        let wall_seconds = clock.elapsed().as_secs_f64();
        log::info!("epoch {epoch}: train loss {train_loss:.5}, val mse {val_mse:.5}, {wall_seconds:.1}s");
        log.push(EpochLog { epoch, train_loss, val_mse, wall_seconds });
        if best.as_ref().is_none_or(|b| val_mse < b.val_mse) {
            best = Some(current.clone());
        }
    }
    let best = best.unwrap_or_else(|| current.clone());
    Ok(TrainOutcome { best, last: current, log, pretrain_losses: Vec::new() })
}

/// Training log as CSV with header `epoch,train_loss,val_mse,wall_seconds`.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,val_mse,wall_seconds\n");
    for e in log {
        out += &format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_mse, e.wall_seconds);
    }
    out
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: [usize; 2],
    values: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct NetworkLayout {
    name: String,
    layers: Vec<crate::snn::LayerSpec>,
    residual: bool,
}

#[derive(Serialize, Deserialize)]
struct OptimizerFile {
    step: u64,
    first_moment: Vec<NamedTensor>,
    second_moment: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    dims: ModelDims,
    networks: Vec<NetworkLayout>,
    #[serde(default)]
    hybrid: Option<HybridMotionConfig>,
    parameters: Vec<NamedTensor>,
    config: TrainConfig,
    optimizer: OptimizerFile,
    epoch: usize,
    val_mse: Option<f64>,
}

fn named(names: &[String], arrays: &[Array2]) -> Vec<NamedTensor> {
    names
        .iter()
        .zip(arrays)
        .map(|(n, a)| NamedTensor { name: n.clone(), shape: [a.rows(), a.cols()], values: a.to_nested() })
        .collect()
}

fn unnamed(tensors: Vec<NamedTensor>, names: &[String], shapes: &[(usize, usize)], what: &str) -> Result<Vec<Array2>> {
    if tensors.len() != names.len() {
        return Err(Error::structural(format!("{what}: {} tensors, expected {}", tensors.len(), names.len())));
    }
    let mut out = Vec::with_capacity(tensors.len());
    for ((t, name), &shape) in tensors.into_iter().zip(names).zip(shapes) {
        if &t.name != name {
            return Err(Error::structural(format!("{what}: found {:?} where {name:?} was expected", t.name)));
        }
        if (t.shape[0], t.shape[1]) != shape {
            return Err(Error::structural(format!(
                "{what}: parameter {name} has shape {}x{}, expected {}x{}",
                t.shape[0], t.shape[1], shape.0, shape.1
            )));
        }
        let array = Array2::from_rows(&t.values)
            .ok()
            .filter(|a| a.shape() == shape || (shape.0 * shape.1 == 0 && a.is_empty()))
            .ok_or_else(|| Error::structural(format!("{what}: values of {name} do not match its declared shape")))?;
        out.push(array);
    }
    Ok(out)
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let names = self.models.tensor_names();
        let params: Vec<Array2> = self.models.tensors().cloned().collect();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            dims: self.models.dims,
            networks: self
                .models
                .networks()
                .iter()
                .map(|n| NetworkLayout { name: n.name.clone(), layers: n.layers.clone(), residual: n.residual })
                .collect(),
            hybrid: self.models.hybrid.clone(),
            parameters: named(&names, &params),
            config: self.config.clone(),
            optimizer: OptimizerFile {
                step: self.optimizer.step,
                first_moment: named(&names, &self.optimizer.first_moment),
                second_moment: named(&names, &self.optimizer.second_moment),
            },
            epoch: self.epoch,
            val_mse: self.val_mse.is_finite().then_some(self.val_mse),
        };
        serde_json::to_string(&file).map_err(|e| Error::structural(e.to_string()))
    }

    /// Parse a checkpoint; nothing is returned unless every tensor matches
    /// the declared architecture.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| json_error(&e))?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(CHECKPOINT_FORMAT) => {}
            Some(other) => {
                return Err(Error::structural(format!("checkpoint format {other:?}, expected {CHECKPOINT_FORMAT:?}")))
            }
            None => return Err(Error::structural("checkpoint has no format tag")),
        }
        let file: CheckpointFile = serde_json::from_value(value).map_err(|e| Error::structural(e.to_string()))?;
        if file.networks.len() != 4 {
            return Err(Error::structural(format!("checkpoint has {} networks, expected 4", file.networks.len())));
        }
        let mut nets = Vec::with_capacity(4);
        for layout in file.networks {
            let specs = layout.layers;
            let mut p = crate::snn::init_params(&layout.name, &specs, 0)?;
            p.residual = layout.residual;
            nets.push(p);
        }
        let noise = nets.pop().unwrap();
        let sensor = nets.pop().unwrap();
        let observation = nets.pop().unwrap();
        let transition = nets.pop().unwrap();
        let mut models = ModelSet { transition, observation, sensor, noise, dims: file.dims, hybrid: file.hybrid };
        let names = models.tensor_names();
        let shapes: Vec<(usize, usize)> = models.tensors().map(Array2::shape).collect();
        let params = unnamed(file.parameters, &names, &shapes, "parameters")?;
        let first = unnamed(file.optimizer.first_moment, &names, &shapes, "first moment")?;
        let second = unnamed(file.optimizer.second_moment, &names, &shapes, "second moment")?;
        for (dst, src) in models.tensors_mut().zip(params) {
            *dst = src;
        }
        models.check_shapes()?;
        file.config.validate()?;
        Ok(Self {
            models,
            config: file.config,
            optimizer: AdamState { step: file.optimizer.step, first_moment: first, second_moment: second },
            epoch: file.epoch,
            val_mse: file.val_mse.unwrap_or(f64::INFINITY),
        })
    }

    /// Check that this checkpoint's parameters fit `template` exactly.
    pub fn matches(&self, template: &ModelSet) -> Result<()> {
        let names = template.tensor_names();
        let ours = self.models.tensor_names();
        for (i, (name, t)) in names.iter().zip(template.tensors()).enumerate() {
            match (ours.get(i), self.models.tensors().nth(i)) {
                (Some(n), Some(a)) if n == name && a.shape() == t.shape() => {}
                _ => return Err(Error::structural(format!("checkpoint parameter {name} does not match the model"))),
            }
        }
        if ours.len() != names.len() {
            return Err(Error::structural("checkpoint has a different number of parameters"));
        }
        Ok(())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_json()? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_json(&fs::read_to_string(path)?)
}
