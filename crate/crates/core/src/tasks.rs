//! Synthetic tasks, observation corruption, standardization and dataset
//! files.
//!
//! Three tasks are provided:
//!
//! - `linear_gaussian`: `x' = Ax + w`, raw observation `Hx + v`, target `Hx`
//! - `unicycle_odometry`: state `[x, y, θ, v, θ̇]`; the raw observation is a
//!   frozen random nonlinear embedding of `(v, θ̇)` plus pixel noise, so the
//!   absolute pose is never observed
//! - `planar_arm`: three joint angles plus end-effector position, observed
//!   through a 16×16 rendering of the links
//!
//! Datasets are newline-delimited JSON, one record per line; a trajectory
//! starts wherever `t` returns to 0.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Array2;
use crate::error::{Error, Result};
use crate::models::{unicycle_step, wrap_angle};
use crate::oracles::LinearSystemParams;
use crate::rng::{derive_seed, rng_from, Rng};

/// Format tag of the dataset sidecar file.
pub const DATASET_FORMAT: &str = "denkf-dataset-v1";

/// One timestep of one trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub t: usize,
    #[serde(rename = "state")]
    pub true_state: Vec<f64>,
    #[serde(rename = "observation")]
    pub raw_observation: Option<Vec<f64>>,
    #[serde(rename = "target")]
    pub learned_obs_target: Vec<f64>,
}

pub type Trajectory = Vec<TrajectoryRecord>;

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Frozen two-layer embedding `tanh(z·W + b)·P` of normalized `(v, θ̇)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    /// `2 × hidden`
    pub weights: Array2,
    pub bias: Vec<f64>,
    /// `hidden × raw`; each row is a smooth spatial pattern.
    pub patterns: Array2,
}

/// Half-width of the moving average that smooths each pattern.
const PATTERN_RADIUS: isize = 8;

impl Embedding {
    pub fn random(hidden: usize, raw: usize, seed: u64) -> Result<Self> {
        if hidden == 0 || raw == 0 {
            return Err(Error::structural("embedding sizes must be positive"));
        }
        let mut rng = rng_from(seed, &[0]);
        let weights = Array2::from_vec(2, hidden, (0..2 * hidden).map(|_| normal(&mut rng)).collect())?;
        let bias = (0..hidden).map(|_| 0.5 * normal(&mut rng)).collect();
        let mut patterns = Array2::zeros(hidden, raw);
        for h in 0..hidden {
            let noise: Vec<f64> = (0..raw).map(|_| normal(&mut rng)).collect();
            let row = patterns.row_mut(h);
            for (r, out) in row.iter_mut().enumerate() {
                let lo = (r as isize - PATTERN_RADIUS).max(0) as usize;
                let hi = ((r as isize + PATTERN_RADIUS) as usize).min(raw - 1);
                *out = noise[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
            }
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / raw as f64).sqrt();
            row.iter_mut().for_each(|v| *v /= rms);
        }
        Ok(Self { input_mean: vec![1.0, 0.0], input_scale: vec![0.3, 0.3], weights, bias, patterns })
    }

    pub fn raw_dim(&self) -> usize {
        self.patterns.cols()
    }

    pub fn embed(&self, speed: f64, turn_rate: f64) -> Vec<f64> {
        let z = [(speed - self.input_mean[0]) / self.input_scale[0], (turn_rate - self.input_mean[1]) / self.input_scale[1]];
        let hidden: Vec<f64> = (0..self.weights.cols())
            .map(|h| (z[0] * self.weights[(0, h)] + z[1] * self.weights[(1, h)] + self.bias[h]).tanh())
            .collect();
        Array2::row_vector(&hidden).matmul(&self.patterns).into_vec()
    }

    fn validate(&self) -> Result<()> {
        let h = self.weights.cols();
        if self.weights.rows() != 2 || self.bias.len() != h || self.patterns.rows() != h {
            return Err(Error::structural("embedding shapes are inconsistent"));
        }
        if self.input_mean.len() != 2 || self.input_scale.len() != 2 || self.input_scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::structural("embedding input normalization needs two positive scales"));
        }
        Ok(())
    }
}

/// Unicycle driven by mean-reverting speed and turn rate with smooth
/// (autocorrelated) random accelerations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnicycleParams {
    pub speed_mean: f64,
    pub speed_reversion: f64,
    pub turn_reversion: f64,
    pub accel_sigma: f64,
    pub turn_accel_sigma: f64,
    pub accel_correlation: f64,
    pub initial_speed_range: [f64; 2],
    pub initial_turn_sigma: f64,
    /// Fixed start `[x, y, θ, v, θ̇]`; random heading and velocities when absent.
    #[serde(default)]
    pub initial_state: Option<Vec<f64>>,
    pub pixel_noise: f64,
    pub embedding: Embedding,
}

impl UnicycleParams {
    pub fn new(seed: u64) -> Result<Self> {
        Ok(Self {
            speed_mean: 1.0,
            speed_reversion: 0.5,
            turn_reversion: 0.5,
            accel_sigma: 0.15,
            turn_accel_sigma: 0.15,
            accel_correlation: 0.9,
            initial_speed_range: [0.5, 1.5],
            initial_turn_sigma: 0.3,
            initial_state: None,
            pixel_noise: 6.0,
            embedding: Embedding::random(16, 64, seed)?,
        })
    }
}

/// Planar three-link arm rendered as a square image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmParams {
    pub link_lengths: [f64; 3],
    pub joint_limits: [[f64; 2]; 3],
    pub velocity_sigma: f64,
    pub velocity_correlation: f64,
    pub image_size: usize,
    /// Half-width of the rendered square in world units.
    pub extent: f64,
    pub link_half_width: f64,
    pub pixel_noise: f64,
}

impl Default for ArmParams {
    fn default() -> Self {
        Self {
            link_lengths: [0.4, 0.35, 0.25],
            joint_limits: [[-2.5, 2.5]; 3],
            velocity_sigma: 1.0,
            velocity_correlation: 0.9,
            image_size: 16,
            extent: 1.05,
            link_half_width: 0.05,
            pixel_noise: 0.05,
        }
    }
}

impl ArmParams {
    /// Joint positions from the base outwards, including the end effector.
    pub fn joints(&self, angles: &[f64]) -> [[f64; 2]; 4] {
        let mut pts = [[0.0; 2]; 4];
        let mut heading = 0.0;
        for k in 0..3 {
            heading += angles[k];
            pts[k + 1] = [
                pts[k][0] + self.link_lengths[k] * heading.cos(),
                pts[k][1] + self.link_lengths[k] * heading.sin(),
            ];
        }
        pts
    }

    /// Anti-aliased link mask, row-major, values in `[0, 1]`.
    pub fn render(&self, angles: &[f64]) -> Vec<f64> {
        let pts = self.joints(angles);
        let n = self.image_size;
        let pixel = 2.0 * self.extent / n as f64;
        let mut img = Vec::with_capacity(n * n);
        for row in 0..n {
            for col in 0..n {
                let p = [-self.extent + (col as f64 + 0.5) * pixel, self.extent - (row as f64 + 0.5) * pixel];
                let d = (0..3).map(|k| segment_distance(p, pts[k], pts[k + 1])).fold(f64::INFINITY, f64::min);
                img.push((1.0 - (d - self.link_half_width) / pixel).clamp(0.0, 1.0));
            }
        }
        img
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let s = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let q = [a[0] + s * ab[0] - p[0], a[1] + s * ab[1] - p[1]];
    (q[0] * q[0] + q[1] * q[1]).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    LinearGaussian { system: LinearSystemParams },
    UnicycleOdometry { params: UnicycleParams },
    PlanarArm { params: ArmParams },
}

/// Task definition: dynamics, observation model and sequence length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(flatten)]
    pub kind: TaskKind,
    pub dt: f64,
    pub horizon: usize,
}

/// Names accepted by [`TaskSpec::preset`].
pub const TASK_NAMES: [&str; 3] = ["linear_gaussian", "unicycle_odometry", "planar_arm"];

impl TaskSpec {
    /// Default instance of a task by name.
    pub fn preset(name: &str, horizon: usize, seed: u64) -> Result<Self> {
        let (kind, dt) = match name {
            "linear_gaussian" => (TaskKind::LinearGaussian { system: LinearSystemParams::reference() }, 1.0),
            "unicycle_odometry" => (TaskKind::UnicycleOdometry { params: UnicycleParams::new(seed)? }, 0.1),
            "planar_arm" => (TaskKind::PlanarArm { params: ArmParams::default() }, 0.05),
            other => {
                return Err(Error::structural(format!(
                    "unknown task kind {other:?}; expected one of {}",
                    TASK_NAMES.join(", ")
                )))
            }
        };
        let spec = Self { kind, dt, horizon };
        spec.validate()?;
        Ok(spec)
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            TaskKind::LinearGaussian { .. } => "linear_gaussian",
            TaskKind::UnicycleOdometry { .. } => "unicycle_odometry",
            TaskKind::PlanarArm { .. } => "planar_arm",
        }
    }

    pub fn state_dim(&self) -> usize {
        match &self.kind {
            TaskKind::LinearGaussian { system } => system.state_dim(),
            TaskKind::UnicycleOdometry { .. } | TaskKind::PlanarArm { .. } => 5,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match &self.kind {
            TaskKind::LinearGaussian { system } => system.obs_dim(),
            TaskKind::UnicycleOdometry { .. } => 2,
            TaskKind::PlanarArm { .. } => 5,
        }
    }

    pub fn raw_dim(&self) -> usize {
        match &self.kind {
            TaskKind::LinearGaussian { system } => system.obs_dim(),
            TaskKind::UnicycleOdometry { params } => params.embedding.raw_dim(),
            TaskKind::PlanarArm { params } => params.image_size * params.image_size,
        }
    }

    /// State dimensions holding wrapped angles.
    pub fn angle_dims(&self) -> Vec<usize> {
        match self.kind {
            TaskKind::UnicycleOdometry { .. } => vec![2],
            _ => Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(Error::contract(format!("horizon must be at least 2, got {}", self.horizon)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::contract("dt must be positive"));
        }
        match &self.kind {
            TaskKind::LinearGaussian { system } => system.validate(),
            TaskKind::UnicycleOdometry { params } => {
                params.embedding.validate()?;
                if let Some(s) = &params.initial_state {
                    if s.len() != 5 {
                        return Err(Error::structural("unicycle initial state needs 5 entries"));
                    }
                }
                Ok(())
            }
            TaskKind::PlanarArm { params } => {
                if params.image_size == 0 || params.joint_limits.iter().any(|[lo, hi]| lo > hi) {
                    return Err(Error::structural("invalid planar arm parameters"));
                }
                Ok(())
            }
        }
    }
}

/// Simulate one trajectory of `spec.horizon` steps.
pub fn simulate(spec: &TaskSpec, seed: u64) -> Result<Trajectory> {
    spec.validate()?;
    let mut rng = rng_from(seed, &[]);
    match &spec.kind {
        TaskKind::LinearGaussian { system } => simulate_linear(system, spec.horizon, &mut rng),
        TaskKind::UnicycleOdometry { params } => Ok(simulate_unicycle(params, spec.dt, spec.horizon, &mut rng)),
        TaskKind::PlanarArm { params } => Ok(simulate_arm(params, spec.dt, spec.horizon, &mut rng)),
    }
}

fn gaussian(chol: &Array2, rng: &mut Rng) -> Array2 {
    let z: Vec<f64> = (0..chol.rows()).map(|_| normal(rng)).collect();
    Array2::row_vector(&z).matmul_t(chol)
}

fn simulate_linear(sys: &LinearSystemParams, horizon: usize, rng: &mut Rng) -> Result<Trajectory> {
    let lq = sys.q.cholesky()?;
    let lr = sys.rn.cholesky()?;
    let lp = sys.p0.cholesky()?;
    let at = sys.a.transpose();
    let ht = sys.h.transpose();
    let mut x = Array2::row_vector(&sys.x0).add(&gaussian(&lp, rng));
    let mut out = Vec::with_capacity(horizon);
    for t in 0..horizon {
        if t > 0 {
            x = x.matmul(&at).add(&gaussian(&lq, rng));
        }
        let target = x.matmul(&ht);
        let raw = target.add(&gaussian(&lr, rng));
        out.push(TrajectoryRecord {
            t,
            true_state: x.as_slice().to_vec(),
            raw_observation: Some(raw.into_vec()),
            learned_obs_target: target.into_vec(),
        });
    }
    Ok(out)
}

fn simulate_unicycle(p: &UnicycleParams, dt: f64, horizon: usize, rng: &mut Rng) -> Trajectory {
    let [mut x, mut y, mut th, mut v, mut w] = match &p.initial_state {
        Some(s) => [s[0], s[1], s[2], s[3], s[4]],
        None => [
            0.0,
            0.0,
            rng.random_range(-PI..PI),
            rng.random_range(p.initial_speed_range[0]..=p.initial_speed_range[1]),
            p.initial_turn_sigma * normal(rng),
        ],
    };
    let rho = p.accel_correlation;
    let innovation = (1.0 - rho * rho).sqrt();
    let (mut accel, mut turn_accel) = (0.0, 0.0);
    let mut out = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let raw = p.embedding.embed(v, w).into_iter().map(|r| r + p.pixel_noise * normal(rng)).collect();
        out.push(TrajectoryRecord {
            t,
            true_state: vec![x, y, th, v, w],
            raw_observation: Some(raw),
            learned_obs_target: vec![v, w],
        });
        [x, y, th] = unicycle_step([x, y, th], v, w, dt);
        accel = rho * accel + p.accel_sigma * innovation * normal(rng);
        turn_accel = rho * turn_accel + p.turn_accel_sigma * innovation * normal(rng);
        v += dt * (p.speed_reversion * (p.speed_mean - v) + accel);
        w += dt * (-p.turn_reversion * w + turn_accel);
    }
    out
}

fn simulate_arm(p: &ArmParams, dt: f64, horizon: usize, rng: &mut Rng) -> Trajectory {
    let mut q: Vec<f64> = p.joint_limits.iter().map(|[lo, hi]| rng.random_range(*lo..=*hi) * 0.8).collect();
    let mut qd = [0.0; 3];
    let rho = p.velocity_correlation;
    let innovation = (1.0 - rho * rho).sqrt();
    let mut out = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let ee = p.joints(&q)[3];
        let state = vec![q[0], q[1], q[2], ee[0], ee[1]];
        let raw = p.render(&q).into_iter().map(|v| v + p.pixel_noise * normal(rng)).collect();
        out.push(TrajectoryRecord { t, true_state: state.clone(), raw_observation: Some(raw), learned_obs_target: state });
        for k in 0..3 {
            qd[k] = rho * qd[k] + p.velocity_sigma * innovation * normal(rng);
            let [lo, hi] = p.joint_limits[k];
            q[k] = (q[k] + qd[k] * dt).clamp(lo, hi);
        }
    }
    out
}

/// `count` trajectories, trajectory `i` seeded from `(seed, i)`.
pub fn simulate_many(spec: &TaskSpec, count: usize, seed: u64) -> Result<Vec<Trajectory>> {
    (0..count).map(|i| simulate(spec, derive_seed(seed, &[i as u64]))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    None,
    Spike,
    Blur,
    Missing,
}

/// Test-time damage applied to raw observations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub mode: CorruptionMode,
    pub spike_fraction: f64,
    pub blur_kernel: usize,
    pub missing_probability: f64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl CorruptionSpec {
    pub fn none() -> Self {
        Self { mode: CorruptionMode::None, spike_fraction: 0.0, blur_kernel: 1, missing_probability: 0.0 }
    }

    pub fn spike(fraction: f64) -> Self {
        Self { mode: CorruptionMode::Spike, spike_fraction: fraction, ..Self::none() }
    }

    pub fn blur(width: usize) -> Self {
        Self { mode: CorruptionMode::Blur, blur_kernel: width, ..Self::none() }
    }

    pub fn missing(probability: f64) -> Self {
        Self { mode: CorruptionMode::Missing, missing_probability: probability, ..Self::none() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("spike fraction", self.spike_fraction), ("missing probability", self.missing_probability)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::contract(format!("{name} {p} outside [0, 1]")));
            }
        }
        if self.blur_kernel == 0 {
            return Err(Error::contract("blur width must be at least 1"));
        }
        Ok(())
    }
}

impl fmt::Display for CorruptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            CorruptionMode::None => write!(f, "none"),
            CorruptionMode::Spike => write!(f, "spike:{}", self.spike_fraction),
            CorruptionMode::Blur => write!(f, "blur:{}", self.blur_kernel),
            CorruptionMode::Missing => write!(f, "missing:{}", self.missing_probability),
        }
    }
}

/// Parses `none`, `spike:F`, `blur:W` or `missing:P`.
impl FromStr for CorruptionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (mode, arg) = match s.split_once(':') {
            Some((m, a)) => (m.trim(), Some(a.trim())),
            None => (s, None),
        };
        let bad = || Error::contract(format!("invalid corruption {s:?}; expected none, spike:F, blur:W or missing:P"));
        let real = |a: Option<&str>| -> Result<f64> {
            let v: f64 = a.ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(bad())
            }
        };
        let spec = match mode {
            "none" if arg.is_none() => Self::none(),
            "spike" => Self::spike(real(arg)?),
            "blur" => Self::blur(arg.ok_or_else(bad)?.parse().map_err(|_| bad())?),
            "missing" => Self::missing(real(arg)?),
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Damage raw observations of `records`; record `i` draws from `(seed, i)`.
/// States and targets are never touched.
pub fn corrupt(records: &[TrajectoryRecord], spec: &CorruptionSpec, seed: u64) -> Result<Vec<TrajectoryRecord>> {
    spec.validate()?;
    let mut out = records.to_vec();
    for (i, rec) in out.iter_mut().enumerate() {
        let Some(raw) = rec.raw_observation.as_mut() else { continue };
        let mut rng = rng_from(seed, &[i as u64]);
        match spec.mode {
            CorruptionMode::None => {}
            CorruptionMode::Missing => {
                if rng.random::<f64>() < spec.missing_probability {
                    rec.raw_observation = None;
                }
            }
            CorruptionMode::Spike => {
                let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for v in raw.iter_mut() {
                    if rng.random::<f64>() < spec.spike_fraction {
                        *v = if rng.random::<bool>() { hi } else { lo };
                    }
                }
            }
            CorruptionMode::Blur => *raw = moving_average(raw, spec.blur_kernel),
        }
    }
    Ok(out)
}

/// Corrupt every trajectory, trajectory `i` seeded from `(seed, i)`.
pub fn corrupt_all(trajectories: &[Trajectory], spec: &CorruptionSpec, seed: u64) -> Result<Vec<Trajectory>> {
    trajectories.iter().enumerate().map(|(i, tr)| corrupt(tr, spec, derive_seed(seed, &[i as u64]))).collect()
}

/// Centered moving average; windows are truncated at the edges.
pub fn moving_average(values: &[f64], width: usize) -> Vec<f64> {
    let n = values.len();
    let left = (width - 1) / 2;
    let right = width - 1 - left;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(left);
            let hi = (i + right).min(n - 1);
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Per-dimension affine standardization of states, targets and raw
/// observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub state_mean: Vec<f64>,
    pub state_dev: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_dev: Vec<f64>,
    pub raw_mean: Vec<f64>,
    pub raw_dev: Vec<f64>,
}

fn mean_dev(rows: impl Iterator<Item = Vec<f64>>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0usize;
    let mut mean = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    for row in rows {
        n += 1;
        for d in 0..dim {
            let delta = row[d] - mean[d];
            mean[d] += delta / n as f64;
            m2[d] += delta * (row[d] - mean[d]);
        }
    }
    let dev = m2
        .iter()
        .map(|m| {
            let sd = if n > 0 { (m / n as f64).sqrt() } else { 0.0 };
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, dev)
}

impl Standardization {
    pub fn identity(state: usize, target: usize, raw: usize) -> Self {
        Self {
            state_mean: vec![0.0; state],
            state_dev: vec![1.0; state],
            target_mean: vec![0.0; target],
            target_dev: vec![1.0; target],
            raw_mean: vec![0.0; raw],
            raw_dev: vec![1.0; raw],
        }
    }

    /// Statistics over every record of `trajectories`. Angle dims keep mean
    /// 0 and deviation 1; constant dims get deviation 1.
    pub fn fit(trajectories: &[Trajectory], angle_dims: &[usize]) -> Result<Self> {
        let first = trajectories
            .iter()
            .flat_map(|t| t.first())
            .next()
            .ok_or_else(|| Error::contract("cannot fit statistics on an empty dataset"))?;
        let (s, o) = (first.true_state.len(), first.learned_obs_target.len());
        let r = trajectories
            .iter()
            .flatten()
            .find_map(|rec| rec.raw_observation.as_ref().map(Vec::len))
            .unwrap_or(0);
        let records = || trajectories.iter().flatten();
        let (mut state_mean, mut state_dev) = mean_dev(records().map(|rec| rec.true_state.clone()), s);
        for &d in angle_dims {
            state_mean[d] = 0.0;
            state_dev[d] = 1.0;
        }
        let (target_mean, target_dev) = mean_dev(records().map(|rec| rec.learned_obs_target.clone()), o);
        let (raw_mean, raw_dev) = mean_dev(records().filter_map(|rec| rec.raw_observation.clone()), r);
        let stats = Self { state_mean, state_dev, target_mean, target_dev, raw_mean, raw_dev };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, mean, dev) in [
            ("state", &self.state_mean, &self.state_dev),
            ("target", &self.target_mean, &self.target_dev),
            ("raw", &self.raw_mean, &self.raw_dev),
        ] {
            if mean.len() != dev.len() {
                return Err(Error::structural(format!("{name} statistics have mismatched lengths")));
            }
            if let Some(d) = dev.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::contract(format!("{name} deviation at dim {d} must be positive")));
            }
        }
        Ok(())
    }

    pub fn standardize_record(&self, rec: &TrajectoryRecord) -> Result<TrajectoryRecord> {
        let apply = |v: &[f64], mean: &[f64], dev: &[f64], what: &str| -> Result<Vec<f64>> {
            if v.len() != mean.len() {
                return Err(Error::structural(format!("{what} has {} dims, statistics have {}", v.len(), mean.len())));
            }
            Ok(v.iter().zip(mean).zip(dev).map(|((x, m), d)| (x - m) / d).collect())
        };
        Ok(TrajectoryRecord {
            t: rec.t,
            true_state: apply(&rec.true_state, &self.state_mean, &self.state_dev, "state")?,
            raw_observation: rec
                .raw_observation
                .as_ref()
                .map(|r| apply(r, &self.raw_mean, &self.raw_dev, "observation"))
                .transpose()?,
            learned_obs_target: apply(&rec.learned_obs_target, &self.target_mean, &self.target_dev, "target")?,
        })
    }

    /// Physical state from a standardized one.
    pub fn destandardize_state(&self, state: &[f64]) -> Vec<f64> {
        state.iter().zip(&self.state_mean).zip(&self.state_dev).map(|((x, m), d)| x * d + m).collect()
    }

    pub fn standardize_state(&self, state: &[f64]) -> Vec<f64> {
        state.iter().zip(&self.state_mean).zip(&self.state_dev).map(|((x, m), d)| (x - m) / d).collect()
    }

    pub fn destandardize_target(&self, target: &[f64]) -> Vec<f64> {
        target.iter().zip(&self.target_mean).zip(&self.target_dev).map(|((x, m), d)| x * d + m).collect()
    }
}

pub fn standardize(records: &[TrajectoryRecord], stats: &Standardization) -> Result<Vec<TrajectoryRecord>> {
    stats.validate()?;
    records.iter().map(|r| stats.standardize_record(r)).collect()
}

/// Rows of standardized states (`T×S`) back to physical units.
pub fn destandardize(states: &Array2, stats: &Standardization) -> Result<Array2> {
    stats.validate()?;
    if states.cols() != stats.state_mean.len() {
        return Err(Error::structural(format!(
            "states have {} dims, statistics have {}",
            states.cols(),
            stats.state_mean.len()
        )));
    }
    Ok(states.mul_row(&Array2::row_vector(&stats.state_dev)).add_row(&Array2::row_vector(&stats.state_mean)))
}

/// Wrapped per-dim difference `a - b`.
pub fn state_difference(a: &[f64], b: &[f64], angle_dims: &[usize]) -> Vec<f64> {
    let mut d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    for &k in angle_dims {
        d[k] = wrap_angle(d[k]);
    }
    d
}

/// Group records into trajectories; a new one starts wherever `t == 0`.
pub fn split_trajectories(records: Vec<TrajectoryRecord>) -> Vec<Trajectory> {
    let mut out: Vec<Trajectory> = Vec::new();
    for rec in records {
        match out.last_mut() {
            Some(cur) if rec.t != 0 => cur.push(rec),
            _ => out.push(vec![rec]),
        }
    }
    out
}

/// Deterministic 80/20 split of `count` trajectory indices.
pub fn train_test_split(count: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut rng_from(seed, &[]));
    let n_train = (count * 4).div_ceil(5);
    let test = idx.split_off(n_train);
    (idx, test)
}

/// Standardized trajectories split into train / validation / test.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub stats: Standardization,
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
}

impl Dataset {
    /// Simulate `count` trajectories, split 80/20 by trajectory, carve
    /// `val_fraction` of the training part out for validation, fit
    /// statistics on the remaining training trajectories and standardize
    /// everything with them.
    pub fn generate(spec: &TaskSpec, count: usize, val_fraction: f64, seed: u64) -> Result<Self> {
        if count < 2 {
            return Err(Error::contract("need at least 2 trajectories to split"));
        }
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::contract(format!("validation fraction {val_fraction} outside [0, 1)")));
        }
        let all = simulate_many(spec, count, derive_seed(seed, &[0]))?;
        let (train_idx, test_idx) = train_test_split(count, derive_seed(seed, &[1]));
        let n_val = ((train_idx.len() as f64) * val_fraction).round() as usize;
        let n_val = n_val.min(train_idx.len().saturating_sub(1));
        let (val_idx, fit_idx) = train_idx.split_at(n_val);
        let pick = |ids: &[usize]| -> Vec<Trajectory> { ids.iter().map(|&i| all[i].clone()).collect() };
        let train_raw = pick(fit_idx);
        let stats = Standardization::fit(&train_raw, &spec.angle_dims())?;
        let std_all = |trs: Vec<Trajectory>| -> Result<Vec<Trajectory>> {
            trs.iter().map(|tr| standardize(tr, &stats)).collect()
        };
        Ok(Self {
            train: std_all(train_raw)?,
            val: std_all(pick(val_idx))?,
            test: std_all(pick(&test_idx))?,
            spec: spec.clone(),
            stats,
        })
    }

    pub fn sidecar(&self) -> DatasetSidecar {
        DatasetSidecar {
            format: DATASET_FORMAT.to_string(),
            spec: self.spec.clone(),
            stats: self.stats.clone(),
            counts: SplitCounts { train: self.train.len(), val: self.val.len(), test: self.test.len() },
        }
    }

    /// Writes `train.ndjson`, `val.ndjson`, `test.ndjson` and `dataset.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, split) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            let flat: Vec<TrajectoryRecord> = split.iter().flatten().cloned().collect();
            write_dataset(&flat, &dir.join(format!("{name}.ndjson")))?;
        }
        self.sidecar().write(&dir.join("dataset.json"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let side = DatasetSidecar::read(&dir.join("dataset.json"))?;
        let load = |name: &str| -> Result<Vec<Trajectory>> {
            Ok(split_trajectories(read_dataset(&dir.join(format!("{name}.ndjson")))?))
        };
        let ds = Self { spec: side.spec, stats: side.stats, train: load("train")?, val: load("val")?, test: load("test")? };
        let counts = [(ds.train.len(), side.counts.train), (ds.val.len(), side.counts.val), (ds.test.len(), side.counts.test)];
        if counts.iter().any(|(a, b)| a != b) {
            return Err(Error::structural("dataset files do not match the sidecar split counts"));
        }
        Ok(ds)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Task definition, statistics and split sizes stored next to the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub format: String,
    pub spec: TaskSpec,
    pub stats: Standardization,
    pub counts: SplitCounts,
}

impl DatasetSidecar {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| json_error(&e))?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(DATASET_FORMAT) => {}
            Some(other) => {
                return Err(Error::structural(format!("dataset format {other:?}, expected {DATASET_FORMAT:?}")))
            }
            None => return Err(Error::structural("dataset sidecar has no format tag")),
        }
        let side: Self = serde_json::from_value(value).map_err(|e| Error::structural(e.to_string()))?;
        side.spec.validate()?;
        side.stats.validate()?;
        let dims = [side.spec.state_dim(), side.spec.obs_dim(), side.spec.raw_dim()];
        let stat_dims = [side.stats.state_mean.len(), side.stats.target_mean.len(), side.stats.raw_mean.len()];
        if dims != stat_dims {
            return Err(Error::structural("sidecar statistics do not match the task dimensions"));
        }
        Ok(side)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::structural(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

pub(crate) fn json_error(e: &serde_json::Error) -> Error {
    Error::Parse { line: e.line(), message: e.to_string() }
}

/// Parse one dataset line.
pub fn parse_record(line: &str) -> Result<TrajectoryRecord> {
    serde_json::from_str(line).map_err(|e| Error::Parse { line: 1, message: e.to_string() })
}

/// Parse a whole dataset text; blank lines are skipped. Every record must
/// share the dimensions of the first one.
pub fn parse_dataset(text: &str) -> Result<Vec<TrajectoryRecord>> {
    parse_lines(text.lines().map(|l| Ok(l.to_string())))
}

fn parse_lines(lines: impl Iterator<Item = std::io::Result<String>>) -> Result<Vec<TrajectoryRecord>> {
    let mut out: Vec<TrajectoryRecord> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let number = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: number, message: e.to_string() })?;
        if let Some(first) = out.first() {
            let obs_len = |r: &TrajectoryRecord| r.raw_observation.as_ref().map(Vec::len);
            let raw_mismatch = match (obs_len(first), obs_len(&rec)) {
                (Some(a), Some(b)) => a != b,
                _ => false,
            };
            if rec.true_state.len() != first.true_state.len()
                || rec.learned_obs_target.len() != first.learned_obs_target.len()
                || raw_mismatch
            {
                return Err(Error::Parse { line: number, message: "record dimensions differ from line 1".into() });
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_dataset(records: &[TrajectoryRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut w, rec).map_err(|e| Error::structural(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    parse_lines(BufReader::new(fs::File::open(path)?).lines())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unicycle_spec(horizon: usize) -> TaskSpec {
        TaskSpec::preset("unicycle_odometry", horizon, 7).unwrap()
    }

    #[test]
    fn unknown_kind_is_structural() {
        assert!(matches!(TaskSpec::preset("kitti", 10, 0), Err(Error::Structural(_))));
        let json = r#"{"kind":"quadrotor","dt":0.1,"horizon":5}"#;
        assert!(serde_json::from_str::<TaskSpec>(json).is_err());
    }

    #[test]
    fn horizon_below_two_rejected() {
        let mut spec = unicycle_spec(10);
        spec.horizon = 1;
        assert!(matches!(simulate(&spec, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn linear_identity_without_noise_is_constant() {
        let sys = LinearSystemParams {
            a: Array2::identity(2),
            h: Array2::identity(2),
            q: Array2::zeros(2, 2),
            rn: Array2::zeros(2, 2),
            x0: vec![0.5, -1.5],
            p0: Array2::zeros(2, 2),
        };
        let spec = TaskSpec { kind: TaskKind::LinearGaussian { system: sys }, dt: 1.0, horizon: 20 };
        let tr = simulate(&spec, 3).unwrap();
        assert_eq!(tr.len(), 20);
        for rec in &tr {
            assert_eq!(rec.true_state, vec![0.5, -1.5]);
            assert_eq!(rec.raw_observation.as_deref(), Some(&[0.5, -1.5][..]));
            assert_eq!(rec.learned_obs_target, vec![0.5, -1.5]);
        }
    }

    #[test]
    fn unicycle_zero_acceleration_is_straight_line() {
        let mut spec = unicycle_spec(30);
        if let TaskKind::UnicycleOdometry { params } = &mut spec.kind {
            params.accel_sigma = 0.0;
            params.turn_accel_sigma = 0.0;
            params.initial_state = Some(vec![2.0, -1.0, 0.0, 1.0, 0.0]);
        }
        let tr = simulate(&spec, 1).unwrap();
        for rec in &tr {
            let expected = 2.0 + rec.t as f64 * spec.dt;
            assert!((rec.true_state[0] - expected).abs() < 1e-12, "t={}", rec.t);
            assert_eq!(rec.true_state[1], -1.0);
            assert_eq!(rec.true_state[2], 0.0);
            assert_eq!(rec.learned_obs_target, vec![1.0, 0.0]);
        }
    }

    #[test]
    fn unicycle_kinematic_consistency() {
        let spec = unicycle_spec(60);
        let tr = simulate(&spec, 11).unwrap();
        for w in tr.windows(2) {
            let (a, b) = (&w[0].true_state, &w[1].true_state);
            let step = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            assert!((step - a[3].abs() * spec.dt).abs() < 1e-12);
            assert!(b[2] > -PI && b[2] <= PI);
        }
        assert_eq!(tr[0].raw_observation.as_ref().unwrap().len(), 64);
    }

    #[test]
    fn arm_respects_limits_and_shapes() {
        let spec = TaskSpec::preset("planar_arm", 200, 0).unwrap();
        let TaskKind::PlanarArm { params } = &spec.kind else { unreachable!() };
        for seed in 0..5 {
            for rec in simulate(&spec, seed).unwrap() {
                for k in 0..3 {
                    let [lo, hi] = params.joint_limits[k];
                    assert!(rec.true_state[k] >= lo && rec.true_state[k] <= hi);
                }
                let ee = params.joints(&rec.true_state[..3])[3];
                assert_eq!([rec.true_state[3], rec.true_state[4]], ee);
                assert_eq!(rec.raw_observation.as_ref().unwrap().len(), 256);
                assert_eq!(rec.learned_obs_target, rec.true_state);
            }
        }
    }

    #[test]
    fn arm_render_marks_the_links() {
        let p = ArmParams::default();
        let img = p.render(&[0.0, 0.0, 0.0]);
        let n = p.image_size;
        // the arm lies along +x from the centre: row n/2-1 and n/2 straddle y=0
        let lit: f64 = (n / 2..n).map(|c| img[(n / 2) * n + c] + img[(n / 2 - 1) * n + c]).sum();
        assert!(lit > 4.0);
        assert_eq!(img[0], 0.0);
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn simulation_is_deterministic() {
        for name in TASK_NAMES {
            let spec = TaskSpec::preset(name, 12, 5).unwrap();
            assert_eq!(simulate(&spec, 9).unwrap(), simulate(&spec, 9).unwrap());
            assert_ne!(simulate(&spec, 9).unwrap(), simulate(&spec, 10).unwrap());
        }
    }

    #[test]
    fn corruption_spec_parsing() {
        assert_eq!("missing:0.3".parse::<CorruptionSpec>().unwrap(), CorruptionSpec::missing(0.3));
        assert_eq!("spike:0.1".parse::<CorruptionSpec>().unwrap(), CorruptionSpec::spike(0.1));
        assert_eq!("blur:5".parse::<CorruptionSpec>().unwrap(), CorruptionSpec::blur(5));
        assert_eq!("none".parse::<CorruptionSpec>().unwrap(), CorruptionSpec::none());
        for bad in ["missing:1.5", "spike:-0.1", "blur:0", "blur:2.5", "fog:1", "missing", "spike:nan", ""] {
            assert!(bad.parse::<CorruptionSpec>().is_err(), "{bad}");
        }
        for s in ["missing:0.3", "spike:0.1", "blur:5", "none"] {
            assert_eq!(s.parse::<CorruptionSpec>().unwrap().to_string(), s);
        }
    }

    fn long_trajectory() -> Trajectory {
        let spec = unicycle_spec(2000);
        let mut recs = simulate(&spec, 2).unwrap();
        recs.extend(simulate(&spec, 3).unwrap().into_iter().map(|mut r| {
            r.t += 2000;
            r
        }));
        recs.extend(simulate(&spec, 4).unwrap().into_iter().map(|mut r| {
            r.t += 4000;
            r
        }));
        recs.extend(simulate(&spec, 5).unwrap().into_iter().map(|mut r| {
            r.t += 6000;
            r
        }));
        recs.extend(simulate(&spec, 6).unwrap().into_iter().map(|mut r| {
            r.t += 8000;
            r
        }));
        recs
    }

    #[test]
    fn missing_zero_is_identity() {
        let recs = simulate(&unicycle_spec(50), 1).unwrap();
        assert_eq!(corrupt(&recs, &CorruptionSpec::missing(0.0), 4).unwrap(), recs);
        assert_eq!(corrupt(&recs, &CorruptionSpec::none(), 4).unwrap(), recs);
    }

    #[test]
    fn missing_rate_within_three_sigma() {
        let recs = long_trajectory();
        assert_eq!(recs.len(), 10_000);
        let out = corrupt(&recs, &CorruptionSpec::missing(0.3), 8).unwrap();
        let dropped = out.iter().filter(|r| r.raw_observation.is_none()).count() as f64 / 1e4;
        assert!((0.28..=0.32).contains(&dropped), "{dropped}");
    }

    #[test]
    fn full_spike_hits_extremes() {
        let recs = simulate(&unicycle_spec(20), 1).unwrap();
        let out = corrupt(&recs, &CorruptionSpec::spike(1.0), 4).unwrap();
        for (a, b) in recs.iter().zip(&out) {
            let raw = a.raw_observation.as_ref().unwrap();
            let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(b.raw_observation.as_ref().unwrap().iter().all(|v| *v == lo || *v == hi));
        }
    }

    #[test]
    fn blur_is_a_moving_average() {
        assert_eq!(moving_average(&[0.0, 0.0, 5.0, 0.0, 0.0], 5), vec![5.0 / 3.0, 1.25, 1.0, 1.25, 5.0 / 3.0]);
        assert_eq!(moving_average(&[1.0, 2.0, 3.0], 1), vec![1.0, 2.0, 3.0]);
        let recs = simulate(&unicycle_spec(5), 1).unwrap();
        let out = corrupt(&recs, &CorruptionSpec::blur(3), 0).unwrap();
        let raw = recs[2].raw_observation.as_ref().unwrap();
        let blurred = out[2].raw_observation.as_ref().unwrap();
        assert!((blurred[10] - (raw[9] + raw[10] + raw[11]) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn standardization_identity_and_errors() {
        let recs = simulate(&unicycle_spec(10), 1).unwrap();
        let id = Standardization::identity(5, 2, 64);
        assert_eq!(standardize(&recs, &id).unwrap(), recs);
        let mut bad = id.clone();
        bad.state_dev[1] = 0.0;
        assert!(matches!(standardize(&recs, &bad), Err(Error::Contract(_))));
        assert!(matches!(destandardize(&Array2::zeros(1, 5), &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn fitted_training_split_is_standard() {
        let ds = Dataset::generate(&unicycle_spec(30), 40, 0.125, 3).unwrap();
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (28, 4, 8));
        let n = ds.train.iter().map(Vec::len).sum::<usize>() as f64;
        for d in [0, 1, 3, 4] {
            let vals: Vec<f64> = ds.train.iter().flatten().map(|r| r.true_state[d]).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let dev = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-9, "dim {d} mean {mean}");
            assert!((dev - 1.0).abs() < 1e-9, "dim {d} dev {dev}");
        }
        assert_eq!(ds.stats.state_mean[2], 0.0);
        assert_eq!(ds.stats.state_dev[2], 1.0);
        for d in 0..64 {
            let vals: Vec<f64> = ds.train.iter().flatten().map(|r| r.raw_observation.as_ref().unwrap()[d]).collect();
            assert!((vals.iter().sum::<f64>() / n).abs() < 1e-9);
        }
    }

    #[test]
    fn split_is_eighty_twenty() {
        let (train, test) = train_test_split(100, 1);
        assert_eq!((train.len(), test.len()), (80, 20));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn dataset_file_roundtrip_with_missing_observation() {
        let mut recs: Vec<TrajectoryRecord> = simulate(&unicycle_spec(50), 1).unwrap();
        recs.extend(simulate(&unicycle_spec(50), 2).unwrap());
        recs[3].raw_observation = None;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ndjson");
        write_dataset(&recs, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, recs);
        assert!(back[3].raw_observation.is_none());
        assert_eq!(split_trajectories(back).len(), 2);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(3).unwrap().contains("\"observation\":null"));
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ndjson");
        fs::write(&path, "").unwrap();
        assert!(read_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let good = r#"{"t":0,"state":[1.0],"observation":null,"target":[1.0]}"#;
        let text = format!("{good}\n{good}\n{{\"t\":2,\"state\":\n");
        match parse_dataset(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let wrong_dim = format!("{good}\n{}", r#"{"t":1,"state":[1.0,2.0],"observation":null,"target":[1.0]}"#);
        assert!(matches!(parse_dataset(&wrong_dim), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn dataset_directory_roundtrip() {
        let ds = Dataset::generate(&unicycle_spec(12), 10, 0.25, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
        let text = fs::read_to_string(dir.path().join("dataset.json")).unwrap();
        assert!(text.contains(DATASET_FORMAT));
        let tampered = text.replace(DATASET_FORMAT, "denkf-dataset-v0");
        assert!(matches!(DatasetSidecar::from_json(&tampered), Err(Error::Structural(_))));
    }

    fn arb_record(dim: usize, raw: usize) -> impl Strategy<Value = TrajectoryRecord> {
        (
            0usize..1000,
            prop::collection::vec(-1e6f64..1e6, dim),
            prop::option::of(prop::collection::vec(-1e3f64..1e3, raw)),
            prop::collection::vec(-1e6f64..1e6, 2),
        )
            .prop_map(|(t, true_state, raw_observation, learned_obs_target)| TrajectoryRecord {
                t,
                true_state,
                raw_observation,
                learned_obs_target,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ndjson_roundtrip(recs in prop::collection::vec(arb_record(3, 4), 0..100)) {
            let mut text = String::new();
            for r in &recs {
                text += &serde_json::to_string(r).unwrap();
                text.push('\n');
            }
            prop_assert_eq!(parse_dataset(&text).unwrap(), recs);
        }

        #[test]
        fn standardize_roundtrip(
            states in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 1..20),
            mean in prop::collection::vec(-10f64..10.0, 3),
            dev in prop::collection::vec(0.1f64..10.0, 3),
        ) {
            let stats = Standardization {
                state_mean: mean, state_dev: dev,
                target_mean: vec![0.0; 2], target_dev: vec![1.0; 2],
                raw_mean: vec![0.0; 4], raw_dev: vec![1.0; 4],
            };
            let recs: Vec<TrajectoryRecord> = states.iter().enumerate().map(|(t, s)| TrajectoryRecord {
                t, true_state: s.clone(), raw_observation: None, learned_obs_target: vec![0.0, 0.0],
            }).collect();
            let std = standardize(&recs, &stats).unwrap();
            let rows: Vec<Vec<f64>> = std.iter().map(|r| r.true_state.clone()).collect();
            let back = destandardize(&Array2::from_rows(&rows).unwrap(), &stats).unwrap();
            let orig = Array2::from_rows(&states).unwrap();
            prop_assert!(back.max_abs_diff(&orig) < 1e-12);
        }

        #[test]
        fn corruption_preserves_ground_truth(seed in 0u64..1000, which in 0usize..4, p in 0.0f64..1.0) {
            let recs = simulate(&unicycle_spec(8), seed).unwrap();
            let spec = match which {
                0 => CorruptionSpec::none(),
                1 => CorruptionSpec::spike(p),
                2 => CorruptionSpec::blur(1 + (p * 9.0) as usize),
                _ => CorruptionSpec::missing(p),
            };
            let out = corrupt(&recs, &spec, seed).unwrap();
            for (a, b) in recs.iter().zip(&out) {
                prop_assert_eq!(&a.true_state, &b.true_state);
                prop_assert_eq!(&a.learned_obs_target, &b.learned_obs_target);
                prop_assert_eq!(a.t, b.t);
            }
        }
    }
}
