//! Reference estimators: the exact Kalman filter, an ensemble Kalman filter
//! with known linear models, and rollouts without measurement updates.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array2, Graph};
use crate::error::{Error, Result};
use crate::filter::{self, Ensemble, INITIAL_JITTER, JITTER_RETRIES, MIN_INNOVATION_DIAGONAL};
use crate::models::{unicycle_step, ModelSet};
use crate::rng::rng_from;
use crate::tasks::{Standardization, TaskKind, TaskSpec, Trajectory};

/// `x' = Ax + q`, `y = Hx + r` with `q ~ N(0, Q)`, `r ~ N(0, Rn)` and
/// `x₀ ~ N(x0, P0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSystemParams {
    pub a: Array2,
    pub h: Array2,
    pub q: Array2,
    pub rn: Array2,
    pub x0: Vec<f64>,
    pub p0: Array2,
}

fn is_symmetric(m: &Array2) -> bool {
    m.max_abs_diff(&m.transpose()) <= 1e-12 * m.max_abs().max(1.0)
}

impl LinearSystemParams {
    /// Damped rotation observed through its first coordinate.
    pub fn reference() -> Self {
        Self {
            a: Array2::from_rows(&[[0.9, 0.2], [-0.2, 0.9]]).unwrap(),
            h: Array2::from_rows(&[[1.0, 0.0]]).unwrap(),
            q: Array2::identity(2).scale(0.05),
            rn: Array2::from_rows(&[[0.1]]).unwrap(),
            x0: vec![1.0, 0.0],
            p0: Array2::identity(2),
        }
    }

    /// Scalar random walk `A = H = Q = Rn = P0 = 1`.
    pub fn scalar_random_walk() -> Self {
        let one = Array2::scalar(1.0);
        Self { a: one.clone(), h: one.clone(), q: one.clone(), rn: one.clone(), x0: vec![0.0], p0: one }
    }

    pub fn state_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.rows()
    }

    /// Shapes, symmetry and semidefiniteness of `Q`, `Rn` and `P0`.
    pub fn validate(&self) -> Result<()> {
        let (s, o) = (self.state_dim(), self.obs_dim());
        let shapes = [
            ("A", self.a.shape(), (s, s)),
            ("H", self.h.shape(), (o, s)),
            ("Q", self.q.shape(), (s, s)),
            ("Rn", self.rn.shape(), (o, o)),
            ("P0", self.p0.shape(), (s, s)),
        ];
        for (name, got, want) in shapes {
            if got != want || s == 0 || o == 0 {
                return Err(Error::structural(format!("{name} is {}x{}, expected {}x{}", got.0, got.1, want.0, want.1)));
            }
        }
        if self.x0.len() != s {
            return Err(Error::structural(format!("x0 has {} entries, expected {s}", self.x0.len())));
        }
        for (name, m) in [("Q", &self.q), ("Rn", &self.rn), ("P0", &self.p0)] {
            if !is_symmetric(m) {
                return Err(Error::contract(format!("{name} is not symmetric")));
            }
            m.cholesky().map_err(|_| Error::contract(format!("{name} is not positive semidefinite")))?;
        }
        Ok(())
    }

    /// [`Self::validate`] plus a positive definite `Rn`, as filtering needs.
    pub fn validate_for_filtering(&self) -> Result<()> {
        self.validate()?;
        self.rn.inverse().map_err(|_| Error::contract("Rn is not positive definite"))?;
        Ok(())
    }
}

/// Posterior means and covariances, one per processed observation.
#[derive(Clone, Debug, PartialEq)]
pub struct KalmanEstimates {
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Array2>,
}

/// Exact Kalman filter. Starting from `(x0, P0)`, each entry of
/// `observations` is preceded by one prediction; `None` skips the update.
pub fn kalman_filter_exact(params: &LinearSystemParams, observations: &[Option<Vec<f64>>]) -> Result<KalmanEstimates> {
    params.validate_for_filtering()?;
    let at = params.a.transpose();
    let ht = params.h.transpose();
    let mut mean = Array2::column_vector(&params.x0);
    let mut cov = params.p0.clone();
    let mut out = KalmanEstimates { means: Vec::new(), covariances: Vec::new() };
    for obs in observations {
        mean = params.a.matmul(&mean);
        cov = params.a.matmul(&cov).matmul(&at).add(&params.q).symmetrize();
        if let Some(y) = obs {
            if y.len() != params.obs_dim() {
                return Err(Error::structural(format!("observation has {} entries, expected {}", y.len(), params.obs_dim())));
            }
            let s = params.h.matmul(&cov).matmul(&ht).add(&params.rn).symmetrize();
            let s_inv = s.inverse().map_err(|e| Error::numeric(format!("innovation covariance: {e}")))?;
            let gain = cov.matmul(&ht).matmul(&s_inv);
            let innovation = Array2::column_vector(y).sub(&params.h.matmul(&mean));
            mean = mean.add(&gain.matmul(&innovation));
            let ikh = Array2::identity(params.state_dim()).sub(&gain.matmul(&params.h));
            cov = ikh.matmul(&cov).symmetrize();
        }
        out.means.push(mean.as_slice().to_vec());
        out.covariances.push(cov.clone());
    }
    Ok(out)
}

fn gaussian_rows(chol: &Array2, rows: usize, seed: u64) -> Array2 {
    let n = chol.rows();
    let mut z = Array2::zeros(rows, n);
    for r in 0..rows {
        let mut rng = rng_from(seed, &[r as u64]);
        for v in z.row_mut(r) {
            *v = StandardNormal.sample(&mut rng);
        }
    }
    z.matmul_t(chol)
}

/// `xⁱ ← Axⁱ + qⁱ`; member `i` draws its noise from `(seed, i)`.
pub fn enkf_propagate(params: &LinearSystemParams, members: &Array2, seed: u64) -> Result<Array2> {
    let prior = members.matmul(&params.a.transpose());
    if params.q.max_abs() == 0.0 {
        return Ok(prior);
    }
    Ok(prior.add(&gaussian_rows(&params.q.cholesky()?, members.rows(), seed)))
}

/// `size` perturbed observations `y + rⁱ`, `rⁱ ~ N(0, Rn)`.
pub fn perturb_observation(rn: &Array2, observation: &[f64], size: usize, seed: u64) -> Result<Array2> {
    if observation.len() != rn.rows() {
        return Err(Error::structural("observation length does not match Rn"));
    }
    Ok(gaussian_rows(&rn.cholesky()?, size, seed).add_row(&Array2::row_vector(observation)))
}

/// Jittered inverse with the same policy as the differentiable filter.
pub fn invert_with_jitter(s: &Array2) -> Result<(Array2, f64)> {
    let tiny = s.diagonal().iter().any(|d| *d < MIN_INNOVATION_DIAGONAL);
    if !tiny {
        if let Ok(inv) = s.inverse() {
            return Ok((inv, 0.0));
        }
    }
    let mut jitter = INITIAL_JITTER;
    for _ in 0..=JITTER_RETRIES {
        if let Ok(inv) = s.add(&Array2::identity(s.rows()).scale(jitter)).inverse() {
            return Ok((inv, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::numeric(format!("innovation covariance singular after jitter {:e}", jitter / 10.0)))
}

/// Result of [`analytic_enkf_update`].
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticUpdate {
    pub posterior: Array2,
    pub gain: Array2,
    pub innovation_cov: Array2,
    pub jitter: f64,
}

/// Perturbed-observation update with known `H` and `Rn`, using the same
/// sequence of floating-point operations as [`filter::kalman_update`].
pub fn analytic_enkf_update(h: &Array2, rn: &Array2, prior: &Array2, perturbed: &Array2) -> Result<AnalyticUpdate> {
    let (e, s) = prior.shape();
    let o = h.rows();
    if e < 2 {
        return Err(Error::contract("ensemble needs at least 2 members"));
    }
    if h.cols() != s || rn.shape() != (o, o) || perturbed.shape() != (e, o) {
        return Err(Error::structural("analytic update shapes are inconsistent"));
    }
    let scale = 1.0 / (e - 1) as f64;
    let predicted = prior.matmul(&h.transpose());
    let centered = predicted.sub_row(&predicted.mean_rows());

    let cov = centered.transpose().matmul(&centered).scale(scale);
    let s_raw = cov.add(rn);
    let innovation_cov = s_raw.add(&s_raw.transpose()).scale(0.5);

    let anomalies = prior.sub_row(&prior.mean_rows());
    let cross = anomalies.transpose().matmul(&centered).scale(scale);
    let (s_inv, jitter) = invert_with_jitter(&innovation_cov)?;
    let gain = cross.matmul(&s_inv);
    let innovation = perturbed.sub(&predicted);
    let posterior = prior.add(&innovation.matmul(&gain.transpose()));
    Ok(AnalyticUpdate { posterior, gain, innovation_cov, jitter })
}

/// One stochastic EnKF step with known models. Prediction noise uses the
/// step's prediction seed and observation perturbations its sensor seed,
/// as in [`filter::filter_step`].
pub fn analytic_enkf_step(
    params: &LinearSystemParams,
    ensemble: &Ensemble,
    observation: Option<&[f64]>,
    seed: u64,
) -> Result<Ensemble> {
    params.validate_for_filtering()?;
    if ensemble.dim() != params.state_dim() {
        return Err(Error::structural("ensemble dimension does not match the system"));
    }
    let prior = enkf_propagate(params, ensemble.members(), filter::predict_seed(seed))?;
    let Some(y) = observation else {
        return Ensemble::new(prior);
    };
    let perturbed = perturb_observation(&params.rn, y, ensemble.size(), filter::sensor_seed(seed))?;
    Ensemble::new(analytic_enkf_update(&params.h, &params.rn, &prior, &perturbed)?.posterior)
}

/// Rollout without measurement updates in physical units: the unicycle
/// keeps its initial speed and turn rate, the linear system follows its
/// mean dynamics, and the arm (which has no velocity state) stays put.
/// Returns `horizon + 1` states starting with `initial_state`.
pub fn dead_reckoning(spec: &TaskSpec, initial_state: &[f64], horizon: usize) -> Result<Vec<Vec<f64>>> {
    if initial_state.len() != spec.state_dim() {
        return Err(Error::structural(format!(
            "initial state has {} entries, task state has {}",
            initial_state.len(),
            spec.state_dim()
        )));
    }
    let mut out = vec![initial_state.to_vec()];
    for _ in 0..horizon {
        let cur = out.last().unwrap();
        let next = match &spec.kind {
            TaskKind::LinearGaussian { system } => system.a.matmul(&Array2::column_vector(cur)).into_vec(),
            TaskKind::UnicycleOdometry { .. } => {
                let [x, y, th] = unicycle_step([cur[0], cur[1], cur[2]], cur[3], cur[4], spec.dt);
                vec![x, y, th, cur[3], cur[4]]
            }
            TaskKind::PlanarArm { .. } => cur.clone(),
        };
        out.push(next);
    }
    Ok(out)
}

/// Prediction-only filter rollout with learned models from a standardized
/// initial state; returns `horizon + 1` ensemble means.
pub fn model_rollout(
    models: &ModelSet,
    initial_state: &[f64],
    spread: f64,
    horizon: usize,
    ensemble_size: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut ens = filter::init_ensemble(initial_state, &vec![spread; initial_state.len()], ensemble_size, seed)?;
    let mut out = vec![ens.mean()];
    for t in 1..=horizon {
        let mut g = Graph::new();
        let bound = models.bind(&mut g, false);
        let node = ens.enter(&mut g);
        let step = filter::filter_step(&bound, node, None, filter::step_seed(seed, t), &mut g)?;
        ens = step.posterior.to_ensemble(&g)?;
        out.push(ens.mean());
    }
    Ok(out)
}

/// Unicycle baseline: the learned sensor's mean reading of `(v, θ̇)` is
/// integrated with the known kinematics from the true initial state. Steps
/// without an observation keep the last reading. Input and output states
/// are standardized.
pub fn sensor_kinematics_rollout(
    models: &ModelSet,
    stats: &Standardization,
    dt: f64,
    trajectory: &Trajectory,
    samples: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let first = trajectory.first().ok_or_else(|| Error::contract("empty trajectory"))?;
    if first.true_state.len() != 5 || models.dims.obs != 2 {
        return Err(Error::structural("sensor kinematics baseline needs the unicycle layout"));
    }
    let phys0 = stats.destandardize_state(&first.true_state);
    let mut pose = [phys0[0], phys0[1], phys0[2]];
    let (mut v, mut w) = (phys0[3], phys0[4]);
    let mut out = vec![first.true_state.clone()];
    for (t, rec) in trajectory.iter().enumerate().skip(1) {
        pose = unicycle_step(pose, v, w, dt);
        if let Some(raw) = &rec.raw_observation {
            let mut g = Graph::new();
            let sensor = models.sensor.bind(&mut g, false);
            let (_, mean) = filter::sample_sensor(&sensor, raw, samples, filter::sensor_seed(filter::step_seed(seed, t)), &mut g)?;
            let reading = stats.destandardize_target(g.value(mean).as_slice());
            (v, w) = (reading[0], reading[1]);
        }
        out.push(stats.standardize_state(&[pose[0], pose[1], pose[2], v, w]));
    }
    Ok(out)
}
