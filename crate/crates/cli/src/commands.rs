//! Subcommand bodies. Each writes its outputs under `config.out`.

use std::fs;
use std::path::Path;

use denkf::autodiff::Array2;
use denkf::filter::{init_ensemble, Ensemble};
use denkf::metrics::{self, median, odometry_errors, OdometryErrorReport};
use denkf::models::ModelSet;
use denkf::oracles::{analytic_enkf_step, dead_reckoning, kalman_filter_exact, sensor_kinematics_rollout};
use denkf::rng::derive_seed;
use denkf::tasks::{corrupt_all, Dataset, TaskKind, Trajectory};
use denkf::training::{self, load_checkpoint, log_csv, models_for_dataset, run_filter, save_checkpoint};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chart::{line_chart, Series};
use crate::{CliError, RunConfig};

/// Tag of evaluation reports.
pub const REPORT_SCHEMA: &str = "denkf-eval-v1";

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

/// Load `config.dataset`, or simulate one and save it under `out/dataset`.
fn dataset(config: &RunConfig) -> Result<Dataset, CliError> {
    if let Some(dir) = &config.dataset {
        return Dataset::load(dir).map_err(|e| CliError::Data(format!("dataset {}: {e}", dir.display())));
    }
    let spec = config.task_spec()?;
    let ds = Dataset::generate(&spec, config.task.trajectories, config.task.val_fraction, config.seed)?;
    ds.save(&config.out.join("dataset"))?;
    Ok(ds)
}

fn require_checkpoint(config: &RunConfig) -> Result<&Path, CliError> {
    config.checkpoint.as_deref().ok_or_else(|| CliError::Config("this command needs --checkpoint".into()))
}

fn checkpoint_models(config: &RunConfig, ds: &Dataset) -> Result<ModelSet, CliError> {
    let path = require_checkpoint(config)?;
    let ckpt = load_checkpoint(path).map_err(|e| CliError::Data(format!("checkpoint {}: {e}", path.display())))?;
    let expected = (ds.spec.state_dim(), ds.spec.obs_dim(), ds.spec.raw_dim());
    let dims = ckpt.models.dims;
    if (dims.state, dims.obs, dims.raw) != expected {
        return Err(CliError::Data(format!(
            "checkpoint dims {:?} do not fit the dataset (state, obs, raw) = {expected:?}",
            dims
        )));
    }
    Ok(ckpt.models)
}

fn eval_seed(config: &RunConfig, k: usize) -> u64 {
    derive_seed(config.seed, &[10, k as u64])
}

fn corrupted(config: &RunConfig, split: &[Trajectory], split_id: u64, k: usize) -> Result<Vec<Trajectory>, CliError> {
    let spec = config.corruption_spec()?;
    Ok(corrupt_all(split, &spec, derive_seed(config.seed, &[20, split_id, k as u64]))?)
}

/// Posterior means for every trajectory and the mean step time.
fn filter_all(
    models: &ModelSet,
    trajectories: &[Trajectory],
    ensemble_size: usize,
    spread: f64,
    seed: u64,
) -> Result<(Vec<Vec<Vec<f64>>>, f64), CliError> {
    let runs: Vec<training::FilterRun> = trajectories
        .par_iter()
        .enumerate()
        .map(|(i, tr)| run_filter(models, tr, ensemble_size, spread, derive_seed(seed, &[i as u64])))
        .collect::<Result<_, _>>()?;
    let secs = runs.iter().map(|r| r.step_seconds).sum::<f64>() / runs.len().max(1) as f64;
    Ok((runs.into_iter().map(|r| r.means).collect(), secs))
}

/// Stack estimates and truth from step 1 on.
fn stacked(estimates: &[Vec<Vec<f64>>], trajectories: &[Trajectory]) -> Result<(Array2, Array2), CliError> {
    let mut est = Vec::new();
    let mut truth = Vec::new();
    for (e, tr) in estimates.iter().zip(trajectories) {
        for (row, rec) in e.iter().zip(tr).skip(1) {
            est.push(row.clone());
            truth.push(rec.true_state.clone());
        }
    }
    if est.is_empty() {
        return Err(CliError::Data("no steps to evaluate".into()));
    }
    Ok((Array2::from_rows(&est)?, Array2::from_rows(&truth)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
}

fn summarize(estimates: &[Vec<Vec<f64>>], trajectories: &[Trajectory], angle_dims: &[usize]) -> Result<ErrorSummary, CliError> {
    let (est, truth) = stacked(estimates, trajectories)?;
    let rmse = metrics::rmse(&est, &truth, angle_dims)?;
    Ok(ErrorSummary { mse: rmse * rmse, rmse, mae: metrics::mae(&est, &truth, angle_dims)? })
}

fn median_summary(runs: &[ErrorSummary]) -> ErrorSummary {
    let pick = |f: fn(&ErrorSummary) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
    ErrorSummary { mse: pick(|s| s.mse), rmse: pick(|s| s.rmse), mae: pick(|s| s.mae) }
}

pub fn generate(config: &RunConfig) -> Result<(), CliError> {
    let spec = config.task_spec()?;
    let ds = Dataset::generate(&spec, config.task.trajectories, config.task.val_fraction, config.seed)?;
    ds.save(&config.out)?;
    println!(
        "{}: {} train, {} val, {} test trajectories written to {}",
        spec.name(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        config.out.display()
    );
    Ok(())
}

pub fn train(config: &RunConfig) -> Result<(), CliError> {
    let ds = dataset(config)?;
    let outcome = match &config.checkpoint {
        Some(path) => {
            let mut ckpt = load_checkpoint(path)?;
            ckpt.config.epochs = config.train.epochs;
            training::resume(ckpt, &ds, None)?
        }
        None => {
            let models = models_for_dataset(&ds, config.train.dropout_rate, config.seed)?;
            training::train(&config.train, &ds, models)?
        }
    };
    let out = &config.out;
    fs::create_dir_all(out)?;
    save_checkpoint(&outcome.best, &out.join("checkpoint.json"))?;
    save_checkpoint(&outcome.last, &out.join("last.json"))?;
    write_text(&out.join("train_log.csv"), &log_csv(&outcome.log))?;
    let curve = |f: fn(&training::EpochLog) -> f64| outcome.log.iter().map(|e| (e.epoch as f64, f(e))).collect();
    let svg = line_chart(
        "training",
        "epoch",
        "loss / validation MSE",
        &[Series { name: "train loss", points: curve(|e| e.train_loss) }, Series { name: "val MSE", points: curve(|e| e.val_mse) }],
    );
    write_text(&out.join("train_log.svg"), &svg)?;
    println!(
        "trained {} epochs; best validation MSE {:.6} after epoch {}",
        outcome.last.epoch,
        outcome.best.val_mse,
        outcome.best.epoch
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub trajectories: usize,
    /// Medians over evaluation seeds.
    #[serde(flatten)]
    pub median: ErrorSummary,
    pub per_seed: Vec<ErrorSummary>,
}

/// Contents of `evaluate.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema: String,
    pub task: String,
    pub corruption: String,
    pub ensemble_size: usize,
    pub eval_seeds: usize,
    /// Errors are in standardized state units.
    pub units: String,
    pub train: SplitReport,
    pub test: SplitReport,
    /// Mean wall time of one filter step on the test split, first seed.
    pub step_seconds: f64,
    /// Relative pose errors on the test split (odometry task only).
    pub odometry: Option<OdometryErrorReport>,
}

fn odometry_report(ds: &Dataset, estimates: &[Vec<Vec<f64>>], lengths: &[usize]) -> Result<OdometryErrorReport, CliError> {
    let poses = |states: &mut dyn Iterator<Item = &Vec<f64>>| -> Vec<[f64; 3]> {
        states
            .map(|s| {
                let p = ds.stats.destandardize_state(s);
                [p[0], p[1], p[2]]
            })
            .collect()
    };
    let reports = estimates
        .iter()
        .zip(&ds.test)
        .map(|(est, tr)| {
            let e = poses(&mut est.iter());
            let t = poses(&mut tr.iter().map(|r| &r.true_state));
            odometry_errors(&e, &t, lengths)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(OdometryErrorReport::combine(&reports))
}

pub fn evaluate(config: &RunConfig) -> Result<(), CliError> {
    require_checkpoint(config)?;
    let ds = dataset(config)?;
    let models = checkpoint_models(config, &ds)?;
    let angles = ds.spec.angle_dims();
    let e = config.eval_ensemble_size();
    let spread = config.train.init_spread;
    let mut splits = Vec::new();
    let mut step_seconds = 0.0;
    let mut odometry = None;
    for (id, split) in [(0u64, &ds.train), (1, &ds.test)] {
        let mut per_seed = Vec::new();
        for k in 0..config.eval_seeds {
            let data = corrupted(config, split, id, k)?;
            let (means, secs) = filter_all(&models, &data, e, spread, eval_seed(config, k))?;
            per_seed.push(summarize(&means, &data, &angles)?);
            if id == 1 && k == 0 {
                step_seconds = secs;
                if matches!(ds.spec.kind, TaskKind::UnicycleOdometry { .. }) {
                    odometry = Some(odometry_report(&ds, &means, &config.odometry_lengths)?);
                }
            }
        }
        splits.push(SplitReport { trajectories: split.len(), median: median_summary(&per_seed), per_seed });
    }
    let test = splits.pop().expect("two splits");
    let train = splits.pop().expect("two splits");
    let report = EvaluationReport {
        schema: REPORT_SCHEMA.into(),
        task: ds.spec.name().into(),
        corruption: config.corruption_spec()?.to_string(),
        ensemble_size: e,
        eval_seeds: config.eval_seeds,
        units: "standardized".into(),
        train,
        test,
        step_seconds,
        odometry,
    };
    write_text(&config.out.join("evaluate.json"), &to_json(&report))?;
    println!(
        "test MSE {:.6} (train {:.6}), RMSE {:.6}, MAE {:.6}, {:.3} ms per step",
        report.test.median.mse,
        report.train.median.mse,
        report.test.median.rmse,
        report.test.median.mae,
        report.step_seconds * 1e3
    );
    Ok(())
}

/// Estimates of one baseline for every test trajectory.
fn baseline_estimates(
    config: &RunConfig,
    ds: &Dataset,
    models: Option<&ModelSet>,
    method: &str,
    data: &[Trajectory],
    seed: u64,
) -> Result<Vec<Vec<Vec<f64>>>, CliError> {
    let spread = config.train.init_spread;
    let e = config.eval_ensemble_size();
    let stats = &ds.stats;
    data.iter()
        .enumerate()
        .map(|(i, tr)| -> Result<Vec<Vec<f64>>, CliError> {
            let first = stats.destandardize_state(&tr[0].true_state);
            let seed = derive_seed(seed, &[i as u64]);
            match (method, &ds.spec.kind) {
                ("dead_reckoning", _) => Ok(dead_reckoning(&ds.spec, &first, tr.len() - 1)?
                    .iter()
                    .map(|s| stats.standardize_state(s))
                    .collect()),
                ("sensor_only", _) => {
                    let models = models.expect("sensor baseline needs models");
                    Ok(sensor_kinematics_rollout(models, stats, ds.spec.dt, tr, e, seed)?)
                }
                ("kalman", TaskKind::LinearGaussian { system }) | ("enkf", TaskKind::LinearGaussian { system }) => {
                    let observations: Vec<Option<Vec<f64>>> = tr
                        .iter()
                        .skip(1)
                        .map(|r| {
                            r.raw_observation.as_ref().map(|raw| {
                                raw.iter().zip(&stats.raw_mean).zip(&stats.raw_dev).map(|((v, m), d)| v * d + m).collect()
                            })
                        })
                        .collect();
                    let dev: Vec<f64> = stats.state_dev.iter().map(|d| spread * d).collect();
                    let mut out = vec![tr[0].true_state.clone()];
                    if method == "kalman" {
                        let mut params = system.clone();
                        params.x0 = first.clone();
                        params.p0 = Array2::diag_from(&Array2::row_vector(&dev.iter().map(|d| d * d).collect::<Vec<_>>()));
                        let kf = kalman_filter_exact(&params, &observations)?;
                        out.extend(kf.means.iter().map(|m| stats.standardize_state(m)));
                    } else {
                        let mut ens: Ensemble = init_ensemble(&first, &dev, e, derive_seed(seed, &[u64::MAX]))?;
                        for (t, y) in observations.iter().enumerate() {
                            ens = analytic_enkf_step(system, &ens, y.as_deref(), denkf::filter::step_seed(seed, t + 1))?;
                            out.push(stats.standardize_state(&ens.mean()));
                        }
                    }
                    Ok(out)
                }
                (other, _) => Err(CliError::Config(format!("baseline {other} does not apply to {}", ds.spec.name()))),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    #[serde(flatten)]
    pub errors: ErrorSummary,
}

pub fn comparison(config: &RunConfig) -> Result<Vec<MethodRow>, CliError> {
    let ds = dataset(config)?;
    let models = match &config.checkpoint {
        Some(_) => Some(checkpoint_models(config, &ds)?),
        None => None,
    };
    let angles = ds.spec.angle_dims();
    let mut methods: Vec<&str> = Vec::new();
    if models.is_some() {
        methods.push("denkf");
    }
    match ds.spec.kind {
        TaskKind::LinearGaussian { .. } => methods.extend(["kalman", "enkf", "dead_reckoning"]),
        TaskKind::UnicycleOdometry { .. } if models.is_some() => methods.extend(["dead_reckoning", "sensor_only"]),
        _ => methods.push("dead_reckoning"),
    }
    let mut rows = Vec::new();
    for method in methods {
        let mut per_seed = Vec::new();
        for k in 0..config.eval_seeds {
            let data = corrupted(config, &ds.test, 1, k)?;
            let seed = eval_seed(config, k);
            let estimates = if method == "denkf" {
                let m = models.as_ref().expect("checked above");
                filter_all(m, &data, config.eval_ensemble_size(), config.train.init_spread, seed)?.0
            } else {
                baseline_estimates(config, &ds, models.as_ref(), method, &data, seed)?
            };
            per_seed.push(summarize(&estimates, &data, &angles)?);
        }
        rows.push(MethodRow { method: method.into(), errors: median_summary(&per_seed) });
    }
    Ok(rows)
}

pub fn compare(config: &RunConfig) -> Result<(), CliError> {
    let rows = comparison(config)?;
    let mut csv = String::from("method,mse,rmse,mae\n");
    for r in &rows {
        csv += &format!("{},{},{},{}\n", r.method, r.errors.mse, r.errors.rmse, r.errors.mae);
        println!("{:<16} mse {:.6}  rmse {:.6}  mae {:.6}", r.method, r.errors.mse, r.errors.rmse, r.errors.mae);
    }
    write_text(&config.out.join("compare.csv"), &csv)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub ensemble_size: usize,
    /// Medians over evaluation seeds.
    pub mae: f64,
    pub step_seconds: f64,
}

pub fn ablation(config: &RunConfig) -> Result<Vec<AblationPoint>, CliError> {
    require_checkpoint(config)?;
    let ds = dataset(config)?;
    let models = checkpoint_models(config, &ds)?;
    let angles = ds.spec.angle_dims();
    config
        .ablation_sizes
        .iter()
        .map(|&e| {
            let mut maes = Vec::new();
            let mut secs = Vec::new();
            for k in 0..config.eval_seeds {
                let data = corrupted(config, &ds.test, 1, k)?;
                let (means, s) = filter_all(&models, &data, e, config.train.init_spread, eval_seed(config, k))?;
                maes.push(summarize(&means, &data, &angles)?.mae);
                secs.push(s);
            }
            log::info!("E = {e}: MAE {:.6}", median(&maes));
            Ok(AblationPoint { ensemble_size: e, mae: median(&maes), step_seconds: median(&secs) })
        })
        .collect()
}

pub fn ablate_ensemble(config: &RunConfig) -> Result<(), CliError> {
    let points = ablation(config)?;
    let mut csv = String::from("ensemble_size,mae,step_seconds\n");
    for p in &points {
        csv += &format!("{},{},{}\n", p.ensemble_size, p.mae, p.step_seconds);
        println!("E {:>5}  mae {:.6}  {:.3} ms per step", p.ensemble_size, p.mae, p.step_seconds * 1e3);
    }
    write_text(&config.out.join("ablation.csv"), &csv)?;
    let xy = |f: fn(&AblationPoint) -> f64| points.iter().map(|p| (p.ensemble_size as f64, f(p))).collect();
    let mae = line_chart("error vs ensemble size", "ensemble size", "MAE", &[Series { name: "MAE", points: xy(|p| p.mae) }]);
    write_text(&config.out.join("ablation_mae.svg"), &mae)?;
    let time = line_chart(
        "step time vs ensemble size",
        "ensemble size",
        "seconds per step",
        &[Series { name: "step time", points: xy(|p| p.step_seconds) }],
    );
    write_text(&config.out.join("ablation_time.svg"), &time)
}
