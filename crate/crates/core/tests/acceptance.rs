//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use denkf::autodiff::{check_gradients, Array2, Graph};
use denkf::filter::{filter_step, init_ensemble, step_seed, Ensemble};
use denkf::metrics::{loglog_slope, mae, median};
use denkf::models::{instantiate_models, ModelDims, ModelSet};
use denkf::oracles::{
    analytic_enkf_step, analytic_enkf_update, dead_reckoning, enkf_propagate, kalman_filter_exact, sensor_kinematics_rollout,
    LinearSystemParams,
};
use denkf::rng::derive_seed;
use denkf::snn::{init_params, Activation, BoundNetwork, LayerSpec, NetworkParams};
use denkf::tasks::{corrupt_all, simulate, CorruptionSpec, Dataset, TaskKind, TaskSpec, Trajectory};
use denkf::training::{evaluate_mse, models_for_dataset, run_filter, sequence_mse, train, Curriculum, TrainConfig};

type Outcome = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fmt_list(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

// ---------------------------------------------------------------- linear

fn linear_convergence() -> Outcome {
    let params = LinearSystemParams::reference();
    let spec = TaskSpec { kind: TaskKind::LinearGaussian { system: params.clone() }, dt: 1.0, horizon: 101 };
    let sizes = [8usize, 64, 512, 4096];
    let spread: Vec<f64> = params.p0.diagonal().iter().map(|v| v.sqrt()).collect();
    let mut per_size = vec![Vec::new(); sizes.len()];
    let mut kf_std = Vec::new();
    for seed in 0..20u64 {
        let traj = simulate(&spec, seed).map_err(|e| e.to_string())?;
        let obs: Vec<Option<Vec<f64>>> = traj[1..].iter().map(|r| r.raw_observation.clone()).collect();
        let kf = kalman_filter_exact(&params, &obs).map_err(|e| e.to_string())?;
        let trace: f64 = kf.covariances.iter().map(|p| p.diagonal().iter().sum::<f64>()).sum();
        kf_std.push((trace / (kf.covariances.len() * params.state_dim()) as f64).sqrt());
        for (k, &size) in sizes.iter().enumerate() {
            let mut ens = init_ensemble(&params.x0, &spread, size, derive_seed(seed, &[1, size as u64])).map_err(|e| e.to_string())?;
            let mut sq = 0.0;
            for (t, y) in obs.iter().enumerate() {
                ens = analytic_enkf_step(&params, &ens, y.as_deref(), step_seed(derive_seed(seed, &[2, size as u64]), t))
                    .map_err(|e| e.to_string())?;
                sq += ens.mean().iter().zip(&kf.means[t]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            per_size[k].push((sq / (obs.len() * params.state_dim()) as f64).sqrt());
        }
    }
    let medians: Vec<f64> = per_size.iter().map(|v| median(v)).collect();
    let std = median(&kf_std);
    let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
    let ratio = medians[3] / std;
    verdict(
        decreasing && ratio < 0.05,
        format!("median RMSE vs KF {} for E={sizes:?}; E=4096 is {:.2}% of KF std {std:.4}", fmt_list(&medians), 100.0 * ratio),
    )
}

fn linear_net(name: &str, weight: Array2, bias: Vec<f64>, dropout: f64) -> NetworkParams {
    let spec = LayerSpec::new(weight.rows(), weight.cols(), Activation::None, dropout);
    let mut p = init_params(name, &[spec], 0).unwrap();
    p.weights[0] = weight;
    p.biases[0] = Array2::row_vector(&bias);
    p
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Networks reproducing `A`, `H` and a fixed noise level. With `stochastic`
/// the transition and sensor carry dropout.
fn hand_set_models(params: &LinearSystemParams, stochastic: bool) -> ModelSet {
    let noise = params.rn[(0, 0)] - denkf::models::NOISE_FLOOR;
    let sensor = if stochastic {
        let specs = [LayerSpec::new(1, 8, Activation::None, 0.2), LayerSpec::fc(8, 1, Activation::None)];
        let mut p = init_params("sensor", &specs, 0).unwrap();
        p.weights[0] = Array2::filled(1, 8, 1.0);
        p.weights[1] = Array2::filled(8, 1, 1.0 / 8.0);
        p
    } else {
        linear_net("sensor", Array2::identity(1), vec![0.0], 0.0)
    };
    let models = ModelSet {
        transition: linear_net("transition", params.a.transpose(), vec![0.0; 2], if stochastic { 0.1 } else { 0.0 }),
        observation: linear_net("observation", params.h.transpose(), vec![0.0], 0.0),
        sensor,
        noise: linear_net("noise", Array2::zeros(1, 1), vec![inverse_softplus(noise)], 0.0),
        dims: ModelDims { state: 2, obs: 1, raw: 1 },
        hybrid: None,
    };
    models.check_shapes().unwrap();
    models
}

fn oracle_equivalence() -> Outcome {
    let mut params = LinearSystemParams::reference();
    params.q = Array2::zeros(2, 2);
    let spec = TaskSpec { kind: TaskKind::LinearGaussian { system: params.clone() }, dt: 1.0, horizon: 40 };
    let mut steps = 0;
    for stochastic in [false, true] {
        let models = hand_set_models(&params, stochastic);
        for seed in 0..5u64 {
            let traj = simulate(&spec, seed).map_err(|e| e.to_string())?;
            let mut ens = init_ensemble(&params.x0, &[1.0, 1.0], 32, seed).map_err(|e| e.to_string())?;
            for (t, rec) in traj.iter().enumerate().skip(1) {
                // every fourth step has no observation
                let raw = if t % 4 == 0 { None } else { rec.raw_observation.as_deref() };
                let s = step_seed(seed, t);
                let mut g = Graph::new();
                let bound = models.bind(&mut g, false);
                let node = ens.enter(&mut g);
                let step = filter_step(&bound, node, raw, s, &mut g).map_err(|e| e.to_string())?;
                let prior = g.value(step.prior.node).clone();
                let posterior = g.value(step.posterior.node).clone();
                if !stochastic && prior != enkf_propagate(&params, ens.members(), 0).map_err(|e| e.to_string())? {
                    return Err(format!("prior differs from A x at seed {seed} step {t}"));
                }
                let expected = match (raw, step.update) {
                    (None, None) => {
                        if stochastic {
                            prior.clone()
                        } else {
                            analytic_enkf_step(&params, &ens, None, s).map_err(|e| e.to_string())?.into_members()
                        }
                    }
                    (Some(_), Some(u)) => {
                        let rn = Array2::diag_from(g.value(u.noise_diag));
                        let sampled = g.value(u.observations.sampled);
                        analytic_enkf_update(&params.h, &rn, &prior, sampled).map_err(|e| e.to_string())?.posterior
                    }
                    _ => return Err(format!("update presence does not match observation at step {t}")),
                };
                if posterior != expected {
                    return Err(format!(
                        "posterior differs at seed {seed} step {t} (stochastic={stochastic}): max diff {:e}",
                        posterior.max_abs_diff(&expected)
                    ));
                }
                ens = Ensemble::new(posterior).map_err(|e| e.to_string())?;
                steps += 1;
            }
        }
    }
    Ok(format!("{steps} steps bit-identical, deterministic and dropout variants"))
}

fn take<'a>(params: &'a NetworkParams, layers: usize, rest: &mut &[denkf::autodiff::NodeId]) -> BoundNetwork<'a> {
    let (w, tail) = rest.split_at(layers);
    let (b, tail) = tail.split_at(layers);
    *rest = tail;
    BoundNetwork { params, weights: w.to_vec(), biases: b.to_vec() }
}

fn differentiability() -> Outcome {
    let dims = ModelDims { state: 2, obs: 1, raw: 3 };
    let models = instantiate_models(dims, 0.1, 11).map_err(|e| e.to_string())?;
    let ensemble = init_ensemble(&[0.3, -0.2], &[0.5, 0.5], 4, 5).map_err(|e| e.to_string())?;
    let raw = [0.4, -1.1, 0.7];
    let target = [0.1, 0.2];
    let mut point: Vec<Array2> = models.tensors().cloned().collect();
    point.push(ensemble.members().clone());
    let counts: Vec<usize> = models.networks().iter().map(|n| n.layers.len()).collect();
    let report = check_gradients(
        |g, inputs| {
            let mut rest = inputs;
            let bound = denkf::models::BoundModels {
                models: &models,
                transition: take(&models.transition, counts[0], &mut rest),
                observation: take(&models.observation, counts[1], &mut rest),
                sensor: take(&models.sensor, counts[2], &mut rest),
                noise: take(&models.noise, counts[3], &mut rest),
            };
            let ens = denkf::filter::EnsembleNode::from_node(g, rest[0])?;
            let step = filter_step(&bound, ens, Some(&raw), 3, g)?;
            let mean = step.posterior.mean(g)?;
            let diff = g.add_const(mean, Array2::row_vector(&target).scale(-1.0))?;
            let sq = g.square(diff);
            Ok(g.sum(sq))
        },
        &point,
        1e-5,
    )
    .map_err(|e| e.to_string())?;
    let entries: usize = point.iter().map(|p| p.len()).sum();
    verdict(
        report.max_relative_error < 1e-4,
        format!("{} tensors, {entries} entries, max relative error {:.2e}", point.len(), report.max_relative_error),
    )
}

// ---------------------------------------------------------------- unicycle

const TRAIN_SEEDS: [u64; 3] = [0, 1, 2];
const EVAL_SEEDS: u64 = 5;
const ENSEMBLE: usize = 32;

struct Trained {
    dataset: Dataset,
    models: ModelSet,
    config: TrainConfig,
    train_seconds: f64,
}

fn acceptance_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 20,
        batch_size: 8,
        learning_rate: 3e-4,
        ensemble_size: ENSEMBLE,
        window_length: 16,
        dropout_rate: 0.1,
        seed,
        curriculum: Curriculum::SensorPretrainThenJoint { pretrain_epochs: 5, pretrain_learning_rate: 1e-3 },
        init_spread: 0.1,
        ..TrainConfig::smoke()
    }
}

fn train_unicycle(seed: u64) -> Result<Trained, String> {
    let spec = TaskSpec::preset("unicycle_odometry", 48, seed).map_err(|e| e.to_string())?;
    let dataset = Dataset::generate(&spec, 250, 0.1, seed).map_err(|e| e.to_string())?;
    let config = acceptance_config(seed);
    let start = Instant::now();
    let models = models_for_dataset(&dataset, config.dropout_rate, seed).map_err(|e| e.to_string())?;
    let outcome = train(&config, &dataset, models).map_err(|e| e.to_string())?;
    let train_seconds = start.elapsed().as_secs_f64();
    Ok(Trained { dataset, models: outcome.best.models, config, train_seconds })
}

fn denkf_mse(run: &Trained, test: &[Trajectory], eval_seed: u64) -> Result<f64, String> {
    let angles = run.dataset.spec.angle_dims();
    evaluate_mse(&run.models, test, &angles, ENSEMBLE, run.config.init_spread, eval_seed).map_err(|e| e.to_string())
}

fn dead_reckoning_mse(run: &Trained) -> Result<f64, String> {
    let ds = &run.dataset;
    let angles = ds.spec.angle_dims();
    let mut total = 0.0;
    for tr in &ds.test {
        let start = ds.stats.destandardize_state(&tr[0].true_state);
        let path = dead_reckoning(&ds.spec, &start, tr.len() - 1).map_err(|e| e.to_string())?;
        let path: Vec<Vec<f64>> = path.iter().map(|s| ds.stats.standardize_state(s)).collect();
        total += sequence_mse(&path, tr, &angles);
    }
    Ok(total / ds.test.len() as f64)
}

fn sensor_only_mse(run: &Trained) -> Result<f64, String> {
    let ds = &run.dataset;
    let angles = ds.spec.angle_dims();
    let mut total = 0.0;
    for (i, tr) in ds.test.iter().enumerate() {
        let path = sensor_kinematics_rollout(&run.models, &ds.stats, ds.spec.dt, tr, ENSEMBLE, i as u64).map_err(|e| e.to_string())?;
        total += sequence_mse(&path, tr, &angles);
    }
    Ok(total / ds.test.len() as f64)
}

fn eval_seed(k: u64) -> u64 {
    derive_seed(1000, &[k])
}

fn end_to_end(runs: &[Trained]) -> Outcome {
    let (mut vs_dead, mut vs_sensor, mut secs) = (Vec::new(), Vec::new(), 0.0);
    for run in runs {
        let mse = denkf_mse(run, &run.dataset.test, eval_seed(0))?;
        vs_dead.push(mse / dead_reckoning_mse(run)?);
        vs_sensor.push(mse / sensor_only_mse(run)?);
        secs += run.train_seconds;
    }
    let (d, s) = (median(&vs_dead), median(&vs_sensor));
    verdict(
        d <= 0.7 && s <= 0.7 && secs < 1800.0,
        format!(
            "median MSE ratio vs dead reckoning {d:.3} {}, vs sensor-only {s:.3} {}; training {secs:.0}s for {} seeds",
            fmt_list(&vs_dead),
            fmt_list(&vs_sensor),
            runs.len()
        ),
    )
}

/// Clean and corrupted test MSE for every model and evaluation seed.
fn corruption_ratios(runs: &[Trained], spec: &CorruptionSpec, tag: u64) -> Result<(Vec<f64>, Vec<f64>), String> {
    let (mut ratios, mut corrupted) = (Vec::new(), Vec::new());
    for run in runs {
        for k in 0..EVAL_SEEDS {
            let clean = denkf_mse(run, &run.dataset.test, eval_seed(k))?;
            let test = corrupt_all(&run.dataset.test, spec, derive_seed(2000, &[tag, k])).map_err(|e| e.to_string())?;
            let mse = denkf_mse(run, &test, eval_seed(k))?;
            ratios.push(mse / clean);
            corrupted.push(mse);
        }
    }
    Ok((ratios, corrupted))
}

fn missing_robustness(runs: &[Trained]) -> Outcome {
    let (ratios, corrupted) = corruption_ratios(runs, &CorruptionSpec::missing(0.3), 0)?;
    let dead: Vec<f64> = runs.iter().map(dead_reckoning_mse).collect::<Result<_, _>>()?;
    let (ratio, mse, dead) = (median(&ratios), median(&corrupted), median(&dead));
    verdict(
        ratio < 2.0 && mse < dead,
        format!("median MSE ratio {ratio:.3} over {} runs; MSE {mse:.4} vs dead reckoning {dead:.4}", ratios.len()),
    )
}

fn noise_robustness(runs: &[Trained]) -> Outcome {
    let (spike, _) = corruption_ratios(runs, &CorruptionSpec::spike(0.1), 1)?;
    let (blur, _) = corruption_ratios(runs, &CorruptionSpec::blur(5), 2)?;
    let (s, b) = (median(&spike), median(&blur));
    verdict(s < 1.5 && b < 1.5, format!("median MSE ratio spike {s:.3}, blur {b:.3}"))
}

fn ensemble_tradeoff(runs: &[Trained]) -> Outcome {
    let sizes = [8usize, 16, 32, 64, 128];
    let (mut maes, mut times) = (Vec::new(), Vec::new());
    for &size in &sizes {
        let (mut m, mut t) = (Vec::new(), Vec::new());
        for run in runs {
            let angles = run.dataset.spec.angle_dims();
            for k in 0..3 {
                let (mut est, mut truth, mut secs) = (Vec::new(), Vec::new(), Vec::new());
                for (i, tr) in run.dataset.test.iter().enumerate() {
                    let seed = derive_seed(eval_seed(k), &[i as u64]);
                    let out = run_filter(&run.models, tr, size, run.config.init_spread, seed).map_err(|e| e.to_string())?;
                    est.extend(out.means[1..].iter().cloned());
                    truth.extend(tr[1..].iter().map(|r| r.true_state.clone()));
                    secs.push(out.step_seconds);
                }
                let stack = |rows: &[Vec<f64>]| Array2::from_vec(rows.len(), rows[0].len(), rows.concat()).unwrap();
                m.push(mae(&stack(&est), &stack(&truth), &angles).map_err(|e| e.to_string())?);
                t.push(median(&secs));
            }
        }
        maes.push(median(&m));
        times.push(median(&t));
    }
    let xs: Vec<f64> = sizes.iter().map(|&e| e as f64).collect();
    let slope = loglog_slope(&xs, &times).map_err(|e| e.to_string())?;
    let holds = maes.windows(2).filter(|w| w[1] <= w[0]).count();
    verdict(
        holds == sizes.len() - 1 && slope <= 2.2,
        format!(
            "MAE {} non-increasing in {holds}/{} steps; step time slope {slope:.2} (E=8 {:.2}ms, E=128 {:.2}ms)",
            fmt_list(&maes),
            sizes.len() - 1,
            1e3 * times[0],
            1e3 * times[sizes.len() - 1]
        ),
    )
}

fn invariant_suites() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    for (name, suite) in common::SUITES {
        if let Err(e) = suite() {
            failures.push(format!("{name}: {e}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if !failures.is_empty() {
        return Err(failures.join("; "));
    }
    verdict(secs < 300.0, format!("{} suites in {secs:.1}s", common::SUITES.len()))
}

fn report(name: &str, start: Instant, outcome: Outcome) -> bool {
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS {name}: {detail} [{secs:.1}s]");
            true
        }
        Err(detail) => {
            println!("FAIL {name}: {detail} [{secs:.1}s]");
            false
        }
    }
}

fn main() -> ExitCode {
    let mut ok = true;
    let timed: [(&str, fn() -> Outcome); 3] = [
        ("linear convergence to the Kalman filter", linear_convergence),
        ("filter step equals the analytic update", oracle_equivalence),
        ("gradients through a full filter step", differentiability),
    ];
    for (name, check) in timed {
        let start = Instant::now();
        let runtime_limit = if name.starts_with("linear") { 120.0 } else { 60.0 };
        let outcome = check().and_then(|d| {
            let secs = start.elapsed().as_secs_f64();
            verdict(secs < runtime_limit, d)
        });
        ok &= report(name, start, outcome);
    }

    let start = Instant::now();
    let runs: Result<Vec<Trained>, String> = TRAIN_SEEDS.iter().map(|&s| train_unicycle(s)).collect();
    let unicycle: [(&str, fn(&[Trained]) -> Outcome); 4] = [
        ("end-to-end learning beats both baselines", end_to_end),
        ("graceful degradation with missing observations", missing_robustness),
        ("robustness to spike and blur corruption", noise_robustness),
        ("ensemble size tradeoff", ensemble_tradeoff),
    ];
    match runs {
        Ok(runs) => {
            for (k, (name, check)) in unicycle.into_iter().enumerate() {
                let t = if k == 0 { start } else { Instant::now() };
                ok &= report(name, t, check(&runs));
            }
        }
        Err(e) => {
            for (name, _) in unicycle {
                ok &= report(name, start, Err(format!("training failed: {e}")));
            }
        }
    }

    let start = Instant::now();
    ok &= report("invariant property suites", start, invariant_suites());

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
