//! Invariant property suites shared by the `properties` tests and the
//! acceptance run. Each suite drives proptest from a fixed seed and reports
//! the first counterexample as an error string.

#![allow(dead_code)]

use std::f64::consts::PI;

use denkf::autodiff::{Array2, Graph};
use denkf::filter::{innovation_covariance, kalman_update, observe, Ensemble, EnsembleNode};
use denkf::metrics::odometry_errors;
use denkf::models::{instantiate_models, wrap_angle, ModelDims};
use denkf::rng::rng_from;
use denkf::snn::{self, init_params, mlp_specs, Activation, ForwardMode, LayerSpec};
use denkf::tasks::{parse_record, CorruptionSpec, Dataset, DatasetSidecar, TaskSpec};
use denkf::training::{self, AdamState, Checkpoint, TrainConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::Rng;
use rand_distr::StandardNormal;

pub type Suite = fn() -> Result<(), String>;

pub const SUITES: [(&str, Suite); 8] = [
    ("centering", centering),
    ("zero-innovation fixed point", zero_innovation_fixed_point),
    ("gain shrinkage", gain_shrinkage),
    ("permutation equivariance", permutation_equivariance),
    ("dropout unbiasedness", dropout_unbiasedness),
    ("metric rigid-transform invariance", rigid_transform_invariance),
    ("serialization roundtrips", serialization_roundtrips),
    ("training reproducibility", training_reproducibility),
];

fn check<S>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S: Strategy,
    S::Value: std::fmt::Debug,
{
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn fail(msg: String) -> TestCaseError {
    TestCaseError::fail(msg)
}

fn ok<T>(r: denkf::Result<T>) -> Result<T, TestCaseError> {
    r.map_err(|e| fail(e.to_string()))
}

fn random_matrix(rows: usize, cols: usize, scale: f64, seed: u64) -> Array2 {
    let mut rng = rng_from(seed, &[]);
    let values = (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Array2::from_vec(rows, cols, values).unwrap()
}

/// Prior, predicted and centered observations and `S` for a random
/// ensemble pushed through a random observation network.
struct Fixture {
    graph: Graph,
    prior: EnsembleNode,
    predicted: denkf::autodiff::NodeId,
    centered: denkf::autodiff::NodeId,
}

fn fixture(members: Array2, obs: usize, seed: u64) -> Result<Fixture, TestCaseError> {
    let state = members.cols();
    let h = ok(init_params("h", &mlp_specs(state, &[8], obs, 0.0), seed))?;
    let mut graph = Graph::new();
    let bound = h.bind(&mut graph, false);
    let prior = ok(Ensemble::new(members))?.enter(&mut graph);
    let (predicted, centered) = ok(observe(&bound, prior, &mut graph))?;
    Ok(Fixture { graph, prior, predicted, centered })
}

pub fn centering() -> Result<(), String> {
    check(64, (any::<u64>(), 2usize..40, 1usize..6, 1usize..4, 0.1f64..100.0), |(seed, e, s, o, scale)| {
        let f = fixture(random_matrix(e, s, scale, seed), o, seed ^ 1)?;
        let c = f.graph.value(f.centered);
        for j in 0..o {
            let sum: f64 = (0..e).map(|i| c[(i, j)]).sum();
            prop_assert!(sum.abs() < 1e-9, "column {j} sums to {sum}");
        }
        Ok(())
    })
}

pub fn zero_innovation_fixed_point() -> Result<(), String> {
    check(64, (any::<u64>(), 2usize..30, 1usize..6, 1usize..4, 1e-3f64..10.0), |(seed, e, s, o, noise)| {
        let mut f = fixture(random_matrix(e, s, 1.0, seed), o, seed ^ 2)?;
        let nd = f.graph.constant(Array2::filled(1, o, noise));
        let cov = ok(innovation_covariance(f.centered, nd, &mut f.graph))?;
        let upd = ok(kalman_update(f.prior, f.centered, f.predicted, f.predicted, cov, &mut f.graph))?;
        prop_assert!(f.graph.value(upd.posterior.node) == f.graph.value(f.prior.node));
        Ok(())
    })
}

/// Single observation dimension: with several, individual gain entries
/// need not shrink monotonically as the diagonal noise grows.
pub fn gain_shrinkage() -> Result<(), String> {
    check(64, (any::<u64>(), 3usize..30, 1usize..5, 1e-3f64..10.0), |(seed, e, s, noise)| {
        let mut f = fixture(random_matrix(e, s, 1.0, seed), 1, seed ^ 3)?;
        let sampled = f.graph.constant(random_matrix(e, 1, 1.0, seed ^ 4));
        let mut previous: Option<Array2> = None;
        for scale in [1.0, 10.0, 100.0] {
            let nd = f.graph.constant(Array2::filled(1, 1, noise * scale));
            let cov = ok(innovation_covariance(f.centered, nd, &mut f.graph))?;
            let upd = ok(kalman_update(f.prior, f.centered, sampled, f.predicted, cov, &mut f.graph))?;
            let gain = f.graph.value(upd.gain).clone();
            if let Some(prev) = &previous {
                for (a, b) in gain.as_slice().iter().zip(prev.as_slice()) {
                    prop_assert!(a.abs() <= b.abs() * (1.0 + 1e-12), "gain grew from {b} to {a} at scale {scale}");
                }
            }
            previous = Some(gain);
        }
        Ok(())
    })
}

fn permute_rows(m: &Array2, perm: &[usize]) -> Array2 {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| m.row(i).to_vec()).collect();
    Array2::from_rows(&rows).unwrap()
}

fn close(a: &Array2, b: &Array2, tol: f64) -> bool {
    a.shape() == b.shape() && a.max_abs_diff(b) <= tol * a.max_abs().max(1.0)
}

pub fn permutation_equivariance() -> Result<(), String> {
    check(64, (any::<u64>(), 2usize..25, 1usize..6, 1usize..4, 0.01f64..5.0, any::<u64>()), |(seed, e, s, o, noise, shuffle)| {
        let members = random_matrix(e, s, 1.0, seed);
        let sampled = random_matrix(e, o, 1.0, seed ^ 5);
        let mut perm: Vec<usize> = (0..e).collect();
        let mut rng = rng_from(shuffle, &[]);
        for i in (1..e).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let run = |members: Array2, sampled: Array2| -> Result<(Array2, Array2, Array2, Vec<f64>), TestCaseError> {
            let mut f = fixture(members, o, seed ^ 6)?;
            let y = f.graph.constant(sampled);
            let nd = f.graph.constant(Array2::filled(1, o, noise));
            let cov = ok(innovation_covariance(f.centered, nd, &mut f.graph))?;
            let upd = ok(kalman_update(f.prior, f.centered, y, f.predicted, cov, &mut f.graph))?;
            let post = ok(upd.posterior.to_ensemble(&f.graph))?;
            Ok((post.members().clone(), f.graph.value(upd.gain).clone(), f.graph.value(cov).clone(), post.mean()))
        };
        let (post, gain, cov, mean) = run(members.clone(), sampled.clone())?;
        let (post_p, gain_p, cov_p, mean_p) = run(permute_rows(&members, &perm), permute_rows(&sampled, &perm))?;
        prop_assert!(close(&permute_rows(&post, &perm), &post_p, 1e-10), "posterior rows");
        prop_assert!(close(&gain, &gain_p, 1e-10), "gain");
        prop_assert!(close(&cov, &cov_p, 1e-10), "innovation covariance");
        prop_assert!(close(&Array2::row_vector(&mean), &Array2::row_vector(&mean_p), 1e-10), "mean");
        Ok(())
    })
}

pub fn dropout_unbiasedness() -> Result<(), String> {
    const SAMPLES: usize = 10_000;
    check(6, (any::<u64>(), 1usize..5, 2usize..12, 1usize..4, 0.05f64..0.5), |(seed, n, hidden, o, rate)| {
        let specs = [LayerSpec::new(n, hidden, Activation::None, rate), LayerSpec::fc(hidden, o, Activation::None)];
        let net = ok(init_params("affine", &specs, seed))?;
        let x = random_matrix(1, n, 1.0, seed ^ 7);
        let det = ok(snn::forward(&net, &x, ForwardMode::Deterministic))?;
        let samples = ok(snn::sample_batch(&net, &x, SAMPLES, seed ^ 8))?;
        for j in 0..o {
            let col: Vec<f64> = (0..SAMPLES).map(|i| samples[(i, j)]).collect();
            let mean = col.iter().sum::<f64>() / SAMPLES as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (SAMPLES - 1) as f64;
            let bound = 3.0 * (var / SAMPLES as f64).sqrt();
            prop_assert!((mean - det[(0, j)]).abs() <= bound, "output {j}: mean {mean}, deterministic {}, bound {bound}", det[(0, j)]);
        }
        Ok(())
    })
}

fn random_poses(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = rng_from(seed, &[]);
    let mut pose = [0.0, 0.0, 0.0];
    (0..n)
        .map(|_| {
            let step = 0.5 + rng.random::<f64>();
            pose[2] = wrap_angle(pose[2] + 0.6 * (rng.random::<f64>() - 0.5));
            pose[0] += step * pose[2].cos();
            pose[1] += step * pose[2].sin();
            pose
        })
        .collect()
}

fn rigid(poses: &[[f64; 3]], angle: f64, tx: f64, ty: f64) -> Vec<[f64; 3]> {
    let (s, c) = angle.sin_cos();
    poses.iter().map(|p| [c * p[0] - s * p[1] + tx, s * p[0] + c * p[1] + ty, wrap_angle(p[2] + angle)]).collect()
}

pub fn rigid_transform_invariance() -> Result<(), String> {
    check(64, (any::<u64>(), -PI..PI, -100.0f64..100.0, -100.0f64..100.0), |(seed, angle, tx, ty)| {
        let truth = random_poses(40, seed);
        let est = random_poses(40, seed ^ 9);
        let a = ok(odometry_errors(&est, &truth, &[5, 10, 20]))?;
        let b = ok(odometry_errors(&rigid(&est, angle, tx, ty), &rigid(&truth, angle, tx, ty), &[5, 10, 20]))?;
        prop_assert!((a.translational_error - b.translational_error).abs() < 1e-9);
        prop_assert!((a.rotational_error - b.rotational_error).abs() < 1e-9);
        for (x, y) in a.per_length.iter().zip(&b.per_length) {
            prop_assert!((x.translational_error - y.translational_error).abs() < 1e-9);
            prop_assert!((x.rotational_error - y.rotational_error).abs() < 1e-9);
        }
        Ok(())
    })
}

fn small_task(seed: u64, kind: usize) -> TaskSpec {
    let name = ["linear_gaussian", "unicycle_odometry", "planar_arm"][kind];
    TaskSpec::preset(name, 4, seed).unwrap()
}

pub fn serialization_roundtrips() -> Result<(), String> {
    let strategy = (any::<u64>(), 1usize..6, 1usize..4, 1usize..9, 0.0f64..0.5, 0usize..3, 0usize..4, 0.0f64..1.0);
    check(16, strategy, |(seed, state, obs, raw, rate, kind, mode, p)| {
        let models = ok(instantiate_models(ModelDims { state, obs, raw }, rate, seed))?;
        let mut optimizer = AdamState::new(models.tensors());
        optimizer.step = seed % 1000;
        for m in optimizer.first_moment.iter_mut().chain(optimizer.second_moment.iter_mut()) {
            *m = random_matrix(m.rows(), m.cols(), 1e-3, seed ^ 10);
        }
        let val_mse = if seed % 2 == 0 { f64::INFINITY } else { p };
        let ckpt = Checkpoint { models, config: TrainConfig::smoke(), optimizer, epoch: (seed % 50) as usize, val_mse };
        let again = ok(Checkpoint::from_json(&ok(ckpt.to_json())?))?;
        prop_assert!(again == ckpt, "checkpoint");

        let ds = ok(Dataset::generate(&small_task(seed, kind), 6, 0.25, seed))?;
        for rec in ds.train.iter().flatten() {
            let line = serde_json::to_string(rec).unwrap();
            prop_assert!(ok(parse_record(&line))? == *rec, "record");
        }
        let dir = tempfile::tempdir().unwrap();
        ok(ds.save(dir.path()))?;
        prop_assert!(ok(Dataset::load(dir.path()))? == ds, "dataset");
        let side = ok(DatasetSidecar::read(&dir.path().join("dataset.json")))?;
        prop_assert!(ok(DatasetSidecar::from_json(&ok(side.to_json())?))? == side, "sidecar");

        let text = match mode {
            0 => "none".to_string(),
            1 => format!("spike:{p}"),
            2 => format!("blur:{}", 1 + 2 * (seed % 5)),
            _ => format!("missing:{p}"),
        };
        let spec: CorruptionSpec = ok(text.parse())?;
        prop_assert!(ok(spec.to_string().parse::<CorruptionSpec>())? == spec, "corruption {text}");
        Ok(())
    })
}

pub fn training_reproducibility() -> Result<(), String> {
    check(3, (any::<u64>(), 0usize..3), |(seed, kind)| {
        let ds = ok(Dataset::generate(&TaskSpec::preset(["linear_gaussian", "unicycle_odometry", "planar_arm"][kind], 8, seed).unwrap(), 8, 0.25, seed))?;
        let config = TrainConfig { epochs: 2, window_length: 4, ensemble_size: 4, seed, ..TrainConfig::smoke() };
        let run = || -> Result<training::TrainOutcome, TestCaseError> {
            let models = ok(training::models_for_dataset(&ds, config.dropout_rate, seed))?;
            ok(training::train(&config, &ds, models))
        };
        let (a, b) = (run()?, run()?);
        prop_assert!(ok(a.best.to_json())? == ok(b.best.to_json())?, "best checkpoint");
        prop_assert!(ok(a.last.to_json())? == ok(b.last.to_json())?, "last checkpoint");
        let losses = |o: &training::TrainOutcome| o.log.iter().map(|e| (e.train_loss.to_bits(), e.val_mse.to_bits())).collect::<Vec<_>>();
        prop_assert!(losses(&a) == losses(&b), "epoch log");
        Ok(())
    })
}
