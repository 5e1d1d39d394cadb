//! Run configuration: profile defaults, a JSON file, `--set` overrides and
//! dedicated flags, applied in that order.

use std::path::{Path, PathBuf};

use denkf::tasks::{CorruptionSpec, TaskSpec};
use denkf::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Which dataset to simulate when none is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// Preset name; ignored when `spec` is present.
    pub name: String,
    pub horizon: usize,
    pub trajectories: usize,
    /// Share of the training split held out for validation.
    pub val_fraction: f64,
    /// Full task definition overriding the preset.
    #[serde(default)]
    pub spec: Option<TaskSpec>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { name: "unicycle_odometry".into(), horizon: 48, trajectories: 250, val_fraction: 0.1, spec: None }
    }
}

/// Fully resolved settings of one command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; also copied into `train.seed`.
    pub seed: u64,
    pub profile: String,
    pub out: PathBuf,
    pub task: TaskConfig,
    /// `none`, `spike:F`, `blur:W` or `missing:P`, applied to evaluation data.
    pub corruption: String,
    pub train: TrainConfig,
    /// Dataset directory written by `generate`; simulated when absent.
    pub dataset: Option<PathBuf>,
    /// Checkpoint to evaluate, or to resume when training.
    pub checkpoint: Option<PathBuf>,
    /// Members used at evaluation; `train.ensemble_size` when absent.
    pub ensemble_size: Option<usize>,
    /// Filter seeds per evaluation; reported values are medians over them.
    pub eval_seeds: usize,
    pub ablation_sizes: Vec<usize>,
    /// Subsequence lengths (steps) for the odometry error report.
    pub odometry_lengths: Vec<usize>,
}

impl RunConfig {
    pub fn defaults(profile: &str) -> Result<Self, CliError> {
        let train = TrainConfig::profile(profile).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Self {
            seed: 0,
            profile: profile.to_string(),
            out: PathBuf::from("run"),
            task: TaskConfig::default(),
            corruption: "none".into(),
            train,
            dataset: None,
            checkpoint: None,
            ensemble_size: None,
            eval_seeds: 5,
            ablation_sizes: vec![8, 16, 32, 64, 128],
            odometry_lengths: vec![10, 20, 40],
        })
    }

    pub fn corruption_spec(&self) -> Result<CorruptionSpec, CliError> {
        self.corruption.parse().map_err(|e: denkf::Error| CliError::Config(e.to_string()))
    }

    pub fn eval_ensemble_size(&self) -> usize {
        self.ensemble_size.unwrap_or(self.train.ensemble_size)
    }

    pub fn task_spec(&self) -> Result<TaskSpec, CliError> {
        let spec = match &self.task.spec {
            Some(spec) => spec.clone(),
            None => TaskSpec::preset(&self.task.name, self.task.horizon, self.seed)
                .map_err(|e| CliError::Config(e.to_string()))?,
        };
        spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.corruption_spec()?;
        if self.task.spec.is_none() {
            self.task_spec()?;
        }
        if self.task.trajectories < 2 {
            return bad(format!("task.trajectories must be at least 2, got {}", self.task.trajectories));
        }
        if !(0.0..1.0).contains(&self.task.val_fraction) {
            return bad(format!("task.val_fraction {} outside [0, 1)", self.task.val_fraction));
        }
        if self.eval_seeds == 0 {
            return bad("eval_seeds must be at least 1".into());
        }
        if self.eval_ensemble_size() < 2 || self.ablation_sizes.iter().any(|&e| e < 2) {
            return bad("ensemble sizes must be at least 2".into());
        }
        Ok(())
    }
}

/// Flag values that take precedence over the file and `--set`.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub profile: Option<String>,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub corruption: Option<String>,
    pub ensemble_size: Option<usize>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub set: Vec<String>,
}

/// Merge `patch` into `base`; objects merge key by key, anything else
/// replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Apply `a.b.c=value`; the value is read as JSON and falls back to a
/// plain string.
pub fn set_dotted(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {assignment:?}")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("invalid key {key:?} in --set")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(map) => map,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just replaced")
            }
            _ => return Err(CliError::Config(format!("{key}: {} is not an object", parts[..i].join(".")))),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Object(Default::default()));
    }
    unreachable!("key has at least one part")
}

fn read_config_file(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
    if !value.is_object() {
        return Err(CliError::Config(format!("config {} must be a JSON object", path.display())));
    }
    Ok(value)
}

/// Resolve the effective configuration.
pub fn resolve(flags: &Overrides) -> Result<RunConfig, CliError> {
    let file = flags.config.as_deref().map(read_config_file).transpose()?;
    let profile = flags
        .profile
        .clone()
        .or_else(|| file.as_ref().and_then(|f| f.get("profile")?.as_str().map(String::from)))
        .unwrap_or_else(|| "smoke".to_string());
    let mut value = serde_json::to_value(RunConfig::defaults(&profile)?).expect("config serializes");
    if let Some(mut file) = file {
        // a profile named in the file only picks the defaults above
        if let Some(obj) = file.as_object_mut() {
            obj.remove("profile");
        }
        merge(&mut value, file);
    }
    for assignment in &flags.set {
        set_dotted(&mut value, assignment)?;
    }
    let mut config: RunConfig =
        serde_json::from_value(value).map_err(|e| CliError::Config(format!("invalid configuration: {e}")))?;
    config.profile = profile;
    if let Some(seed) = flags.seed {
        config.seed = seed;
    }
    if let Some(out) = &flags.out {
        config.out = out.clone();
    }
    if let Some(c) = &flags.corruption {
        config.corruption = c.clone();
    }
    if let Some(e) = flags.ensemble_size {
        config.ensemble_size = Some(e);
    }
    if let Some(d) = &flags.dataset {
        config.dataset = Some(d.clone());
    }
    if let Some(c) = &flags.checkpoint {
        config.checkpoint = Some(c.clone());
    }
    config.train.seed = config.seed;
    config.validate()?;
    Ok(config)
}
