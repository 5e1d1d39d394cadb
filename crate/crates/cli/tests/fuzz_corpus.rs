//! Replays the checked-in fuzz corpus through the same checks as the fuzz
//! targets, so seeds stay meaningful without a fuzzing toolchain.

use std::fs;
use std::path::PathBuf;

use denkf::tasks::{parse_dataset, parse_record, CorruptionSpec, DatasetSidecar};
use denkf::training::Checkpoint;
use denkf_cli::config::{merge, set_dotted};
use denkf_cli::RunConfig;
use serde_json::Value;

fn seeds(target: &str) -> Vec<(String, String)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, String)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let path = e.unwrap().path();
            (path.file_name().unwrap().to_string_lossy().into_owned(), fs::read_to_string(&path).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn accepted(target: &str, check: impl Fn(&str) -> bool) -> Vec<String> {
    seeds(target).into_iter().filter(|(_, text)| check(text)).map(|(name, _)| name).collect()
}

#[test]
fn dataset_record_seeds() {
    let ok = accepted("dataset_record", |line| match parse_record(line) {
        Ok(rec) => {
            assert_eq!(parse_record(&serde_json::to_string(&rec).unwrap()).unwrap(), rec);
            true
        }
        Err(_) => false,
    });
    assert_eq!(ok, ["linear.json", "missing_obs.json", "unicycle_short_raw.json"]);
}

#[test]
fn dataset_text_seeds() {
    let ok = accepted("dataset_text", |text| parse_dataset(text).is_ok());
    assert_eq!(ok, ["blank.ndjson", "linear.ndjson"]);
}

#[test]
fn sidecar_seeds() {
    let ok = accepted("sidecar", |text| match DatasetSidecar::from_json(text) {
        Ok(side) => {
            assert_eq!(DatasetSidecar::from_json(&side.to_json().unwrap()).unwrap(), side);
            true
        }
        Err(_) => false,
    });
    assert_eq!(ok, ["linear.json"]);
}

#[test]
fn checkpoint_seeds() {
    let ok = accepted("checkpoint", |text| match Checkpoint::from_json(text) {
        Ok(ckpt) => {
            ckpt.models.check_shapes().unwrap();
            assert_eq!(Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap(), ckpt);
            true
        }
        Err(_) => false,
    });
    assert_eq!(ok, ["tiny.json"]);
}

#[test]
fn corruption_spec_seeds() {
    let ok = accepted("corruption_spec", |text| match text.parse::<CorruptionSpec>() {
        Ok(spec) => {
            assert_eq!(spec.to_string().parse::<CorruptionSpec>().unwrap(), spec);
            true
        }
        Err(_) => false,
    });
    assert_eq!(ok, ["blur_5", "missing_0_3", "none", "padded_none", "spike_0_1"]);
}

#[test]
fn run_config_seeds() {
    let ok = accepted("run_config", |text| {
        let mut value = serde_json::to_value(RunConfig::defaults("smoke").unwrap()).unwrap();
        match serde_json::from_str::<Value>(text) {
            Ok(patch @ Value::Object(_)) => merge(&mut value, patch),
            _ => {
                if set_dotted(&mut value, text).is_err() {
                    return false;
                }
            }
        }
        match serde_json::from_value::<RunConfig>(value) {
            Ok(config) => {
                let again: RunConfig = serde_json::from_value(serde_json::to_value(&config).unwrap()).unwrap();
                assert_eq!(again, config);
                true
            }
            Err(_) => false,
        }
    });
    assert_eq!(ok, ["file.json", "set_curriculum", "set_epochs"]);
}
