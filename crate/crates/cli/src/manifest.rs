//! Provenance record written into every run directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, RunConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<InputFile>,
    /// Hash over the sorted `(path, hash)` list of inputs.
    pub input_hash: String,
}

/// Git-style content hash: the digest of `blob <len>\0<bytes>`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn collect_inputs(config: &RunConfig, config_file: Option<&Path>) -> Result<Vec<InputFile>, CliError> {
    let mut paths: Vec<PathBuf> = config_file.map(Path::to_path_buf).into_iter().collect();
    if let Some(dir) = &config.dataset {
        for name in ["dataset.json", "train.ndjson", "val.ndjson", "test.ndjson"] {
            paths.push(dir.join(name));
        }
    }
    paths.extend(config.checkpoint.clone());
    paths
        .into_iter()
        .filter(|p| p.exists())
        .map(|path| {
            let bytes = fs::read(&path)?;
            Ok(InputFile { sha256: content_hash(&bytes), path })
        })
        .collect()
}

pub fn build(config: &RunConfig, command: &str, config_file: Option<&Path>) -> Result<Manifest, CliError> {
    let mut inputs = collect_inputs(config, config_file)?;
    inputs.sort_by(|a, b| a.path.cmp(&b.path));
    let listing: String = inputs.iter().map(|i| format!("{}:{}\n", i.path.display(), i.sha256)).collect();
    Ok(Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        seed: config.seed,
        config: config.clone(),
        inputs,
        input_hash: content_hash(listing.as_bytes()),
    })
}

pub fn write(config: &RunConfig, command: &str, config_file: Option<&Path>) -> Result<(), CliError> {
    let manifest = build(config, command, config_file)?;
    fs::create_dir_all(&config.out)?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(config.out.join("manifest.json"), text + "\n")?;
    Ok(())
}
