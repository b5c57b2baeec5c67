//! Run manifests: every command writes a JSON record of what it did — the
//! effective configuration (defaults materialized), seeds, input digests,
//! and outputs — sufficient to re-run the stage bit-identically.

use crate::config::{RunConfig, Seeds};
use crate::error::CliError;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub manifest_version: u32,
    pub command: String,
    pub argv: Vec<String>,
    pub seeds: Seeds,
    pub config_sha256: String,
    pub config: &'a RunConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl<'a> Manifest<'a> {
    pub fn new(command: &str, config: &'a RunConfig) -> Self {
        let echoed = serde_json::to_vec(config).expect("config serializes");
        Self {
            tool: "pdx",
            manifest_version: 1,
            command: command.to_string(),
            argv: std::env::args().collect(),
            seeds: config.seeds,
            config_sha256: sha256_bytes(&echoed),
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    /// Record an input file (or every regular file under an input
    /// directory) with its digest.
    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        if path.is_dir() {
            let mut names: Vec<_> = std::fs::read_dir(path)
                .map_err(|e| CliError::Corrupt(format!("reading {}: {e}", path.display())))?
                .filter_map(|r| r.ok())
                .map(|e| e.path())
                .filter(|p| p.is_file())
                .collect();
            names.sort();
            for file in names {
                self.inputs.insert(file.display().to_string(), sha256_file(&file)?);
            }
        } else {
            self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Write next to the artifact: `<artifact>.manifest.json` for files,
    /// `manifest.json` inside for directories.
    pub fn write_for(&self, artifact: &Path) -> Result<(), CliError> {
        let dest = if artifact.is_dir() {
            artifact.join("manifest.json")
        } else {
            let mut name = artifact.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.json");
            artifact.with_file_name(name)
        };
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&dest, text)
            .map_err(|e| CliError::Corrupt(format!("writing {}: {e}", dest.display())))?;
        Ok(())
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Corrupt(format!("reading {}: {e}", path.display())))?;
    Ok(sha256_bytes(&bytes))
}

/// Read back the effective config a previous stage recorded, so later stages
/// can rebuild the exact same models around a checkpoint.
pub fn read_config_echo(manifest_path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| CliError::Corrupt(format!("reading {}: {e}", manifest_path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Corrupt(format!("{}: {e}", manifest_path.display())))?;
    let config = value
        .get("config")
        .ok_or_else(|| CliError::Corrupt(format!("{}: no config echo", manifest_path.display())))?;
    serde_json::from_value(config.clone())
        .map_err(|e| CliError::Corrupt(format!("{}: config echo: {e}", manifest_path.display())))
}

/// The manifest that travels with a checkpoint: `<ckpt>.manifest.json`.
pub fn sidecar_for(ckpt: &Path) -> std::path::PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    ckpt.with_file_name(name)
}
