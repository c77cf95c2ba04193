use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::failure::{CmdResult, Failure};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<serde_json::Value>,
    pub wall_time_secs: f64,
}

/// Collects inputs and outputs of one command and writes the manifest.
pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
}

pub fn sha256_file(path: &Path) -> CmdResult<String> {
    let bytes = std::fs::read(path).map_err(|e| Failure::from(subalign_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: Option<u64>, config: impl Serialize) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION"),
                seed,
                config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                metrics: None,
                wall_time_secs: 0.0,
            },
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> CmdResult<()> {
        let digest = sha256_file(path)?;
        self.manifest.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> CmdResult<()> {
        let digest = sha256_file(path)?;
        self.manifest.outputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn metrics(&mut self, metrics: impl Serialize) {
        self.manifest.metrics = serde_json::to_value(metrics).ok();
    }

    pub fn write(mut self, path: &Path) -> CmdResult<PathBuf> {
        self.manifest.wall_time_secs = self.started.elapsed().as_secs_f64();
        write_json(path, &self.manifest)?;
        Ok(path.to_path_buf())
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CmdResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Failure::data)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| {
        Failure::from(subalign_core::Error::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

/// Manifest path for commands whose main output is a single file.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}
