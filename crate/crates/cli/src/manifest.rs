use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::Failure;

#[derive(Debug, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

/// Reproducibility record written next to every command's outputs. It holds
/// no timestamps, so identical runs produce identical manifests.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: &'static str,
    pub config_sha256: String,
    pub config: RunConfig,
    pub seeds: Vec<(String, u64)>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn record(run_dir: &Path, path: &Path) -> Result<FileRecord, Failure> {
    let shown = path.strip_prefix(run_dir).unwrap_or(path);
    Ok(FileRecord { path: shown.to_string_lossy().replace('\\', "/"), sha256: sha256_file(path)? })
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: config.hash(),
            config: config.clone(),
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.push((name.to_string(), value));
    }

    pub fn input(&mut self, run_dir: &Path, path: &Path) -> Result<(), Failure> {
        self.inputs.push(record(run_dir, path)?);
        Ok(())
    }

    pub fn output(&mut self, run_dir: &Path, path: &Path) -> Result<(), Failure> {
        self.outputs.push(record(run_dir, path)?);
        Ok(())
    }

    pub fn write(&self, run_dir: &Path, name: &str) -> Result<PathBuf, Failure> {
        let path = run_dir.join(format!("manifest-{name}.json"));
        let text = serde_json::to_string_pretty(self).map_err(|e| Failure::Runtime(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}
