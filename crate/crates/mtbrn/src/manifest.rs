//! Run manifests: what a command read, what it wrote, and with which settings.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::formats::{read_json, sha256_file, write_json};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// File path as given on the command line, mapped to its SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_ms: u64,
}

pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: &impl Serialize, seed: Option<u64>) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_owned(),
                config: serde_json::to_value(config).expect("config serializes"),
                seed,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                wall_time_ms: 0,
            },
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.manifest.outputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn finish(mut self, path: &Path) -> Result<RunManifest> {
        self.manifest.wall_time_ms = self.started.elapsed().as_millis() as u64;
        write_json(path, &self.manifest)?;
        Ok(self.manifest)
    }
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Equal in everything except wall time.
    pub fn same_run(&self, other: &Self) -> bool {
        RunManifest { wall_time_ms: 0, ..self.clone() } == RunManifest { wall_time_ms: 0, ..other.clone() }
    }
}
