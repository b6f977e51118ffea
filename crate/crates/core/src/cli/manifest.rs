//! Run manifests: the resolved config, content hashes of every input and
//! output artifact, the seed and the tool version.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self> {
        let data = std::fs::read(path)?;
        Ok(Self {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&data)),
            bytes: data.len() as u64,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config: Value,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub created_unix: u64,
    /// Command-specific summary.
    pub extra: Value,
}

/// Collects artifacts while a command runs.
pub struct ManifestBuilder {
    command: String,
    seed: Option<u64>,
    config: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    extra: Value,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: Value) -> Self {
        Self {
            command: command.to_string(),
            seed: None,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            extra: Value::Null,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }

    pub fn inputs_snapshot(&self) -> Vec<PathBuf> {
        self.inputs.clone()
    }

    pub fn extra(&mut self, v: Value) {
        self.extra = v;
    }

    /// Hashes every artifact and writes the manifest to `dest`.
    pub fn write(self, dest: &Path) -> Result<Manifest> {
        let hash = |ps: &[PathBuf]| ps.iter().map(|p| Artifact::of(p)).collect::<Result<Vec<_>>>();
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command,
            seed: self.seed,
            config: self.config,
            inputs: hash(&self.inputs)?,
            outputs: hash(&self.outputs)?,
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            extra: self.extra,
        };
        std::fs::write(dest, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

/// Sidecar manifest path for a single-file output.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".manifest.json");
    PathBuf::from(s)
}
