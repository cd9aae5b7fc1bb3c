use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TOOL_VERSION: &str = concat!("flam ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl Artifact {
    pub fn hash_file(root: &Path, rel: &str) -> Result<Self> {
        let path = root.join(rel);
        let data = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path: rel.to_owned(),
            sha256: hex::encode(Sha256::digest(&data)),
            bytes: data.len() as u64,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub wall_clock_secs: f64,
    pub artifacts: Vec<Artifact>,
    /// Stage specific facts, e.g. the manipulator variant.
    #[serde(default)]
    pub details: serde_json::Value,
}

/// `manifest.json`: one record per stage, replaced when the stage reruns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    /// Config of the most recent stage.
    pub config: serde_json::Value,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn new() -> Self {
        Self {
            tool_version: TOOL_VERSION.into(),
            config: serde_json::Value::Null,
            stages: BTreeMap::new(),
        }
    }

    /// Reads `path`, or starts empty when it does not exist.
    pub fn load_or_new(path: &Path) -> Result<Self> {
        match std::fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new()),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Artifact hashes by path across all stages.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.stages
            .values()
            .flat_map(|s| &s.artifacts)
            .map(|a| (a.path.clone(), a.sha256.clone()))
            .collect()
    }
}

impl Default for Manifest {
    fn default() -> Self {
        Self::new()
    }
}
