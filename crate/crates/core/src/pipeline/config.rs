use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::embedder::EmbedderConfig;
use crate::error::{Error, Result};
use crate::manipulator::{ManipConfig, VARIANTS};
use crate::retrieval::{ProbeConfig, DEFAULT_KS};
use crate::synthdata::{AttributeSchema, GenConfig, SplitFractions};

/// Everything a run needs, in one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema: AttributeSchema,
    pub gen: GenConfig,
    pub split: SplitFractions,
    /// Shared embedder settings.
    pub embedder: EmbedderConfig,
    /// Per attribute type replacements for `embedder`.
    pub embedder_overrides: BTreeMap<String, EmbedderConfig>,
    /// Template for every manipulator; target and remaining attributes are
    /// filled in per attribute type.
    pub manipulator: ManipConfig,
    /// Attribute types to train manipulators for. Empty means all.
    pub manipulate: Vec<String>,
    /// Variants run by the ablation sweep.
    pub sweep_variants: Vec<String>,
    pub probe: ProbeConfig,
    pub ks: Vec<usize>,
    /// Drives generation, the split, label sparsification, every training
    /// run and target drawing.
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: AttributeSchema::default(),
            gen: GenConfig::default(),
            split: SplitFractions::default(),
            embedder: EmbedderConfig::default(),
            embedder_overrides: BTreeMap::new(),
            manipulator: ManipConfig::default(),
            manipulate: Vec::new(),
            sweep_variants: VARIANTS.iter().map(|v| v.to_string()).collect(),
            probe: ProbeConfig::default(),
            ks: DEFAULT_KS.to_vec(),
            seed: 0,
            out: PathBuf::from("flam-run"),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        self.gen.validate(&self.schema)?;
        let f = self.split;
        if (f.train + f.query + f.gallery - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions sum to {}, expected 1",
                f.train + f.query + f.gallery
            )));
        }
        for a in self.embedder_overrides.keys().chain(&self.manipulate) {
            self.schema.index_of(a)?;
        }
        for v in &self.sweep_variants {
            self.manipulator.clone().apply_variant(v)?;
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config(format!("ks must be non-empty and positive, got {:?}", self.ks)));
        }
        for a in &self.schema.types {
            self.manipulator_config(a)?.validate(&self.schema)?;
        }
        Ok(())
    }

    pub fn embedder_config(&self, attr: &str) -> EmbedderConfig {
        let mut c = self.embedder_overrides.get(attr).unwrap_or(&self.embedder).clone();
        c.seed = self.seed;
        c
    }

    pub fn manipulator_config(&self, target: &str) -> Result<ManipConfig> {
        let base = ManipConfig::for_target(&self.schema, target)?;
        Ok(ManipConfig {
            target_attr: base.target_attr,
            remaining_attrs: base.remaining_attrs,
            seed: self.seed,
            ..self.manipulator.clone()
        })
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            seed: self.seed,
            ..self.probe.clone()
        }
    }

    /// Attribute types that get a manipulator, in schema order.
    pub fn manipulated_attrs(&self) -> Vec<String> {
        self.schema
            .types
            .iter()
            .filter(|t| self.manipulate.is_empty() || self.manipulate.contains(t))
            .cloned()
            .collect()
    }

    /// Applies `key=value` overrides. Keys are dot paths into the JSON form
    /// (`manipulator.epochs`, `gen.noise`); values parse as JSON and fall
    /// back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for s in sets {
            let s = s.as_ref();
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
            set_path(&mut doc, key, value)?;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("after overrides: {e}")))
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    // a new per-attribute override starts from the shared embedder settings
    let template = (parts[0] == "embedder_overrides").then(|| doc["embedder"].clone());
    let mut cur = doc;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if !map.contains_key(*part) {
                    match &template {
                        Some(t) if i == 1 => map.insert(part.to_string(), t.clone()),
                        _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
                    };
                }
                map.get_mut(*part).expect("present")
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("{key:?}: {part:?} is not an index")))?;
                let len = items.len();
                items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("{key:?}: index {idx} out of {len}")))?
            }
            _ => return Err(Error::Config(format!("{key:?}: cannot descend into a scalar"))),
        };
        if last {
            *cur = value;
            return Ok(());
        }
    }
    Err(Error::Config("empty override key".into()))
}
