//! Synthetic "learned feature" datasets with controllable attribute structure.
//!
//! Each instance draws one class per attribute type and a style vector; each
//! view of the instance is
//!
//! ```text
//! raw = Σ_a s_a · P_a[:, class_a] + style + ε,   ε ~ N(0, σ² I)
//! ```
//!
//! optionally rotated by a fixed random orthogonal matrix, then
//! L2-normalized.

mod format;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{load_features, read_features, save_features, write_features, FEATURE_MAGIC};

/// Attribute types and their class counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub types: Vec<String>,
    pub class_counts: Vec<usize>,
}

impl Default for AttributeSchema {
    fn default() -> Self {
        Self {
            types: vec!["shape".into(), "color".into(), "pattern".into()],
            class_counts: vec![10, 10, 10],
        }
    }
}

impl AttributeSchema {
    pub fn new(types: Vec<String>, class_counts: Vec<usize>) -> Result<Self> {
        let schema = Self {
            types,
            class_counts,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.types.len() < 2 {
            return Err(Error::Config(format!(
                "schema needs at least 2 attribute types, got {}",
                self.types.len()
            )));
        }
        if self.types.len() != self.class_counts.len() {
            return Err(Error::Config(format!(
                "{} attribute types but {} class counts",
                self.types.len(),
                self.class_counts.len()
            )));
        }
        if let Some((t, c)) = self
            .types
            .iter()
            .zip(&self.class_counts)
            .find(|(_, &c)| c < 2)
        {
            return Err(Error::Config(format!(
                "attribute type {t:?} has {c} classes, needs at least 2"
            )));
        }
        for (i, t) in self.types.iter().enumerate() {
            if self.types[..i].contains(t) {
                return Err(Error::Config(format!("duplicate attribute type {t:?}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn index_of(&self, attr: &str) -> Result<usize> {
        self.types
            .iter()
            .position(|t| t == attr)
            .ok_or_else(|| Error::Config(format!("attribute type {attr:?} not in schema")))
    }

    pub fn class_count(&self, attr: &str) -> Result<usize> {
        Ok(self.class_counts[self.index_of(attr)?])
    }

    pub fn total_classes(&self) -> usize {
        self.class_counts.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mixing {
    None,
    RandomRotation,
}

/// Couples the class of `second` to the class of `first` with probability
/// `strength`: when coupled, `class(second) = class(first) mod count(second)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCorrelation {
    pub first: String,
    pub second: String,
    pub strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub dim: usize,
    pub instances: usize,
    pub views: usize,
    /// Signal strength per attribute type, in schema order.
    pub signal: Vec<f64>,
    pub style: f64,
    pub noise: f64,
    pub mixing: Mixing,
    pub label_density: f64,
    pub correlations: Vec<ClassCorrelation>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            instances: 3750,
            views: 2,
            signal: vec![1.0, 1.0, 1.0],
            style: 0.25,
            noise: 0.05,
            mixing: Mixing::None,
            label_density: 1.0,
            correlations: Vec::new(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        schema.validate()?;
        if self.dim == 0 {
            return Err(Error::Config("feature dim must be positive".into()));
        }
        if self.views == 0 {
            return Err(Error::Config("views per instance must be positive".into()));
        }
        if self.signal.len() != schema.len() {
            return Err(Error::Config(format!(
                "{} signal strengths for {} attribute types",
                self.signal.len(),
                schema.len()
            )));
        }
        if let Some(s) = self.signal.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("signal strength must be > 0, got {s}")));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {}", self.noise)));
        }
        if !(self.style >= 0.0 && self.style.is_finite()) {
            return Err(Error::Config(format!("style strength must be >= 0, got {}", self.style)));
        }
        if !(0.0..=1.0).contains(&self.label_density) {
            return Err(Error::Config(format!(
                "label_density must lie in [0, 1], got {}",
                self.label_density
            )));
        }
        for c in &self.correlations {
            schema.index_of(&c.first)?;
            schema.index_of(&c.second)?;
            if c.first == c.second {
                return Err(Error::Config(format!("correlation of {:?} with itself", c.first)));
            }
            if !(0.0..=1.0).contains(&c.strength) {
                return Err(Error::Config(format!(
                    "class_correlation must lie in [0, 1], got {}",
                    c.strength
                )));
            }
        }
        if self.mixing == Mixing::None && self.dim < schema.total_classes() {
            return Err(Error::Config(format!(
                "dim {} is smaller than the {} total classes; prototypes would collide without mixing",
                self.dim,
                schema.total_classes()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub feature: Vec<f32>,
    pub instance_id: u64,
    /// One entry per attribute type; `None` is an absent label.
    pub labels: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: AttributeSchema,
    pub records: Vec<FeatureRecord>,
    pub config: GenConfig,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.records
            .first()
            .map_or(self.config.dim, |r| r.feature.len())
    }

    /// Features as a row-major `f64` matrix, `[len, dim]`.
    pub fn feature_matrix(&self) -> crate::autodiff::Tensor {
        let d = self.dim();
        let data = self
            .records
            .iter()
            .flat_map(|r| r.feature.iter().map(|&v| f64::from(v)))
            .collect();
        crate::autodiff::Tensor::matrix(self.records.len(), d, data).expect("uniform dims")
    }

    /// Labels of one attribute type, by record.
    pub fn labels_of(&self, attr: usize) -> Vec<Option<usize>> {
        self.records.iter().map(|r| r.labels[attr]).collect()
    }

    /// Record indices grouped by instance, in order of first appearance.
    pub fn instances(&self) -> Vec<(u64, Vec<usize>)> {
        let mut order: Vec<u64> = Vec::new();
        let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            groups
                .entry(r.instance_id)
                .or_insert_with(|| {
                    order.push(r.instance_id);
                    Vec::new()
                })
                .push(i);
        }
        order
            .into_iter()
            .map(|id| {
                let idx = groups.remove(&id).expect("grouped");
                (id, idx)
            })
            .collect()
    }

    /// Drops labels per instance and attribute type with probability
    /// `1 - density`, keeping all views of an instance consistent.
    pub fn with_label_density(&self, density: f64, seed: u64) -> Result<Dataset> {
        if !(0.0..=1.0).contains(&density) {
            return Err(Error::Config(format!("label density {density} outside [0, 1]")));
        }
        let mut rng = stream(seed, Stream::Sparsify);
        let mut out = self.clone();
        let n = self.schema.len();
        for (_, idx) in self.instances() {
            let keep: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < density).collect();
            for &i in &idx {
                for (a, k) in keep.iter().enumerate() {
                    if !k {
                        out.records[i].labels[a] = None;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Records at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            config: self.config.clone(),
            seed: self.seed,
        }
    }

    /// Checks the record-level invariants: finite nonzero features of one
    /// dimension, labels in range, and identical labels across an instance.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (i, r) in self.records.iter().enumerate() {
            if r.feature.len() != d {
                return Err(Error::Data(format!("record {i} has dim {}, expected {d}", r.feature.len())));
            }
            if r.feature.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("record {i} has a non-finite feature")));
            }
            if r.feature.iter().all(|&v| v == 0.0) {
                return Err(Error::Data(format!("record {i} has a zero-norm feature")));
            }
            if r.labels.len() != self.schema.len() {
                return Err(Error::Data(format!("record {i} has {} labels", r.labels.len())));
            }
            for (a, l) in r.labels.iter().enumerate() {
                if let Some(c) = l {
                    if *c >= self.schema.class_counts[a] {
                        return Err(Error::Data(format!(
                            "record {i}: label {c} out of range for {:?}",
                            self.schema.types[a]
                        )));
                    }
                }
            }
        }
        for (id, idx) in self.instances() {
            let first = &self.records[idx[0]].labels;
            if idx.iter().any(|&i| &self.records[i].labels != first) {
                return Err(Error::Data(format!("instance {id} has inconsistent labels")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Stream {
    Prototypes = 1,
    Rotation = 2,
    Instances = 3,
    ViewNoise = 4,
    Labels = 5,
    Split = 6,
    Sparsify = 7,
}

/// Independent deterministic RNG stream per purpose, so changing one knob
/// (e.g. mixing) does not perturb the draws of another.
fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

fn gaussian_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..cols)
        .map(|_| (0..rows).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

/// Modified Gram–Schmidt on the columns (requires `cols <= rows`).
fn orthonormalize(cols: &mut [Vec<f64>]) {
    for i in 0..cols.len() {
        for j in 0..i {
            let (done, rest) = cols.split_at_mut(i);
            let q = &done[j];
            let v = &mut rest[0];
            let p: f64 = q.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(x, qx)| *x -= p * qx);
        }
        normalize(&mut cols[i]);
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Class prototypes, one column per (type, class), flattened in schema order.
fn prototypes(config: &GenConfig, schema: &AttributeSchema, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, Stream::Prototypes);
    let mut cols = gaussian_columns(config.dim, schema.total_classes(), &mut rng);
    if config.dim >= cols.len() {
        orthonormalize(&mut cols);
    } else {
        cols.iter_mut().for_each(|c| normalize(c));
    }
    cols
}

/// Random orthogonal `dim × dim` matrix, row-major.
fn rotation(dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, Stream::Rotation);
    let mut cols = gaussian_columns(dim, dim, &mut rng);
    orthonormalize(&mut cols);
    // columns of Q; return rows of Q for y = Q x
    (0..dim)
        .map(|r| (0..dim).map(|c| cols[c][r]).collect())
        .collect()
}

/// Class draws for one instance, honouring the configured correlations.
fn draw_classes(config: &GenConfig, schema: &AttributeSchema, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut classes: Vec<usize> = schema
        .class_counts
        .iter()
        .map(|&c| rng.random_range(0..c))
        .collect();
    for corr in &config.correlations {
        let u: f64 = rng.random();
        if u < corr.strength {
            let a = schema.index_of(&corr.first).expect("validated");
            let b = schema.index_of(&corr.second).expect("validated");
            classes[b] = classes[a] % schema.class_counts[b];
        }
    }
    classes
}

/// Generates a dataset as a pure function of `(config, schema, seed)`.
pub fn generate(config: &GenConfig, schema: &AttributeSchema, seed: u64) -> Result<Dataset> {
    config.validate(schema)?;
    let d = config.dim;
    let protos = prototypes(config, schema, seed);
    let rot = (config.mixing == Mixing::RandomRotation).then(|| rotation(d, seed));
    let mut inst_rng = stream(seed, Stream::Instances);
    let mut noise_rng = stream(seed, Stream::ViewNoise);
    let mut label_rng = stream(seed, Stream::Labels);
    let style = Normal::new(0.0, config.style).expect("validated style");
    let noise = Normal::new(0.0, config.noise).expect("validated noise");

    let offsets: Vec<usize> = schema
        .class_counts
        .iter()
        .scan(0, |acc, &c| {
            let o = *acc;
            *acc += c;
            Some(o)
        })
        .collect();

    let mut records = Vec::with_capacity(config.instances * config.views);
    for inst in 0..config.instances {
        let classes = draw_classes(config, schema, &mut inst_rng);
        let style_vec: Vec<f64> = (0..d).map(|_| style.sample(&mut inst_rng)).collect();
        let labels: Vec<Option<usize>> = classes
            .iter()
            .map(|&c| (label_rng.random::<f64>() < config.label_density).then_some(c))
            .collect();

        let mut base = style_vec;
        for (a, &c) in classes.iter().enumerate() {
            let col = &protos[offsets[a] + c];
            let s = config.signal[a];
            base.iter_mut().zip(col).for_each(|(b, p)| *b += s * p);
        }
        for _ in 0..config.views {
            let mut raw: Vec<f64> = base.iter().map(|b| b + noise.sample(&mut noise_rng)).collect();
            if let Some(q) = &rot {
                raw = q
                    .iter()
                    .map(|row| row.iter().zip(&raw).map(|(a, b)| a * b).sum())
                    .collect();
            }
            normalize(&mut raw);
            if raw.iter().all(|&v| v == 0.0) {
                return Err(Error::Data(format!("instance {inst} produced a zero feature")));
            }
            records.push(FeatureRecord {
                feature: raw.iter().map(|&v| v as f32).collect(),
                instance_id: inst as u64,
                labels: labels.clone(),
            });
        }
    }
    Ok(Dataset {
        schema: schema.clone(),
        records,
        config: config.clone(),
        seed,
    })
}

/// Train / query / gallery fractions of the instances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub query: f64,
    pub gallery: f64,
}

impl Default for SplitFractions {
    /// 2500 train instances, 500 query instances (one query view, the other
    /// views in the gallery) and 750 gallery-only instances out of 3750.
    fn default() -> Self {
        Self {
            train: 2.0 / 3.0,
            query: 2.0 / 15.0,
            gallery: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub query: Dataset,
    pub gallery: Dataset,
}

/// Splits by instance. Query instances contribute their first view to the
/// query set and the remaining views to the gallery; train instances are
/// disjoint from both.
pub fn split(dataset: &Dataset, fractions: SplitFractions, seed: u64) -> Result<Split> {
    let SplitFractions {
        train,
        query,
        gallery,
    } = fractions;
    if [train, query, gallery].iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::Config(format!("split fractions must lie in [0, 1]: {fractions:?}")));
    }
    if (train + query + gallery - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions sum to {}, expected 1",
            train + query + gallery
        )));
    }
    let mut instances = dataset.instances();
    let n = instances.len();
    let mut rng = stream(seed, Stream::Split);
    instances.shuffle(&mut rng);

    let n_train = ((train * n as f64).round() as usize).min(n);
    let n_query = ((query * n as f64).round() as usize).min(n - n_train);
    if query > 0.0 && n_query == 0 {
        return Err(Error::Split(format!(
            "{n} instances are too few for a query fraction of {query}"
        )));
    }

    let mut train_idx = Vec::new();
    let mut query_idx = Vec::new();
    let mut gallery_idx = Vec::new();
    for (pos, (id, idx)) in instances.iter().enumerate() {
        if pos < n_train {
            train_idx.extend(idx);
        } else if pos < n_train + n_query {
            if idx.len() < 2 {
                return Err(Error::Split(format!(
                    "query instance {id} has a single view; it cannot also appear in the gallery"
                )));
            }
            query_idx.push(idx[0]);
            gallery_idx.extend(&idx[1..]);
        } else {
            gallery_idx.extend(idx);
        }
    }
    train_idx.sort_unstable();
    query_idx.sort_unstable();
    gallery_idx.sort_unstable();
    Ok(Split {
        train: dataset.subset(&train_idx),
        query: dataset.subset(&query_idx),
        gallery: dataset.subset(&gallery_idx),
    })
}
