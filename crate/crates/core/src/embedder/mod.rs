//! Attribute-specific embedders with learnable class dictionaries.
//!
//! An [`Embedder`] maps a feature `x ∈ R^D` to a unit vector `e ∈ R^k` that
//! should encode a single attribute type. Each class of that type owns a
//! learnable dictionary row `d` (a [`Dictionary`]). Training uses a triplet
//! hinge twice per triple: once with the anchor's dictionary row as anchor
//! against sample embeddings, once with the sample embedding as anchor
//! against dictionary rows.

mod checkpoint;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{collect_grads, Mlp, MlpVars};
use crate::synthdata::Dataset;

pub use checkpoint::{
    load_embedder, log_path, read_embedder, save_embedder, write_embedder, EMBEDDER_MAGIC,
};

/// `φ_a: R^D → R^k`, two affine layers (`D → 4k → k`) with leaky_relu
/// between, output L2-normalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedder {
    pub attr_type: String,
    pub mlp: Mlp,
}

impl Embedder {
    pub fn new<R: Rng + ?Sized>(attr_type: &str, dim: usize, k: usize, rng: &mut R) -> Self {
        Self {
            attr_type: attr_type.to_owned(),
            mlp: Mlp::init(&[dim, 4 * k, k], rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn k(&self) -> usize {
        self.mlp.output_dim()
    }

    /// Graph forward from already-bound weights.
    pub fn forward_bound(vars: &MlpVars, g: &mut Graph, x: Var) -> Result<Var> {
        let y = vars.forward(g, x)?;
        Ok(g.normalize(y))
    }

    /// Forward with frozen weights: no gradient reaches the embedder.
    pub fn forward_frozen(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_dim(g.value(x).cols())?;
        let vars = self.mlp.bind(g, false);
        Self::forward_bound(&vars, g, x)
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.input_dim() {
            return Err(Error::contract(format!(
                "{} embedder expects dim {}, got {d}",
                self.attr_type,
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Embeds every row of `x` (`[n, D]` → `[n, k]`).
    pub fn embed_matrix(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let e = self.forward_frozen(&mut g, xv)?;
        Ok(g.value(e).clone())
    }

    /// `e = φ(x)`, a unit vector of length k.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        Ok(self.embed_matrix(&Tensor::row(x))?.into_data())
    }

    pub fn embed_dataset(&self, ds: &Dataset) -> Result<Tensor> {
        self.embed_matrix(&ds.feature_matrix())
    }
}

/// Per-class learnable vectors `d`, one unit-norm row per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    pub attr_type: String,
    pub vectors: Tensor,
}

impl Dictionary {
    /// Gaussian rows, normalized.
    pub fn new<R: Rng + ?Sized>(attr_type: &str, classes: usize, k: usize, rng: &mut R) -> Self {
        let mut vectors = Tensor::randn(&[classes, k], 1.0, rng);
        vectors.normalize_rows();
        Self {
            attr_type: attr_type.to_owned(),
            vectors,
        }
    }

    pub fn class_count(&self) -> usize {
        self.vectors.rows()
    }

    pub fn k(&self) -> usize {
        self.vectors.cols()
    }

    /// The stored row for `class`.
    pub fn lookup(&self, class: usize) -> Result<&[f64]> {
        if class >= self.class_count() {
            return Err(Error::contract(format!(
                "class {class} out of range for {} ({} classes)",
                self.attr_type,
                self.class_count()
            )));
        }
        Ok(self.vectors.row_slice(class))
    }

    pub fn normalize(&mut self) {
        self.vectors.normalize_rows();
    }
}

/// Trained embedder/dictionary pairs keyed by attribute type.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbedderSet {
    pub pairs: Vec<(Embedder, Dictionary)>,
}

impl EmbedderSet {
    pub fn new(pairs: Vec<(Embedder, Dictionary)>) -> Self {
        Self { pairs }
    }

    pub fn insert(&mut self, embedder: Embedder, dictionary: Dictionary) {
        self.pairs.retain(|(e, _)| e.attr_type != embedder.attr_type);
        self.pairs.push((embedder, dictionary));
    }

    /// The pair for `attr_type`; a missing one is a config error.
    pub fn get(&self, attr_type: &str) -> Result<(&Embedder, &Dictionary)> {
        self.pairs
            .iter()
            .find(|(e, _)| e.attr_type == attr_type)
            .map(|(e, d)| (e, d))
            .ok_or_else(|| Error::Config(format!("no embedder for attribute type {attr_type:?}")))
    }

    pub fn embedder(&self, attr_type: &str) -> Result<&Embedder> {
        Ok(self.get(attr_type)?.0)
    }

    pub fn dictionary(&self, attr_type: &str) -> Result<&Dictionary> {
        Ok(self.get(attr_type)?.1)
    }
}

/// Cosine distance `1 − cos(u, v)`, row-wise.
fn cosine_distance(g: &mut Graph, u: Var, v: Var) -> Result<Var> {
    let c = g.cosine_sim(u, v)?;
    let neg = g.scale(c, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Row-wise `max{0, dist(f, f⁺) − dist(f, f⁻) + μ}` with cosine distance;
/// returns `[rows, 1]`.
pub fn triplet_hinge(g: &mut Graph, f: Var, pos: Var, neg: Var, mu: f64) -> Result<Var> {
    let dp = cosine_distance(g, f, pos)?;
    let dn = cosine_distance(g, f, neg)?;
    let diff = g.sub(dp, dn)?;
    let shifted = g.add_scalar(diff, mu);
    Ok(g.relu(shifted))
}

/// Triplet loss of single vectors.
pub fn triplet_loss(f: &[f64], pos: &[f64], neg: &[f64], mu: f64) -> Result<f64> {
    if f.len() != pos.len() || f.len() != neg.len() {
        return Err(Error::dim(
            "triplet_loss",
            format!("{} / {} / {}", f.len(), pos.len(), neg.len()),
        ));
    }
    let mut g = Graph::new();
    let (a, p, n) = (
        g.constant(Tensor::row(f)),
        g.constant(Tensor::row(pos)),
        g.constant(Tensor::row(neg)),
    );
    let l = triplet_hinge(&mut g, a, p, n, mu)?;
    g.value(l).item()
}

/// Triples over a shared sample matrix: `(anchor, positive, negative)`
/// index into `features` / `classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub features: Tensor,
    pub classes: Vec<usize>,
    pub triples: Vec<(usize, usize, usize)>,
}

impl TripletBatch {
    /// Checks every triple: `class(p) == class(a) != class(n)`.
    pub fn new(features: Tensor, classes: Vec<usize>, triples: Vec<(usize, usize, usize)>) -> Result<Self> {
        if features.rows() != classes.len() {
            return Err(Error::contract(format!(
                "{} samples but {} classes",
                features.rows(),
                classes.len()
            )));
        }
        for &(a, p, n) in &triples {
            let m = classes.len();
            if a >= m || p >= m || n >= m {
                return Err(Error::contract(format!("triple ({a},{p},{n}) out of range")));
            }
            if classes[a] != classes[p] || classes[a] == classes[n] {
                return Err(Error::contract(format!(
                    "triple ({a},{p},{n}) has classes ({},{},{})",
                    classes[a], classes[p], classes[n]
                )));
            }
        }
        Ok(Self {
            features,
            classes,
            triples,
        })
    }

    /// Stacks separate anchor / positive / negative lists.
    pub fn from_lists(
        anchors: &[(Vec<f64>, usize)],
        positives: &[(Vec<f64>, usize)],
        negatives: &[(Vec<f64>, usize)],
    ) -> Result<Self> {
        let m = anchors.len();
        if positives.len() != m || negatives.len() != m {
            return Err(Error::contract("anchor/positive/negative lists differ in length"));
        }
        let rows: Vec<Vec<f64>> = anchors
            .iter()
            .chain(positives)
            .chain(negatives)
            .map(|(v, _)| v.clone())
            .collect();
        let classes = anchors
            .iter()
            .chain(positives)
            .chain(negatives)
            .map(|(_, c)| *c)
            .collect();
        let triples = (0..m).map(|i| (i, m + i, 2 * m + i)).collect();
        Self::new(Tensor::from_rows(&rows)?, classes, triples)
    }

    /// Builds a batch from dataset records; every record must carry a label
    /// for `attr`.
    pub fn from_records(
        ds: &Dataset,
        attr: usize,
        records: &[usize],
        triples: Vec<(usize, usize, usize)>,
    ) -> Result<Self> {
        let mut classes = Vec::with_capacity(records.len());
        for &i in records {
            match ds.records[i].labels[attr] {
                Some(c) => classes.push(c),
                None => {
                    return Err(Error::contract(format!(
                        "record {i} has no {} label; embedder training needs labels",
                        ds.schema.types[attr]
                    )))
                }
            }
        }
        let features = ds.feature_matrix().select_rows(records);
        Self::new(features, classes, triples)
    }
}

/// Mean over triples of `ℓ(d_c, e⁺, e⁻) + ℓ(e, d_c, d_{c⁻})` on the graph.
///
/// `embeddings` are the embedded batch samples (`[m, k]`), `dictionary` the
/// `[classes, k]` dictionary node.
pub fn dual_triplet_loss(
    g: &mut Graph,
    embeddings: Var,
    dictionary: Var,
    classes: &[usize],
    triples: &[(usize, usize, usize)],
    mu: f64,
) -> Result<Var> {
    if triples.is_empty() {
        return Err(Error::contract("empty triplet batch"));
    }
    let a_idx: Vec<usize> = triples.iter().map(|t| t.0).collect();
    let p_idx: Vec<usize> = triples.iter().map(|t| t.1).collect();
    let n_idx: Vec<usize> = triples.iter().map(|t| t.2).collect();
    let anchor_class: Vec<usize> = a_idx.iter().map(|&a| classes[a]).collect();
    let neg_class: Vec<usize> = n_idx.iter().map(|&n| classes[n]).collect();

    let e = g.gather_rows(embeddings, &a_idx)?;
    let e_pos = g.gather_rows(embeddings, &p_idx)?;
    let e_neg = g.gather_rows(embeddings, &n_idx)?;
    let d_pos = g.gather_rows(dictionary, &anchor_class)?;
    let d_neg = g.gather_rows(dictionary, &neg_class)?;

    let dict_anchor = triplet_hinge(g, d_pos, e_pos, e_neg, mu)?;
    let emb_anchor = triplet_hinge(g, e, d_pos, d_neg, mu)?;
    let both = g.add(dict_anchor, emb_anchor)?;
    Ok(g.mean(both))
}

/// Value of the dual triplet loss for `batch`.
pub fn embedder_loss(batch: &TripletBatch, embedder: &Embedder, dictionary: &Dictionary, mu: f64) -> Result<f64> {
    if dictionary.k() != embedder.k() {
        return Err(Error::contract(format!(
            "dictionary k {} != embedder k {}",
            dictionary.k(),
            embedder.k()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(batch.features.clone());
    let e = embedder.forward_frozen(&mut g, x)?;
    let d = g.constant(dictionary.vectors.clone());
    let l = dual_triplet_loss(&mut g, e, d, &batch.classes, &batch.triples, mu)?;
    g.value(l).item()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub k: usize,
    pub mu: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            k: 32,
            mu: 0.2,
            lr: 2e-3,
            epochs: 15,
            batch_size: 128,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderLog {
    pub attr_type: String,
    pub config: EmbedderConfig,
    /// Mean batch loss per epoch.
    pub epoch_loss: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedEmbedder {
    pub embedder: Embedder,
    pub dictionary: Dictionary,
    pub log: EmbedderLog,
}

/// Anchor/positive/negative indices within one batch. Positives are another
/// same-class member when one exists (else the anchor itself); negatives are
/// drawn uniformly from members of a different class. Anchors with no
/// different-class member are skipped.
fn sample_triples<R: Rng + ?Sized>(classes: &[usize], rng: &mut R) -> Vec<(usize, usize, usize)> {
    let mut triples = Vec::with_capacity(classes.len());
    for (a, &c) in classes.iter().enumerate() {
        let same: Vec<usize> = (0..classes.len()).filter(|&j| j != a && classes[j] == c).collect();
        let diff: Vec<usize> = (0..classes.len()).filter(|&j| classes[j] != c).collect();
        if diff.is_empty() {
            continue;
        }
        let p = same.choose(rng).copied().unwrap_or(a);
        let n = *diff.choose(rng).expect("nonempty");
        triples.push((a, p, n));
    }
    triples
}

/// Trains `φ_a` and `d_a` with Adam on the dual triplet loss. Records
/// without a label for `attr_type` are skipped.
pub fn train_embedder(train: &Dataset, attr_type: &str, config: &EmbedderConfig) -> Result<TrainedEmbedder> {
    let attr = train.schema.index_of(attr_type)?;
    let classes_total = train.schema.class_counts[attr];
    if config.k == 0 || config.batch_size < 2 || !(config.mu >= 0.0) || !(config.lr > 0.0) {
        return Err(Error::Config(format!("invalid embedder config {config:?}")));
    }
    let labeled: Vec<usize> = (0..train.len())
        .filter(|&i| train.records[i].labels[attr].is_some())
        .collect();
    let labels: Vec<usize> = labeled
        .iter()
        .map(|&i| train.records[i].labels[attr].expect("filtered"))
        .collect();
    let distinct = {
        let mut seen = vec![false; classes_total];
        labels.iter().for_each(|&c| seen[c] = true);
        seen.iter().filter(|s| **s).count()
    };
    if distinct < 2 {
        return Err(Error::Training(format!(
            "{attr_type}: need at least 2 labeled classes, found {distinct}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut embedder = Embedder::new(attr_type, train.dim(), config.k, &mut rng);
    let mut dictionary = Dictionary::new(attr_type, classes_total, config.k, &mut rng);
    let mut log = EmbedderLog {
        attr_type: attr_type.to_owned(),
        config: config.clone(),
        epoch_loss: Vec::with_capacity(config.epochs),
    };
    if config.epochs == 0 {
        return Ok(TrainedEmbedder {
            embedder,
            dictionary,
            log,
        });
    }

    let features = train.feature_matrix().select_rows(&labeled);
    let mut params: Vec<&Tensor> = embedder.mlp.params();
    params.push(&dictionary.vectors);
    let mut adam = Adam::with_lr(config.lr, &params);

    let mut order: Vec<usize> = (0..labeled.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let classes: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let triples = sample_triples(&classes, &mut rng);
            if triples.is_empty() {
                continue;
            }
            let mut g = Graph::new();
            let x = g.constant(features.select_rows(chunk));
            let vars = embedder.mlp.bind(&mut g, true);
            let dict = g.param(dictionary.vectors.clone());
            let e = Embedder::forward_bound(&vars, &mut g, x)?;
            let loss = dual_triplet_loss(&mut g, e, dict, &classes, &triples, config.mu)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("{attr_type} embedder loss {value}"),
                });
            }
            let grads = g.backward(loss)?;
            let mut all_vars = vars.vars();
            all_vars.push(dict);
            let mut params: Vec<&Tensor> = embedder.mlp.params();
            params.push(&dictionary.vectors);
            let grad_list = collect_grads(&grads, &all_vars, &params);
            let mut params_mut = embedder.mlp.params_mut();
            params_mut.push(&mut dictionary.vectors);
            adam.step(&mut params_mut, &grad_list)?;
            dictionary.normalize();
            total += value;
            batches += 1;
        }
        log.epoch_loss.push(total / batches.max(1) as f64);
    }
    Ok(TrainedEmbedder {
        embedder,
        dictionary,
        log,
    })
}

/// Index of the dictionary row most cosine-similar to `e`; ties go to the
/// lowest index.
pub fn nearest_class(dictionary: &Dictionary, e: &[f64]) -> usize {
    let en = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..dictionary.class_count() {
        let d = dictionary.vectors.row_slice(c);
        let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = d.iter().zip(e).map(|(a, b)| a * b).sum();
        let cos = dot / ((en + crate::autodiff::NORM_EPS) * (dn + crate::autodiff::NORM_EPS));
        if cos > best.1 {
            best = (c, cos);
        }
    }
    best.0
}

/// `argmax_c cos(φ(x), d_c)`.
pub fn pseudo_label(embedder: &Embedder, dictionary: &Dictionary, x: &[f64]) -> Result<usize> {
    let e = embedder.embed(x)?;
    Ok(nearest_class(dictionary, &e))
}

/// Pseudo labels for every row of a pre-embedded `[n, k]` matrix.
pub fn pseudo_label_embeddings(dictionary: &Dictionary, embeddings: &Tensor) -> Vec<usize> {
    (0..embeddings.rows())
        .map(|r| nearest_class(dictionary, embeddings.row_slice(r)))
        .collect()
}

/// `d` for `class`.
pub fn dictionary_lookup(dictionary: &Dictionary, class: usize) -> Result<&[f64]> {
    dictionary.lookup(class)
}

#[cfg(test)]
mod tests;
