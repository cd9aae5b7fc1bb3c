use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manipulate_queries;
use crate::autodiff::{Adam, Graph, Tensor};
use crate::embedder::Dictionary;
use crate::error::{Error, Result};
use crate::manipulator::FeatureGenerator;
use crate::nn::Linear;
use crate::synthdata::{AttributeSchema, Dataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-2,
            batch_size: 128,
            seed: 0,
        }
    }
}

/// One affine classifier `R^D → classes` per attribute type.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub attr_types: Vec<String>,
    pub heads: Vec<Linear>,
}

impl LinearProbe {
    pub fn untrained(schema: &AttributeSchema, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            attr_types: schema.types.clone(),
            heads: schema
                .class_counts
                .iter()
                .map(|&c| Linear::init(dim, c, &mut rng))
                .collect(),
        }
    }

    fn head(&self, attr_type: &str) -> Result<&Linear> {
        self.attr_types
            .iter()
            .position(|a| a == attr_type)
            .map(|i| &self.heads[i])
            .ok_or_else(|| Error::Config(format!("probe has no head for {attr_type:?}")))
    }

    /// Argmax class per row; ties go to the lowest index.
    pub fn predict(&self, attr_type: &str, x: &Tensor) -> Result<Vec<usize>> {
        let head = self.head(attr_type)?;
        let mut g = Graph::new();
        let vars = head.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let logits = vars.forward(&mut g, xv)?;
        let t = g.value(logits);
        Ok((0..t.rows())
            .map(|r| {
                let row = t.row_slice(r);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    pub fn accuracy(&self, attr_type: &str, x: &Tensor, labels: &[usize]) -> Result<f64> {
        if labels.len() != x.rows() {
            return Err(Error::contract("label count differs from row count"));
        }
        if labels.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(attr_type, x)?;
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
    }
}

/// Fits each head by cross-entropy on the records labeled for it.
pub fn train_probe(train: &Dataset, config: &ProbeConfig) -> Result<LinearProbe> {
    if train.is_empty() {
        return Err(Error::Data("probe training set is empty".into()));
    }
    let mut probe = LinearProbe::untrained(&train.schema, train.dim(), config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let features = train.feature_matrix();
    for (a, head) in probe.heads.iter_mut().enumerate() {
        let labeled: Vec<usize> = (0..train.len())
            .filter(|&i| train.records[i].labels[a].is_some())
            .collect();
        if labeled.is_empty() {
            return Err(Error::Data(format!("no {} labels to train the probe", train.schema.types[a])));
        }
        let mut adam = Adam::with_lr(config.lr, &[&head.weight, &head.bias]);
        let mut order = labeled.clone();
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size.max(1)) {
                let y: Vec<usize> = chunk
                    .iter()
                    .map(|&i| train.records[i].labels[a].expect("filtered"))
                    .collect();
                let mut g = Graph::new();
                let vars = head.bind(&mut g, true);
                let x = g.constant(features.select_rows(chunk));
                let logits = vars.forward(&mut g, x)?;
                let loss = g.cross_entropy(logits, &y)?;
                let grads = g.backward(loss)?;
                let gw = grads.get_or_zeros(vars.weight, &head.weight);
                let gb = grads.get_or_zeros(vars.bias, &head.bias);
                adam.step(&mut [&mut head.weight, &mut head.bias], &[gw, gb])?;
            }
        }
    }
    Ok(probe)
}

/// Probe accuracy against the intended labels of one manipulation task,
/// per attribute type (schema order).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub manipulated_attr: String,
    pub original: Vec<f64>,
    pub manipulated: Vec<f64>,
}

impl ProbeRow {
    fn target_delta(&self, attr_types: &[String]) -> f64 {
        let i = attr_types
            .iter()
            .position(|a| *a == self.manipulated_attr)
            .expect("row attribute is in the schema");
        self.manipulated[i] - self.original[i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeDelta {
    pub attr_types: Vec<String>,
    pub rows: Vec<ProbeRow>,
    /// Mean over rows of the target attribute's accuracy change.
    pub average_delta: f64,
}

impl ProbeDelta {
    pub fn from_rows(attr_types: Vec<String>, rows: Vec<ProbeRow>) -> Self {
        let average_delta = if rows.is_empty() {
            0.0
        } else {
            rows.iter().map(|r| r.target_delta(&attr_types)).sum::<f64>() / rows.len() as f64
        };
        Self {
            attr_types,
            rows,
            average_delta,
        }
    }
}

/// Manipulates `attr_type` of every query to `targets[i]` and scores the
/// probe on original and manipulated features against the intended labels
/// (target class for `attr_type`, original classes elsewhere).
pub fn probe_delta(
    probe: &LinearProbe,
    queries: &Dataset,
    gen: &dyn FeatureGenerator,
    dictionary: &Dictionary,
    attr_type: &str,
    targets: &[usize],
) -> Result<ProbeRow> {
    let attr = queries.schema.index_of(attr_type)?;
    let x = queries.feature_matrix();
    let x_tilde = manipulate_queries(gen, dictionary, &x, targets)?;
    let mut original = Vec::with_capacity(queries.schema.len());
    let mut manipulated = Vec::with_capacity(queries.schema.len());
    for (a, name) in queries.schema.types.iter().enumerate() {
        let intended = (0..queries.len())
            .map(|i| {
                if a == attr {
                    Ok(targets[i])
                } else {
                    queries.records[i].labels[a]
                        .ok_or_else(|| Error::Data(format!("query record {i} lacks a {name} label")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        original.push(probe.accuracy(name, &x, &intended)?);
        manipulated.push(probe.accuracy(name, &x_tilde, &intended)?);
    }
    Ok(ProbeRow {
        manipulated_attr: attr_type.to_owned(),
        original,
        manipulated,
    })
}
