//! Exact cosine search over a gallery, plus the evaluation metrics: R@k
//! for instance retrieval, T@k for attribute manipulation, a linear probe,
//! and embedding cluster statistics.

mod cluster;
mod metrics;
mod probe;
mod report;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::embedder::Dictionary;
use crate::error::{Error, Result};
use crate::manipulator::FeatureGenerator;
use crate::synthdata::Dataset;

pub use cluster::{cluster_stats, intra_inter, ClusterStat};
pub use metrics::{
    combined_top_k, draw_targets, recall_at_k, top_k_accuracy, RecallReport, TargetDraw, TopKReport,
};
pub use probe::{probe_delta, train_probe, LinearProbe, ProbeConfig, ProbeDelta, ProbeRow};
pub use report::{evaluate, ClusterRow, EvalReport, KValue, TopKEntry, ALL, DEFAULT_KS};

/// Gallery rows stored as f32, unit-norm, in record order.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    dim: usize,
    rows: Vec<f32>,
    /// f64 norms of the stored f32 rows.
    norms: Vec<f64>,
    pub instance_ids: Vec<u64>,
    pub labels: Vec<Vec<Option<usize>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    /// Row position in the gallery.
    pub position: usize,
    pub instance_id: u64,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub hits: Vec<Hit>,
    /// `k` exceeded the gallery size and every row was returned.
    pub truncated: bool,
}

fn norm64(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Rows already within 1e-6 of unit norm are stored unchanged; others are
/// rescaled.
pub fn build_index(gallery: &Dataset) -> Result<RetrievalIndex> {
    if gallery.is_empty() {
        return Err(Error::Data("cannot index an empty gallery".into()));
    }
    let dim = gallery.dim();
    let mut rows = Vec::with_capacity(gallery.len() * dim);
    let mut norms = Vec::with_capacity(gallery.len());
    for (i, r) in gallery.records.iter().enumerate() {
        if r.feature.len() != dim {
            return Err(Error::Data(format!("gallery record {i} has dim {}", r.feature.len())));
        }
        let n = norm64(r.feature.iter().map(|&v| f64::from(v)));
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Data(format!(
                "gallery record {i} (instance {}) has norm {n}",
                r.instance_id
            )));
        }
        let start = rows.len();
        if (n - 1.0).abs() > 1e-6 {
            rows.extend(r.feature.iter().map(|&v| (f64::from(v) / n) as f32));
        } else {
            rows.extend_from_slice(&r.feature);
        }
        norms.push(norm64(rows[start..].iter().map(|&v| f64::from(v))));
    }
    Ok(RetrievalIndex {
        dim,
        rows,
        norms,
        instance_ids: gallery.records.iter().map(|r| r.instance_id).collect(),
        labels: gallery.records.iter().map(|r| r.labels.clone()).collect(),
    })
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Little-endian dump of the stored rows, ids and labels.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.rows.len() * 4 + self.len() * 8);
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (id, labels) in self.instance_ids.iter().zip(&self.labels) {
            out.extend_from_slice(&id.to_le_bytes());
            for l in labels {
                out.extend_from_slice(&l.map_or(-1i64, |c| c as i64).to_le_bytes());
            }
        }
        out
    }

    /// Cosine similarity of `q` to every row, in row order.
    pub fn similarities(&self, q: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.dim {
            return Err(Error::contract(format!(
                "query has dim {}, index has {}",
                q.len(),
                self.dim
            )));
        }
        let qn = norm64(q.iter().copied());
        Ok((0..self.len())
            .map(|i| {
                if qn == 0.0 {
                    return 0.0;
                }
                let dot: f64 = self.row(i).iter().zip(q).map(|(&r, &x)| f64::from(r) * x).sum();
                dot / (qn * self.norms[i])
            })
            .collect())
    }

    /// Exact top-k by cosine; ties go to the lower row position.
    pub fn search(&self, q: &[f64], k: usize) -> Result<SearchResult> {
        if k == 0 {
            return Err(Error::contract("search needs k >= 1"));
        }
        let sims = self.similarities(q)?;
        let truncated = k > self.len();
        let take = k.min(self.len());
        let mut order: Vec<usize> = (0..self.len()).collect();
        let cmp = |a: &usize, b: &usize| sims[*b].total_cmp(&sims[*a]).then(a.cmp(b));
        if take < order.len() {
            order.select_nth_unstable_by(take - 1, cmp);
            order.truncate(take);
        }
        order.sort_by(cmp);
        Ok(SearchResult {
            hits: order
                .into_iter()
                .map(|p| Hit {
                    position: p,
                    instance_id: self.instance_ids[p],
                    similarity: sims[p],
                })
                .collect(),
            truncated,
        })
    }
}

/// `x̃ = G(x, d_class)` with the class dictionary row as conditioning.
pub fn manipulate_query(
    gen: &dyn FeatureGenerator,
    dictionary: &Dictionary,
    x: &[f64],
    target_class: usize,
) -> Result<Vec<f64>> {
    let d = dictionary.lookup(target_class)?;
    Ok(gen
        .generate_matrix(&Tensor::row(x), &Tensor::row(d))?
        .into_data())
}

/// Batched [`manipulate_query`], one target class per row of `x`.
pub fn manipulate_queries(
    gen: &dyn FeatureGenerator,
    dictionary: &Dictionary,
    x: &Tensor,
    targets: &[usize],
) -> Result<Tensor> {
    if targets.len() != x.rows() {
        return Err(Error::contract(format!("{} targets for {} queries", targets.len(), x.rows())));
    }
    let rows = targets
        .iter()
        .map(|&t| dictionary.lookup(t).map(<[f64]>::to_vec))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Ok(Tensor::zeros(&[0, x.cols()]));
    }
    gen.generate_matrix(x, &Tensor::from_rows(&rows)?)
}
