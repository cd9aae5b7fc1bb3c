use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{manipulate_queries, RetrievalIndex};
use crate::embedder::Dictionary;
use crate::error::{Error, Result};
use crate::manipulator::FeatureGenerator;
use crate::synthdata::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub k: usize,
    pub recall: f64,
    pub hits: usize,
    pub evaluated: usize,
    /// Queries whose instance has no gallery record.
    pub excluded: usize,
}

/// Fraction of queries with a same-instance record among the top k.
pub fn recall_at_k(index: &RetrievalIndex, queries: &Dataset, k: usize) -> Result<RecallReport> {
    let present: HashSet<u64> = index.instance_ids.iter().copied().collect();
    let (mut hits, mut evaluated, mut excluded) = (0, 0, 0);
    for r in &queries.records {
        if !present.contains(&r.instance_id) {
            excluded += 1;
            continue;
        }
        evaluated += 1;
        let q: Vec<f64> = r.feature.iter().map(|&v| f64::from(v)).collect();
        let res = index.search(&q, k)?;
        if res.hits.iter().any(|h| h.instance_id == r.instance_id) {
            hits += 1;
        }
    }
    Ok(RecallReport {
        k,
        recall: if evaluated == 0 { 0.0 } else { hits as f64 / evaluated as f64 },
        hits,
        evaluated,
        excluded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetDraw {
    pub target: usize,
    /// Some gallery record carries the demanded label combination.
    pub reachable: bool,
}

fn full_labels(ds: &Dataset, i: usize) -> Result<Vec<usize>> {
    ds.records[i]
        .labels
        .iter()
        .map(|l| l.ok_or_else(|| Error::Data(format!("query record {i} is not fully labeled"))))
        .collect()
}

/// Target classes for manipulating `attr` on every query: uniform over the
/// classes that differ from the current one and leave the demanded label
/// combination present in the gallery, or uniform over all differing
/// classes (flagged unreachable) when there is none.
pub fn draw_targets(
    index: &RetrievalIndex,
    queries: &Dataset,
    attr: usize,
    seed: u64,
) -> Result<Vec<TargetDraw>> {
    let classes = *queries
        .schema
        .class_counts
        .get(attr)
        .ok_or_else(|| Error::contract(format!("attribute index {attr} out of range")))?;
    let gallery: HashSet<Vec<usize>> = index
        .labels
        .iter()
        .filter_map(|l| l.iter().copied().collect::<Option<Vec<usize>>>())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(attr as u64 + 1);
    let mut out = Vec::with_capacity(queries.len());
    for i in 0..queries.len() {
        let mut labels = full_labels(queries, i)?;
        let current = labels[attr];
        let others: Vec<usize> = (0..classes).filter(|&c| c != current).collect();
        let reachable: Vec<usize> = others
            .iter()
            .copied()
            .filter(|&c| {
                labels[attr] = c;
                gallery.contains(&labels)
            })
            .collect();
        let draw = if reachable.is_empty() {
            TargetDraw {
                target: *others.choose(&mut rng).expect("at least two classes"),
                reachable: false,
            }
        } else {
            TargetDraw {
                target: *reachable.choose(&mut rng).expect("nonempty"),
                reachable: true,
            }
        };
        out.push(draw);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKReport {
    pub attr_type: String,
    pub ks: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub hits: Vec<usize>,
    pub evaluated: usize,
    pub unreachable: usize,
}

/// T@k for manipulating `attr_type`: a query hits when some top-k record's
/// labels equal the query's with the target attribute replaced by the drawn
/// class.
pub fn top_k_accuracy(
    index: &RetrievalIndex,
    queries: &Dataset,
    gen: &dyn FeatureGenerator,
    dictionary: &Dictionary,
    attr_type: &str,
    ks: &[usize],
    seed: u64,
) -> Result<TopKReport> {
    let attr = queries.schema.index_of(attr_type)?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::contract("T@k needs ks >= 1"));
    }
    let draws = draw_targets(index, queries, attr, seed)?;
    let targets: Vec<usize> = draws.iter().map(|d| d.target).collect();
    let manipulated = manipulate_queries(gen, dictionary, &queries.feature_matrix(), &targets)?;
    let kmax = *ks.iter().max().expect("nonempty");
    let mut hits = vec![0usize; ks.len()];
    for (i, draw) in draws.iter().enumerate() {
        let mut want = full_labels(queries, i)?;
        want[attr] = draw.target;
        let res = index.search(manipulated.row_slice(i), kmax)?;
        let first = res.hits.iter().position(|h| {
            index.labels[h.position]
                .iter()
                .zip(&want)
                .all(|(l, w)| *l == Some(*w))
        });
        if let Some(rank) = first {
            for (h, &k) in hits.iter_mut().zip(ks) {
                if rank < k {
                    *h += 1;
                }
            }
        }
    }
    let n = queries.len();
    Ok(TopKReport {
        attr_type: attr_type.to_owned(),
        ks: ks.to_vec(),
        accuracy: hits
            .iter()
            .map(|&h| if n == 0 { 0.0 } else { h as f64 / n as f64 })
            .collect(),
        hits,
        evaluated: n,
        unreachable: draws.iter().filter(|d| !d.reachable).count(),
    })
}

/// Uniform mean over the per-attribute reports, per k.
pub fn combined_top_k(reports: &[TopKReport]) -> Result<Vec<f64>> {
    let Some(first) = reports.first() else {
        return Ok(Vec::new());
    };
    if reports.iter().any(|r| r.ks != first.ks) {
        return Err(Error::contract("T@k reports use different ks"));
    }
    Ok((0..first.ks.len())
        .map(|i| reports.iter().map(|r| r.accuracy[i]).sum::<f64>() / reports.len() as f64)
        .collect())
}
