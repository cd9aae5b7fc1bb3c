use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    cluster_stats, draw_targets, manipulate_queries, probe_delta, recall_at_k, top_k_accuracy,
    ClusterStat, LinearProbe, ProbeDelta, RecallReport, RetrievalIndex, TopKReport,
};
use crate::embedder::EmbedderSet;
use crate::error::{Error, Result};
use crate::manipulator::FeatureGenerator;
use crate::synthdata::Dataset;

pub const DEFAULT_KS: [usize; 5] = [1, 5, 10, 20, 50];

/// Name of the uniform aggregate over manipulation tasks.
pub const ALL: &str = "All";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KValue {
    pub k: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKEntry {
    /// Attribute type, or `All`.
    pub attr_type: String,
    pub values: Vec<KValue>,
    pub unreachable: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub manipulated_attr: String,
    /// Original queries with their own labels.
    pub pre: Vec<ClusterStat>,
    /// Manipulated queries with the intended labels.
    pub post: Vec<ClusterStat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r_at_k: Vec<KValue>,
    pub t_at_k: Vec<TopKEntry>,
    pub probe_delta: ProbeDelta,
    pub cluster_stats: Vec<ClusterRow>,
    pub unreachable_count: usize,
    /// Queries left out of R@k because their instance is not in the gallery.
    pub excluded_queries: usize,
}

impl EvalReport {
    /// T@k for `attr_type` (or `All`) at `k`.
    pub fn t_at(&self, attr_type: &str, k: usize) -> Option<f64> {
        self.t_at_k
            .iter()
            .find(|e| e.attr_type == attr_type)?
            .values
            .iter()
            .find(|v| v.k == k)
            .map(|v| v.value)
    }

    pub fn r_at(&self, k: usize) -> Option<f64> {
        self.r_at_k.iter().find(|v| v.k == k).map(|v| v.value)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let ks: Vec<usize> = self.r_at_k.iter().map(|v| v.k).collect();
        let head: String = ks.iter().map(|k| format!("{:>8}", format!("@{k}"))).collect();
        let _ = writeln!(s, "{:<12}{head}", "R@k");
        let row: String = self.r_at_k.iter().map(|v| format!("{:>8.3}", v.value)).collect();
        let _ = writeln!(s, "{:<12}{row}", "instance");
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<12}{head}{:>13}", "T@k", "unreachable");
        for e in &self.t_at_k {
            let row: String = e.values.iter().map(|v| format!("{:>8.3}", v.value)).collect();
            let _ = writeln!(s, "{:<12}{row}{:>13}", e.attr_type, e.unreachable);
        }
        let _ = writeln!(s);
        let p = &self.probe_delta;
        let cols: String = p.attr_types.iter().map(|a| format!("{a:>20}")).collect();
        let _ = writeln!(s, "{:<12}{cols}", "probe");
        for r in &p.rows {
            let cells: String = r
                .original
                .iter()
                .zip(&r.manipulated)
                .map(|(o, m)| format!("{:>20}", format!("{o:.3} -> {m:.3}")))
                .collect();
            let _ = writeln!(s, "{:<12}{cells}", r.manipulated_attr);
        }
        let _ = writeln!(s, "avg. diff   {:+.3}", p.average_delta);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<12}{:<10}{:>16}{:>16}", "clusters", "space", "intra pre/post", "inter pre/post");
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        for c in &self.cluster_stats {
            for (pre, post) in c.pre.iter().zip(&c.post) {
                let _ = writeln!(
                    s,
                    "{:<12}{:<10}{:>16}{:>16}",
                    c.manipulated_attr,
                    pre.attr_type,
                    format!("{}/{}", f(pre.intra), f(post.intra)),
                    format!("{}/{}", f(pre.inter), f(post.inter)),
                );
            }
        }
        s
    }
}

fn recall_values(reports: &[RecallReport]) -> Vec<KValue> {
    reports
        .iter()
        .map(|r| KValue {
            k: r.k,
            value: r.recall,
        })
        .collect()
}

fn entry(report: &TopKReport) -> TopKEntry {
    TopKEntry {
        attr_type: report.attr_type.clone(),
        values: report
            .ks
            .iter()
            .zip(&report.accuracy)
            .map(|(&k, &value)| KValue { k, value })
            .collect(),
        unreachable: report.unreachable,
    }
}

/// Full evaluation. `manipulators` pairs each attribute type with the
/// generator that manipulates it; the dictionaries come from `embedders`.
pub fn evaluate(
    index: &RetrievalIndex,
    queries: &Dataset,
    embedders: &EmbedderSet,
    manipulators: &[(&str, &dyn FeatureGenerator)],
    probe: &LinearProbe,
    ks: &[usize],
    seed: u64,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Data("no queries to evaluate".into()));
    }
    let recalls = ks
        .iter()
        .map(|&k| recall_at_k(index, queries, k))
        .collect::<Result<Vec<_>>>()?;
    let excluded_queries = recalls.first().map_or(0, |r| r.excluded);
    let x = queries.feature_matrix();
    let original_labels: Vec<Vec<Option<usize>>> = queries.records.iter().map(|r| r.labels.clone()).collect();
    let pre = cluster_stats(embedders, &queries.schema.types, &x, &original_labels)?;

    let mut tk = Vec::new();
    let mut probe_rows = Vec::new();
    let mut clusters = Vec::new();
    for (attr_type, gen) in manipulators {
        let attr = queries.schema.index_of(attr_type)?;
        let dictionary = embedders.dictionary(attr_type)?;
        let draws = draw_targets(index, queries, attr, seed)?;
        let targets: Vec<usize> = draws.iter().map(|d| d.target).collect();
        tk.push(top_k_accuracy(index, queries, *gen, dictionary, attr_type, ks, seed)?);
        probe_rows.push(probe_delta(probe, queries, *gen, dictionary, attr_type, &targets)?);
        let x_tilde = manipulate_queries(*gen, dictionary, &x, &targets)?;
        let intended: Vec<Vec<Option<usize>>> = original_labels
            .iter()
            .zip(&targets)
            .map(|(l, &t)| {
                let mut l = l.clone();
                l[attr] = Some(t);
                l
            })
            .collect();
        clusters.push(ClusterRow {
            manipulated_attr: attr_type.to_string(),
            pre: pre.clone(),
            post: cluster_stats(embedders, &queries.schema.types, &x_tilde, &intended)?,
        });
    }
    let mut t_at_k: Vec<TopKEntry> = tk.iter().map(entry).collect();
    if !tk.is_empty() {
        let all = super::combined_top_k(&tk)?;
        t_at_k.push(TopKEntry {
            attr_type: ALL.into(),
            values: ks.iter().zip(all).map(|(&k, value)| KValue { k, value }).collect(),
            unreachable: tk.iter().map(|r| r.unreachable).sum(),
        });
    }
    Ok(EvalReport {
        r_at_k: recall_values(&recalls),
        unreachable_count: tk.iter().map(|r| r.unreachable).sum(),
        t_at_k,
        probe_delta: ProbeDelta::from_rows(queries.schema.types.clone(), probe_rows),
        cluster_stats: clusters,
        excluded_queries,
    })
}
