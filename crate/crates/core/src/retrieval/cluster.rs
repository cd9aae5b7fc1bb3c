use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::embedder::EmbedderSet;
use crate::error::{Error, Result};
use crate::manipulator::cosine;

/// Mean pairwise cosine in one attribute's embedding space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterStat {
    pub attr_type: String,
    /// Over same-class pairs; `None` when no class has two members.
    pub intra: Option<f64>,
    /// Over different-class pairs; `None` when only one class is present.
    pub inter: Option<f64>,
}

/// Pooled mean cosine over same-class and different-class pairs of rows.
/// Rows without a label are ignored.
pub fn intra_inter(embeddings: &Tensor, labels: &[Option<usize>]) -> (Option<f64>, Option<f64>) {
    let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for (p, &i) in idx.iter().enumerate() {
        for &j in &idx[p + 1..] {
            let c = cosine(embeddings.row_slice(i), embeddings.row_slice(j));
            if labels[i] == labels[j] {
                intra += c;
                n_intra += 1;
            } else {
                inter += c;
                n_inter += 1;
            }
        }
    }
    (
        (n_intra > 0).then(|| intra / n_intra as f64),
        (n_inter > 0).then(|| inter / n_inter as f64),
    )
}

/// Intra/inter-class cosine for each attribute in `attr_types`, measured in
/// that attribute's embedding space. `labels[i][a]` labels row `i` for
/// `attr_types[a]`.
pub fn cluster_stats(
    embedders: &EmbedderSet,
    attr_types: &[String],
    features: &Tensor,
    labels: &[Vec<Option<usize>>],
) -> Result<Vec<ClusterStat>> {
    if labels.len() != features.rows() {
        return Err(Error::contract("label rows differ from feature rows"));
    }
    attr_types
        .iter()
        .enumerate()
        .map(|(a, name)| {
            let emb = embedders.embedder(name)?.embed_matrix(features)?;
            let col: Vec<Option<usize>> = labels.iter().map(|l| l.get(a).copied().flatten()).collect();
            let (intra, inter) = intra_inter(&emb, &col);
            Ok(ClusterStat {
                attr_type: name.clone(),
                intra,
                inter,
            })
        })
        .collect()
}
