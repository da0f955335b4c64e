//! Fine-grained feature mining: per-identity clustering into pseudo labels,
//! per-channel attribute statistics, and the attribute-aware classification
//! loss with identity-smoothed targets.

mod cluster;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::featnet::{l2_normalize, FeatureMap};
use crate::tensor::Tensor;

pub use cluster::{cluster_identities, dbscan, kmeans, ClusterMethod, ClusterParams, ClusterTable, Metric};

/// Where the fine-grained labels come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    #[default]
    Clusters,
    /// Ground-truth clothing ids stand in for the clusters.
    Clothing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FfmConfig {
    pub cluster: ClusterParams,
    pub labels: LabelSource,
    /// Softmax temperature of the attribute classifier.
    pub tau: f64,
    /// Mass spread over the other clusters of the same identity.
    pub epsilon: f64,
    /// Cosine classifier: L2-normalize embeddings and classifier rows.
    pub normalize: bool,
}

impl Default for FfmConfig {
    fn default() -> Self {
        FfmConfig {
            cluster: ClusterParams::default(),
            labels: LabelSource::Clusters,
            tau: 1.0 / 16.0,
            epsilon: 0.1,
            normalize: true,
        }
    }
}

impl FfmConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.cluster.problems();
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            out.push(format!("ffm.tau: must be positive, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            out.push(format!("ffm.epsilon: must be in [0, 1), got {}", self.epsilon));
        }
        out
    }
}

/// Per-channel mean and standard deviation of a (part) feature map with the
/// pseudo label of its sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FineGrainedAttribute {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub pseudo_label: usize,
    pub part_index: usize,
}

/// Spatial mean and population standard deviation of every channel.
pub fn extract_attribute(map: &FeatureMap, part_index: usize, pseudo_label: usize) -> FineGrainedAttribute {
    let hw = (map.height * map.width) as f64;
    let (mut mu, mut sigma) = (Vec::with_capacity(map.channels), Vec::with_capacity(map.channels));
    for ch in map.data.chunks(map.height * map.width) {
        let m = ch.iter().sum::<f64>() / hw;
        let var = ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / hw;
        mu.push(m);
        sigma.push(var.sqrt());
    }
    FineGrainedAttribute {
        mu,
        sigma,
        pseudo_label,
        part_index,
    }
}

/// Target distribution over the labels of one identity.
///
/// The target keeps `1 - (|set| - 1) * epsilon / |set|` and every other
/// member of `set` gets `epsilon / |set|`.
pub fn smoothing_weights(target: usize, set: &[usize], epsilon: f64) -> Result<Vec<(usize, f64)>> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::config("ffm.epsilon", format!("must be in [0, 1), got {epsilon}")));
    }
    if !set.contains(&target) {
        return Err(Error::InvalidBatch(format!("target label {target} is not in its identity's label set {set:?}")));
    }
    let n = set.len() as f64;
    let other = epsilon / n;
    let own = 1.0 - (n - 1.0) * epsilon / n;
    Ok(set.iter().map(|&l| (l, if l == target { own } else { other })).collect())
}

/// Dense `(B, N_s)` smoothed targets for a batch of pseudo labels.
pub fn smoothed_targets(pseudo_labels: &[usize], table: &ClusterTable, epsilon: f64) -> Result<Tensor> {
    let ns = table.num_clusters();
    let mut t = Tensor::zeros(vec![pseudo_labels.len(), ns]);
    for (i, &y) in pseudo_labels.iter().enumerate() {
        let set: Vec<usize> = table.same_identity_set(y)?.collect();
        for (l, w) in smoothing_weights(y, &set, epsilon)? {
            t.data_mut()[i * ns + l] = w;
        }
    }
    Ok(t)
}

/// Attribute classifier weights and loss hyper-parameters for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct AttrClassifierState {
    /// `(N_s, C)`.
    pub weights: Tensor,
    pub tau: f64,
    pub epsilon: f64,
    pub normalize: bool,
}

impl AttrClassifierState {
    pub fn num_rows(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Rescales every row to unit length (cosine classifier only).
    pub fn renormalize(&mut self) {
        if !self.normalize {
            return;
        }
        let c = self.weights.shape()[1];
        for row in self.weights.data_mut().chunks_mut(c) {
            l2_normalize(row);
        }
    }
}

/// Classifier whose row `k` is the (normalized) mean embedding of cluster `k`.
pub fn init_attr_classifier(table: &ClusterTable, features: &BTreeMap<usize, Vec<f64>>, cfg: &FfmConfig) -> Result<AttrClassifierState> {
    let c = features.values().next().ok_or_else(|| Error::Empty("no embeddings".into()))?.len();
    let mut w = Vec::with_capacity(table.num_clusters() * c);
    for label in 0..table.num_clusters() {
        let mut center = vec![0.0; c];
        let members = table.members(label);
        for s in members {
            let mut f = features.get(s).ok_or_else(|| Error::InvalidBatch(format!("no embedding for sample {s}")))?.clone();
            if cfg.normalize {
                l2_normalize(&mut f);
            }
            center.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
        }
        center.iter_mut().for_each(|v| *v /= members.len() as f64);
        if cfg.normalize {
            l2_normalize(&mut center);
        }
        w.extend(center);
    }
    Ok(AttrClassifierState {
        weights: Tensor::from_vec(vec![table.num_clusters(), c], w),
        tau: cfg.tau,
        epsilon: cfg.epsilon,
        normalize: cfg.normalize,
    })
}

/// Attribute-aware classification loss of `embeddings` `(B, C)` against
/// `weights` `(N_s, C)`: softmax over all clusters at temperature `tau`,
/// cross-entropy against identity-smoothed targets, averaged over the batch.
pub fn attr_loss(
    g: &mut Graph,
    embeddings: Var,
    pseudo_labels: &[usize],
    table: &ClusterTable,
    state: &AttrClassifierState,
    weights: Var,
) -> Result<Var> {
    let ns = table.num_clusters();
    if g.shape(weights)[0] != ns {
        return Err(Error::Shape(format!("attribute classifier has {} rows for {ns} clusters", g.shape(weights)[0])));
    }
    if pseudo_labels.len() != g.shape(embeddings)[0] {
        return Err(Error::Shape(format!("{} labels for {} embeddings", pseudo_labels.len(), g.shape(embeddings)[0])));
    }
    if let Some(&label) = pseudo_labels.iter().find(|&&l| l >= ns) {
        return Err(Error::LabelOutOfRange {
            label,
            bound: ns,
            context: "pseudo labels",
        });
    }
    let targets = smoothed_targets(pseudo_labels, table, state.epsilon)?;
    let f = if state.normalize { g.normalize_rows(embeddings) } else { embeddings };
    let logits = g.matmul_nt(f, weights);
    let logits = g.scale(logits, 1.0 / state.tau);
    Ok(g.softmax_cross_entropy(logits, targets))
}
