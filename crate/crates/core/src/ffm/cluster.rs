//! Per-identity clustering into fine-grained pseudo labels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// `1 - <a, b>` on L2-normalized vectors.
    #[default]
    Cosine,
    Euclidean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    #[default]
    Dbscan,
    /// Per-identity k-means with a fixed cluster count.
    Kmeans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterParams {
    pub method: ClusterMethod,
    pub metric: Metric,
    pub radius: f64,
    pub min_samples: usize,
    /// Clusters per identity for [`ClusterMethod::Kmeans`].
    pub fixed_k: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            method: ClusterMethod::Dbscan,
            metric: Metric::Cosine,
            radius: 0.4,
            min_samples: 1,
            fixed_k: 3,
        }
    }
}

impl ClusterParams {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            out.push(format!("ffm.cluster.radius: must be a positive number, got {}", self.radius));
        }
        if self.min_samples == 0 {
            out.push("ffm.cluster.min_samples: must be >= 1".into());
        }
        if self.fixed_k == 0 {
            out.push("ffm.cluster.fixed_k: must be >= 1".into());
        }
        out
    }
}

/// Fine-grained clusters of every training identity.
///
/// Global labels are contiguous per identity and ordered by
/// `(identity_id, smallest sample_id in the cluster)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterTable {
    /// `identity -> clusters -> sorted sample ids`.
    pub clusters: BTreeMap<usize, Vec<Vec<usize>>>,
    /// `sample_id -> global pseudo label`.
    pub assignment: BTreeMap<usize, usize>,
    /// `pseudo label -> identity`.
    pub label_identity: Vec<usize>,
    /// `identity -> first global label`; its labels are `first..first + n_s`.
    first_label: BTreeMap<usize, usize>,
}

impl ClusterTable {
    /// Builds the table from unordered per-identity clusters.
    pub fn from_clusters(per_identity: BTreeMap<usize, Vec<Vec<usize>>>) -> Result<Self> {
        let mut clusters = BTreeMap::new();
        let mut assignment = BTreeMap::new();
        let mut label_identity = Vec::new();
        let mut first_label = BTreeMap::new();
        for (id, mut cs) in per_identity {
            if cs.iter().all(Vec::is_empty) {
                return Err(Error::Empty(format!("identity {id} has no samples to cluster")));
            }
            cs.retain(|c| !c.is_empty());
            for c in cs.iter_mut() {
                c.sort_unstable();
            }
            cs.sort_by_key(|c| c[0]);
            first_label.insert(id, label_identity.len());
            for c in &cs {
                let label = label_identity.len();
                label_identity.push(id);
                for &s in c {
                    if assignment.insert(s, label).is_some() {
                        return Err(Error::InvalidBatch(format!("sample {s} appears in two clusters")));
                    }
                }
            }
            clusters.insert(id, cs);
        }
        Ok(ClusterTable {
            clusters,
            assignment,
            label_identity,
            first_label,
        })
    }

    /// One cluster per distinct `group` value of each identity, e.g. the
    /// ground-truth clothing id.
    pub fn from_groups(samples: &[(usize, usize, usize)]) -> Result<Self> {
        let mut per: BTreeMap<usize, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
        for &(sample, identity, group) in samples {
            per.entry(identity).or_default().entry(group).or_default().push(sample);
        }
        Self::from_clusters(per.into_iter().map(|(id, g)| (id, g.into_values().collect())).collect())
    }

    /// Total cluster count `N_s`.
    pub fn num_clusters(&self) -> usize {
        self.label_identity.len()
    }

    /// Cluster count per identity.
    pub fn n_s(&self) -> BTreeMap<usize, usize> {
        self.clusters.iter().map(|(&id, cs)| (id, cs.len())).collect()
    }

    pub fn num_identities(&self) -> usize {
        self.clusters.len()
    }

    pub fn label_of(&self, sample_id: usize) -> Option<usize> {
        self.assignment.get(&sample_id).copied()
    }

    /// Identity owning `label`.
    pub fn identity_of(&self, label: usize) -> Option<usize> {
        self.label_identity.get(label).copied()
    }

    /// All labels of the identity owning `label`.
    pub fn same_identity_set(&self, label: usize) -> Result<std::ops::Range<usize>> {
        let id = *self.label_identity.get(label).ok_or(Error::LabelOutOfRange {
            label,
            bound: self.num_clusters(),
            context: "pseudo labels",
        })?;
        let first = self.first_label[&id];
        Ok(first..first + self.clusters[&id].len())
    }

    /// Sample ids of global cluster `label`.
    pub fn members(&self, label: usize) -> &[usize] {
        let id = self.label_identity[label];
        &self.clusters[&id][label - self.first_label[&id]]
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    crate::featnet::l2_normalize(&mut v);
    v
}

pub(crate) fn distance(metric: Metric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        Metric::Cosine => 1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>(),
        Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
    }
}

/// DBSCAN over `points` (already in the metric's space). Returns clusters as
/// lists of point indices.
///
/// Neighbourhoods include the point itself and use `d <= radius`. Border
/// points join the cluster of their nearest core point (lowest index on
/// ties), which keeps the result independent of visiting order. Noise points
/// become singleton clusters so every sample receives a label.
pub fn dbscan(points: &[Vec<f64>], metric: Metric, radius: f64, min_samples: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    let dist: Vec<Vec<f64>> = points.iter().map(|a| points.iter().map(|b| distance(metric, a, b)).collect()).collect();
    let core: Vec<bool> = (0..n).map(|i| dist[i].iter().filter(|&&d| d <= radius).count() >= min_samples).collect();
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    for start in 0..n {
        if !core[start] || label[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        label[start] = next;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if core[j] && label[j] == usize::MAX && dist[i][j] <= radius {
                    label[j] = next;
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    for i in 0..n {
        if core[i] {
            continue;
        }
        let nearest = (0..n)
            .filter(|&j| core[j] && dist[i][j] <= radius)
            .min_by(|&a, &b| dist[i][a].total_cmp(&dist[i][b]).then(a.cmp(&b)));
        label[i] = match nearest {
            Some(j) => label[j],
            None => {
                next += 1;
                next - 1
            }
        };
    }
    let mut out = vec![Vec::new(); next];
    for (i, &l) in label.iter().enumerate() {
        out[l].push(i);
    }
    out
}

/// Lloyd's k-means with farthest-point seeding from point 0; `k` is capped at
/// the number of points.
pub fn kmeans(points: &[Vec<f64>], k: usize, iterations: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    let k = k.min(n).max(1);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut centers = vec![points[0].clone()];
    while centers.len() < k {
        let far = (0..n)
            .max_by(|&a, &b| {
                let da = centers.iter().map(|c| sq(&points[a], c)).fold(f64::INFINITY, f64::min);
                let db = centers.iter().map(|c| sq(&points[b], c)).fold(f64::INFINITY, f64::min);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("non-empty");
        centers.push(points[far].clone());
    }
    let mut assign = vec![0; n];
    for _ in 0..iterations {
        let new: Vec<usize> = points
            .iter()
            .map(|p| (0..k).min_by(|&a, &b| sq(p, &centers[a]).total_cmp(&sq(p, &centers[b])).then(a.cmp(&b))).expect("k >= 1"))
            .collect();
        let changed = new != assign;
        assign = new;
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (d, v) in center.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    let mut out = vec![Vec::new(); k];
    for (i, &a) in assign.iter().enumerate() {
        out[a].push(i);
    }
    out.retain(|c| !c.is_empty());
    out
}

/// Clusters every identity's embeddings independently.
///
/// `features` maps sample id to pooled embedding and `labels` maps sample id
/// to identity. Cosine distances are taken between L2-normalized copies.
pub fn cluster_identities(
    features: &BTreeMap<usize, Vec<f64>>,
    labels: &BTreeMap<usize, usize>,
    params: &ClusterParams,
) -> Result<ClusterTable> {
    let problems = params.problems();
    if !problems.is_empty() {
        return Err(Error::ConfigList(problems));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&sample, &id) in labels {
        if !features.contains_key(&sample) {
            return Err(Error::InvalidBatch(format!("sample {sample} has a label but no embedding")));
        }
        groups.entry(id).or_default().push(sample);
    }
    if groups.is_empty() {
        return Err(Error::Empty("no samples to cluster".into()));
    }
    let mut per = BTreeMap::new();
    for (id, samples) in groups {
        let points: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| match params.metric {
                Metric::Cosine => normalized(&features[s]),
                Metric::Euclidean => features[s].clone(),
            })
            .collect();
        if let Some(bad) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite(format!("embedding of sample {}", samples[bad])));
        }
        let local = match params.method {
            ClusterMethod::Dbscan => dbscan(&points, params.metric, params.radius, params.min_samples),
            ClusterMethod::Kmeans => kmeans(&points, params.fixed_k, 100),
        };
        per.insert(id, local.into_iter().map(|c| c.into_iter().map(|i| samples[i]).collect()).collect());
    }
    ClusterTable::from_clusters(per)
}
