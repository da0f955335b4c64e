//! Retrieval evaluation: cosine ranking, protocol masks, CMC and mAP.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featnet::l2_normalize;
use crate::synthdata::SampleRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Drops same-identity entries from the query's camera.
    Standard,
    /// Additionally drops same-identity entries wearing the query's outfit.
    ClothChanging,
}

impl Protocol {
    pub const ALL: [Protocol; 2] = [Protocol::Standard, Protocol::ClothChanging];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Standard => "standard",
            Protocol::ClothChanging => "cloth_changing",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Protocol::Standard),
            "cloth_changing" | "cloth-changing" => Ok(Protocol::ClothChanging),
            other => Err(Error::config("protocol", format!("unknown protocol {other:?} (standard | cloth_changing)"))),
        }
    }
}

/// The labels evaluation needs from a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItemMeta {
    pub sample_id: usize,
    pub identity_id: usize,
    pub clothing_id: usize,
    pub camera_id: usize,
}

impl From<&SampleRecord> for ItemMeta {
    fn from(r: &SampleRecord) -> Self {
        ItemMeta {
            sample_id: r.sample_id,
            identity_id: r.identity_id,
            clothing_id: r.clothing_id,
            camera_id: r.camera_id,
        }
    }
}

/// Which gallery entries take part in ranking for `query`.
pub fn valid_mask(query: &ItemMeta, gallery: &[ItemMeta], protocol: Protocol) -> Vec<bool> {
    gallery
        .iter()
        .map(|g| {
            let same_id = g.identity_id == query.identity_id;
            let same_cam = same_id && g.camera_id == query.camera_id;
            let same_cloth = same_id && g.clothing_id == query.clothing_id;
            !(same_cam || (protocol == Protocol::ClothChanging && same_cloth))
        })
        .collect()
}

fn cosine_distances(query: &[f64], gallery: &[Vec<f64>]) -> Vec<f64> {
    gallery.iter().map(|g| 1.0 - query.iter().zip(g).map(|(a, b)| a * b).sum::<f64>()).collect()
}

/// Gallery indices by ascending distance, ties by index.
pub fn rank(distances: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    order
}

/// Ranking outcome of one query.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub sample_id: usize,
    /// Valid gallery indices in rank order.
    pub ranking: Vec<usize>,
    /// Zero-based rank of the first correct match among valid entries.
    pub first_hit: Option<usize>,
    pub average_precision: f64,
    pub num_positives: usize,
}

impl QueryResult {
    pub fn skipped(&self) -> bool {
        self.num_positives == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub protocol: Protocol,
    /// `cmc[k]` is the fraction of evaluated queries with a hit at rank `<= k + 1`.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub num_queries: usize,
    pub num_skipped: usize,
    pub per_query: Vec<QueryResult>,
}

impl EvalResult {
    /// CMC at rank `k` (1-based); saturates past the gallery size.
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc.get(k - 1).or(self.cmc.last()).copied().unwrap_or(0.0)
    }

    pub fn report(&self) -> EvalReport {
        EvalReport {
            protocol: self.protocol,
            rank1: 100.0 * self.rank(1),
            rank5: 100.0 * self.rank(5),
            rank10: 100.0 * self.rank(10),
            map: 100.0 * self.map,
            num_queries: self.num_queries,
            num_skipped: self.num_skipped,
            benchmark: BENCHMARK_LABEL.to_string(),
        }
    }
}

pub const BENCHMARK_LABEL: &str = "synthetic; generic same-camera and same-clothes exclusion rules";

/// Evaluation report; metric values are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    #[serde(rename = "Rank-1")]
    pub rank1: f64,
    #[serde(rename = "Rank-5")]
    pub rank5: f64,
    #[serde(rename = "Rank-10")]
    pub rank10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub num_queries: usize,
    pub num_skipped: usize,
    pub benchmark: String,
}

/// CMC and mAP of `queries` against `gallery` under `protocol`.
///
/// Embeddings are L2-normalized here and compared by cosine distance.
/// Queries with no valid positive are skipped and counted.
pub fn cmc_map(
    queries: &[ItemMeta],
    gallery: &[ItemMeta],
    query_embeddings: &[Vec<f64>],
    gallery_embeddings: &[Vec<f64>],
    protocol: Protocol,
) -> Result<EvalResult> {
    if queries.len() != query_embeddings.len() || gallery.len() != gallery_embeddings.len() {
        return Err(Error::Shape("metadata and embedding counts differ".into()));
    }
    if gallery.is_empty() {
        return Err(Error::Empty("gallery".into()));
    }
    if query_embeddings.iter().chain(gallery_embeddings).any(|e| !e.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("evaluation embeddings".into()));
    }
    let norm = |es: &[Vec<f64>]| -> Vec<Vec<f64>> {
        es.iter()
            .map(|e| {
                let mut e = e.clone();
                l2_normalize(&mut e);
                e
            })
            .collect()
    };
    let qn = norm(query_embeddings);
    let gn = norm(gallery_embeddings);
    let mut hits = vec![0usize; gallery.len()];
    let mut ap_sum = 0.0;
    let mut evaluated = 0;
    let mut per_query = Vec::with_capacity(queries.len());
    for (q, qe) in queries.iter().zip(&qn) {
        let mask = valid_mask(q, gallery, protocol);
        let dist = cosine_distances(qe, &gn);
        let ranking: Vec<usize> = rank(&dist).into_iter().filter(|&i| mask[i]).collect();
        let mut found = 0;
        let mut precision_sum = 0.0;
        let mut first_hit = None;
        for (r, &gi) in ranking.iter().enumerate() {
            if gallery[gi].identity_id == q.identity_id {
                found += 1;
                precision_sum += found as f64 / (r + 1) as f64;
                first_hit.get_or_insert(r);
            }
        }
        let ap = if found > 0 { precision_sum / found as f64 } else { 0.0 };
        if let Some(r) = first_hit {
            hits[r] += 1;
            ap_sum += ap;
            evaluated += 1;
        }
        per_query.push(QueryResult {
            sample_id: q.sample_id,
            ranking,
            first_hit,
            average_precision: ap,
            num_positives: found,
        });
    }
    if evaluated == 0 {
        return Err(Error::Empty(format!("no query has a valid positive under the {} protocol", protocol.name())));
    }
    let mut cmc = Vec::with_capacity(gallery.len());
    let mut acc = 0;
    for h in hits {
        acc += h;
        cmc.push(acc as f64 / evaluated as f64);
    }
    Ok(EvalResult {
        protocol,
        cmc,
        map: ap_sum / evaluated as f64,
        num_queries: evaluated,
        num_skipped: queries.len() - evaluated,
        per_query,
    })
}

/// `query_sample_id,first_hit_rank,average_precision,num_positives` with
/// an empty rank for skipped queries.
pub fn per_query_csv(result: &EvalResult) -> String {
    let mut s = String::from("query_sample_id,first_hit_rank,average_precision,num_positives\n");
    for q in &result.per_query {
        let hit = q.first_hit.map(|r| (r + 1).to_string()).unwrap_or_default();
        writeln!(s, "{},{},{},{}", q.sample_id, hit, q.average_precision, q.num_positives).expect("write to string");
    }
    s
}

/// One row of an embedding dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub sample_id: usize,
    pub identity: usize,
    pub clothing: usize,
    pub pseudo_label: Option<usize>,
    pub split: String,
    pub vector: Vec<f64>,
}

/// Writes rows as CSV: metadata columns followed by `v0..v{C-1}`.
pub fn write_embedding_dump(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.vector.len());
    let mut s = String::from("sample_id,split,identity,clothing,pseudo_label");
    for d in 0..dim {
        write!(s, ",v{d}").expect("write to string");
    }
    s.push('\n');
    for r in rows {
        let pl = r.pseudo_label.map(|p| p.to_string()).unwrap_or_default();
        write!(s, "{},{},{},{},{}", r.sample_id, r.split, r.identity, r.clothing, pl).expect("write to string");
        for v in &r.vector {
            write!(s, ",{v}").expect("write to string");
        }
        s.push('\n');
    }
    crate::synthdata::io::write_file(path, s.as_bytes())
}

#[cfg(test)]
mod tests;
