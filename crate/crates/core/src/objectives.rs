//! Identity cross-entropy, batch-hard triplet loss and the staged weighted
//! total.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Identity cross-entropy.
    pub lambda1: f64,
    /// Triplet.
    pub lambda2: f64,
    /// Attribute-aware classification.
    pub lambda3: f64,
    /// Recomposed-feature identity cross-entropy.
    pub lambda4: f64,
    pub triplet_margin: f64,
    /// Label smoothing of the identity cross-entropy (0 disables it).
    pub id_label_smoothing: f64,
    /// Batch-normalize embeddings before every identity classifier; the
    /// triplet loss and retrieval keep the raw embedding.
    pub bnneck: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 0.3,
            triplet_margin: 0.3,
            id_label_smoothing: 0.0,
            bnneck: false,
        }
    }
}

impl LossWeights {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("triplet_margin", self.triplet_margin),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(format!("losses.{name}: must be a non-negative number, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.id_label_smoothing) {
            out.push(format!("losses.id_label_smoothing: must be in [0, 1), got {}", self.id_label_smoothing));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigList(p))
        }
    }
}

/// Training stage: identity loss only, or every term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warm,
    Full,
}

/// Scalar loss values of one step. Absent terms are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub id: f64,
    pub tri: Option<f64>,
    pub attr: Option<f64>,
    pub r: Option<f64>,
}

/// `lambda1 * id` in the warm stage, the weighted sum of all present terms
/// otherwise.
pub fn total_loss(c: &LossComponents, w: &LossWeights, stage: Stage) -> Result<f64> {
    w.validate()?;
    let mut total = w.lambda1 * c.id;
    if stage == Stage::Full {
        for (v, l) in [(c.tri, w.lambda2), (c.attr, w.lambda3), (c.r, w.lambda4)] {
            total += l * v.unwrap_or(0.0);
        }
    }
    Ok(total)
}

/// Graph handles of the loss terms of one step.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub id: Var,
    pub tri: Option<Var>,
    pub attr: Option<Var>,
    pub r: Option<Var>,
}

/// Graph counterpart of [`total_loss`]. Terms with zero weight are left out
/// of the sum.
pub fn total_loss_graph(g: &mut Graph, v: &LossVars, w: &LossWeights, stage: Stage) -> Var {
    let mut terms = vec![(v.id, w.lambda1)];
    if stage == Stage::Full {
        for (t, l) in [(v.tri, w.lambda2), (v.attr, w.lambda3), (v.r, w.lambda4)] {
            if let (Some(t), true) = (t, l != 0.0) {
                terms.push((t, l));
            }
        }
    }
    g.weighted_sum(&terms)
}

/// One-hot rows, optionally smoothed: `1 - s + s/n` on the label, `s/n`
/// elsewhere.
pub fn one_hot(labels: &[usize], n: usize, smoothing: f64, context: &'static str) -> Result<Tensor> {
    let mut t = Tensor::full(vec![labels.len(), n], smoothing / n as f64);
    for (i, &y) in labels.iter().enumerate() {
        if y >= n {
            return Err(Error::LabelOutOfRange { label: y, bound: n, context });
        }
        t.data_mut()[i * n + y] += 1.0 - smoothing;
    }
    Ok(t)
}

/// Mean cross-entropy of `embeddings · classifierᵀ` against identity labels.
pub fn id_loss(g: &mut Graph, embeddings: Var, labels: &[usize], classifier: Var, smoothing: f64) -> Result<Var> {
    let n = g.shape(classifier)[0];
    if labels.len() != g.shape(embeddings)[0] {
        return Err(Error::Shape(format!("{} labels for {} embeddings", labels.len(), g.shape(embeddings)[0])));
    }
    let targets = one_hot(labels, n, smoothing, "identity labels")?;
    let logits = g.matmul_nt(embeddings, classifier);
    Ok(g.softmax_cross_entropy(logits, targets))
}

/// Checks that the batch has at least two identities and at least one
/// identity with two samples.
pub fn check_triplet_batch(labels: &[usize]) -> Result<()> {
    let mut sorted = labels.to_vec();
    sorted.sort_unstable();
    let distinct = {
        let mut d = sorted.clone();
        d.dedup();
        d.len()
    };
    let has_pair = sorted.windows(2).any(|w| w[0] == w[1]);
    if distinct < 2 || !has_pair {
        return Err(Error::InvalidBatch(format!(
            "triplet loss needs >= 2 identities and >= 2 samples of some identity (PK sampler contract); got {} samples of {distinct} identities",
            labels.len()
        )));
    }
    Ok(())
}

/// Batch-hard triplet loss on Euclidean distances between raw embeddings.
pub fn triplet_loss(g: &mut Graph, embeddings: Var, labels: &[usize], margin: f64) -> Result<Var> {
    if labels.len() != g.shape(embeddings)[0] {
        return Err(Error::Shape(format!("{} labels for {} embeddings", labels.len(), g.shape(embeddings)[0])));
    }
    check_triplet_batch(labels)?;
    Ok(g.batch_hard_triplet(embeddings, labels, margin))
}

/// One row of the per-step loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub components: LossComponents,
    pub total: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,L_id,L_tri,L_attr,L_r,total";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let c = &self.components;
        format!("{},{},{},{},{},{}", self.step, c.id, opt(c.tri), opt(c.attr), opt(c.r), self.total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn value(f: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.value(v).item()
    }

    #[test]
    fn id_loss_limits() {
        let uniform = value(|g| {
            let e = g.constant(Tensor::from_vec(vec![2, 3], vec![0.3, -1.0, 2.0, 0.0, 1.0, 1.0]));
            let w = g.constant(Tensor::zeros(vec![8, 3]));
            id_loss(g, e, &[1, 7], w, 0.0)
        });
        assert!((uniform - 8f64.ln()).abs() < 1e-12);
        let perfect = value(|g| {
            let e = g.constant(Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]));
            let w = g.constant(Tensor::from_vec(vec![2, 2], vec![800.0, 0.0, -800.0, 0.0]));
            id_loss(g, e, &[0], w, 0.0)
        });
        assert!(perfect.abs() < 1e-12);
        let mut g = Graph::new();
        let e = g.constant(Tensor::zeros(vec![1, 2]));
        let w = g.constant(Tensor::zeros(vec![2, 2]));
        assert!(matches!(id_loss(&mut g, e, &[2], w, 0.0), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn id_loss_ignores_batch_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Tensor::from_vec(vec![3, 3], (0..9).map(|_| rng.random_range(-1.0..1.0)).collect());
        let a = value(|g| {
            let ev = g.constant(Tensor::from_vec(vec![4, 3], e.clone()));
            let wv = g.constant(w.clone());
            id_loss(g, ev, &[0, 1, 2, 1], wv, 0.0)
        });
        let perm = [2, 0, 3, 1];
        let e2: Vec<f64> = perm.iter().flat_map(|&i| e[i * 3..i * 3 + 3].to_vec()).collect();
        let b = value(|g| {
            let ev = g.constant(Tensor::from_vec(vec![4, 3], e2));
            let wv = g.constant(w.clone());
            id_loss(g, ev, &[2, 0, 1, 1], wv, 0.0)
        });
        assert!((a - b).abs() < 1e-12);
    }

    fn triplet(e: Vec<f64>, dim: usize, labels: &[usize], margin: f64) -> f64 {
        value(|g| {
            let v = g.constant(Tensor::from_vec(vec![labels.len(), dim], e));
            triplet_loss(g, v, labels, margin)
        })
    }

    /// Enumerates every (anchor, positive, negative) triple.
    fn brute_force_triplet(e: &[f64], dim: usize, labels: &[usize], margin: f64) -> f64 {
        let d = |i: usize, j: usize| (0..dim).map(|k| (e[i * dim + k] - e[j * dim + k]).powi(2)).sum::<f64>().sqrt();
        let n = labels.len();
        let mut total = 0.0;
        let mut count = 0;
        for a in 0..n {
            let mut worst: Option<f64> = None;
            for p in 0..n {
                if labels[p] != labels[a] {
                    continue;
                }
                for q in 0..n {
                    if labels[q] == labels[a] {
                        continue;
                    }
                    let v = d(a, p) - d(a, q) + margin;
                    worst = Some(worst.map_or(v, |w: f64| w.max(v)));
                }
            }
            if let Some(w) = worst {
                total += w.max(0.0);
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn triplet_examples() {
        assert_eq!(triplet(vec![0.0, 0.0, 0.0, 0.0, 10.0, 0.0, 10.0, 0.0], 2, &[0, 0, 1, 1], 0.3), 0.0);
        assert!((triplet(vec![1.5; 8], 2, &[0, 0, 1, 1], 0.3) - 0.3).abs() < 1e-12);
        let mut g = Graph::new();
        let v = g.constant(Tensor::zeros(vec![3, 2]));
        let err = triplet_loss(&mut g, v, &[0, 1, 2], 0.3).unwrap_err().to_string();
        assert!(err.contains("PK sampler"), "{err}");
        assert!(triplet_loss(&mut g, v, &[4, 4, 4], 0.3).is_err());
    }

    #[test]
    fn triplet_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let labels: Vec<usize> = loop {
                let l: Vec<usize> = (0..8).map(|_| rng.random_range(0..3)).collect();
                if check_triplet_batch(&l).is_ok() {
                    break l;
                }
            };
            let e: Vec<f64> = (0..8 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = triplet(e.clone(), 4, &labels, 0.3);
            assert!((got - brute_force_triplet(&e, 4, &labels, 0.3)).abs() < 1e-12);
            let shifted: Vec<f64> = e.iter().enumerate().map(|(i, v)| v + [3.0, -2.0, 0.5, 7.0][i % 4]).collect();
            assert!((triplet(shifted, 4, &labels, 0.3) - got).abs() < 1e-9);
        }
    }

    #[test]
    fn total_loss_stages_and_linearity() {
        let w = LossWeights::default();
        let all = LossComponents {
            id: 1.0,
            tri: Some(1.0),
            attr: Some(1.0),
            r: Some(1.0),
        };
        assert!((total_loss(&all, &w, Stage::Full).unwrap() - 3.3).abs() < 1e-12);
        let c = LossComponents {
            id: 0.7,
            tri: Some(5.0),
            attr: Some(9.0),
            r: Some(2.0),
        };
        assert_eq!(total_loss(&c, &w, Stage::Warm).unwrap(), 0.7);
        let base = total_loss(&c, &w, Stage::Full).unwrap();
        for (k, lambda) in [(0, w.lambda1), (1, w.lambda2), (2, w.lambda3), (3, w.lambda4)] {
            let mut d = c;
            match k {
                0 => d.id += 0.5,
                1 => d.tri = d.tri.map(|v| v + 0.5),
                2 => d.attr = d.attr.map(|v| v + 0.5),
                _ => d.r = d.r.map(|v| v + 0.5),
            }
            assert!((total_loss(&d, &w, Stage::Full).unwrap() - base - 0.5 * lambda).abs() < 1e-12);
        }
        let bad = LossWeights { lambda3: -1.0, ..w };
        assert!(total_loss(&c, &bad, Stage::Full).unwrap_err().is_config());
    }

    #[test]
    fn graph_total_skips_zero_weights() {
        let mut g = Graph::new();
        let id = g.param(Tensor::scalar(0.4));
        let tri = g.param(Tensor::scalar(0.9));
        let r = g.param(Tensor::scalar(3.0));
        let w = LossWeights {
            lambda4: 0.0,
            ..Default::default()
        };
        let vars = LossVars {
            id,
            tri: Some(tri),
            attr: None,
            r: Some(r),
        };
        let t = total_loss_graph(&mut g, &vars, &w, Stage::Full);
        assert!((g.value(t).item() - 1.3).abs() < 1e-12);
        let grads = g.backward(t);
        assert!(grads.get(r).is_none());
        let t = total_loss_graph(&mut g, &vars, &w, Stage::Warm);
        assert_eq!(g.value(t).item(), 0.4);
    }

    #[test]
    fn id_and_triplet_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let labels = [0, 0, 1, 1, 2, 2];
            let e = Tensor::from_vec(vec![6, 5], (0..30).map(|_| rng.random_range(-1.0..1.0)).collect());
            let w = Tensor::from_vec(vec![3, 5], (0..15).map(|_| rng.random_range(-1.0..1.0)).collect());
            let eval = |e: &Tensor, w: &Tensor, which: u8| -> (f64, Vec<Tensor>) {
                let mut g = Graph::new();
                let ev = g.param(e.clone());
                let wv = g.param(w.clone());
                let l = if which == 0 { id_loss(&mut g, ev, &labels, wv, 0.0).unwrap() } else { triplet_loss(&mut g, ev, &labels, 0.3).unwrap() };
                let grads = g.backward(l);
                (g.value(l).item(), vec![grads.get_or_zeros(ev, e.shape()), grads.get_or_zeros(wv, w.shape())])
            };
            for which in [0u8, 1] {
                let (_, an) = eval(&e, &w, which);
                for (slot, base) in [(0, &e), (1, &w)] {
                    let h = 1e-6;
                    let fd: Vec<f64> = (0..base.numel())
                        .map(|k| {
                            let mut p = base.clone();
                            p.data_mut()[k] += h;
                            let mut m = base.clone();
                            m.data_mut()[k] -= h;
                            let (pe, pw, me, mw) = if slot == 0 { (&p, &w, &m, &w) } else { (&e, &p, &e, &m) };
                            (eval(pe, pw, which).0 - eval(me, mw, which).0) / (2.0 * h)
                        })
                        .collect();
                    let num: f64 = fd.iter().zip(an[slot].data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    let den = fd.iter().map(|a| a * a).sum::<f64>().sqrt().max(an[slot].norm()).max(1e-12);
                    if den > 1e-10 {
                        assert!(num / den < 1e-4, "loss {which} slot {slot}: {}", num / den);
                    }
                }
            }
        }
    }

    #[test]
    fn step_log_row() {
        let row = StepLog {
            step: 3,
            components: LossComponents {
                id: 1.5,
                tri: Some(0.25),
                attr: None,
                r: None,
            },
            total: 1.75,
        };
        assert_eq!(row.csv_row(), "3,1.5,0.25,,,1.75");
    }
}
