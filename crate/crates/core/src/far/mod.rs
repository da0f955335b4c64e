//! Attribute recomposition in feature space.
//!
//! Every horizontal part of a sample's feature map is instance-normalized and
//! re-styled with the per-channel mean and standard deviation of the same
//! part of another batch member that carries a different fine-grained
//! label. The recomposed map is pooled and classified with the identity
//! classifier, so the model learns identity features that survive an
//! attribute swap.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Pooling, Var};
use crate::error::{Error, Result};
use crate::featnet::{part_bounds, FeatureMap};
use crate::ffm::FineGrainedAttribute;
use crate::objectives::one_hot;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FarVariant {
    /// Any batch member with a different fine-grained label.
    #[default]
    Full,
    /// Only donors of the same identity.
    WithinId,
    /// Only donors of another identity.
    BetweenIds,
    /// No recomposition term.
    None,
    /// Pooled-embedding mixup in place of recomposition.
    Mixup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FarConfig {
    /// Horizontal parts recomposed independently.
    pub parts: usize,
    /// Recompositions per sample and step.
    pub times: usize,
    pub variant: FarVariant,
    pub sigma_floor: f64,
    pub mixup_alpha: f64,
    /// Block gradients into the donor statistics.
    pub stop_donor_gradient: bool,
}

impl Default for FarConfig {
    fn default() -> Self {
        FarConfig {
            parts: 2,
            times: 1,
            variant: FarVariant::Full,
            sigma_floor: 1e-5,
            mixup_alpha: 0.2,
            stop_donor_gradient: false,
        }
    }
}

impl FarConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.parts == 0 {
            out.push("far.parts: must be >= 1".into());
        }
        if self.times == 0 {
            out.push("far.times: must be >= 1".into());
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor.is_finite()) {
            out.push(format!("far.sigma_floor: must be positive, got {}", self.sigma_floor));
        }
        if self.variant == FarVariant::Mixup && !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            out.push(format!("far.mixup_alpha: must be positive, got {}", self.mixup_alpha));
        }
        out
    }

    pub fn is_active(&self) -> bool {
        self.variant != FarVariant::None
    }
}

/// Donor of every (sample, part); `None` means the part is passed through
/// unchanged because no admissible donor exists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecompositionPlan {
    pub donors: Vec<Vec<Option<usize>>>,
}

impl RecompositionPlan {
    pub fn num_passthrough(&self) -> usize {
        self.donors.iter().flatten().filter(|d| d.is_none()).count()
    }

    /// Donor index per sample for `part`, with the sample itself standing in
    /// for passthroughs, plus the mask of recomposed samples.
    fn part_column(&self, part: usize) -> (Vec<usize>, Vec<bool>) {
        self.donors.iter().enumerate().map(|(i, d)| (d[part].unwrap_or(i), d[part].is_some())).unzip()
    }
}

/// Draws one donor per (sample, part) uniformly from the admissible batch
/// members of `variant`.
pub fn sample_donors<R: Rng>(pseudo_labels: &[usize], identity_labels: &[usize], parts: usize, variant: FarVariant, rng: &mut R) -> Result<RecompositionPlan> {
    if pseudo_labels.len() != identity_labels.len() {
        return Err(Error::Shape(format!("{} pseudo labels for {} identity labels", pseudo_labels.len(), identity_labels.len())));
    }
    let n = pseudo_labels.len();
    let donors = (0..n)
        .map(|i| {
            let admissible: Vec<usize> = (0..n)
                .filter(|&j| {
                    pseudo_labels[j] != pseudo_labels[i]
                        && match variant {
                            FarVariant::WithinId => identity_labels[j] == identity_labels[i],
                            FarVariant::BetweenIds => identity_labels[j] != identity_labels[i],
                            _ => true,
                        }
                })
                .collect();
            (0..parts)
                .map(|_| (!admissible.is_empty()).then(|| admissible[rng.random_range(0..admissible.len())]))
                .collect()
        })
        .collect();
    Ok(RecompositionPlan { donors })
}

/// Re-styles one part map with donor statistics:
/// `donor.sigma * (x - own.mu) / max(own.sigma, floor) + donor.mu`.
pub fn recompose(part: &FeatureMap, own: &FineGrainedAttribute, donor: &FineGrainedAttribute, sigma_floor: f64) -> Result<FeatureMap> {
    let c = part.channels;
    if [own.mu.len(), own.sigma.len(), donor.mu.len(), donor.sigma.len()].iter().any(|&l| l != c) {
        return Err(Error::Shape(format!("attribute length does not match {c} channels")));
    }
    let hw = part.height * part.width;
    let data = part
        .data
        .chunks(hw)
        .enumerate()
        .flat_map(|(ch, xs)| {
            let scale = donor.sigma[ch] / own.sigma[ch].max(sigma_floor);
            xs.iter().map(move |x| scale * (x - own.mu[ch]) + donor.mu[ch])
        })
        .collect();
    Ok(FeatureMap::new(c, part.height, part.width, data))
}

/// Applies `plan` to a batch of maps `(B, C, H, W)` on the graph and returns
/// the recomposed maps of the same shape.
pub fn recompose_batch(g: &mut Graph, maps: Var, plan: &RecompositionPlan, cfg: &FarConfig) -> Result<Var> {
    let (n, _, h, _) = g.value(maps).dims4();
    if plan.donors.len() != n {
        return Err(Error::Shape(format!("plan covers {} samples, batch has {n}", plan.donors.len())));
    }
    let bounds = part_bounds(h, cfg.parts)?;
    let mut parts = Vec::with_capacity(bounds.len());
    for (p, &(start, end)) in bounds.iter().enumerate() {
        let part = if bounds.len() == 1 { maps } else { g.slice_rows(maps, start, end) };
        let (donor, recomposed) = plan.part_column(p);
        if !recomposed.iter().any(|&r| r) {
            parts.push(part);
            continue;
        }
        let mu = g.spatial_mean(part);
        let sigma = g.spatial_std(part);
        let (mu_src, sigma_src) = if cfg.stop_donor_gradient { (g.detach(mu), g.detach(sigma)) } else { (mu, sigma) };
        let mu_d = g.gather(mu_src, &donor);
        let sigma_d = g.gather(sigma_src, &donor);
        let styled = g.adain(part, mu, sigma, mu_d, sigma_d, cfg.sigma_floor);
        parts.push(if recomposed.iter().all(|&r| r) { styled } else { g.select_rows(styled, part, &recomposed) });
    }
    Ok(if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) })
}

/// Identity cross-entropy of pooled recomposed maps, averaged over the `K`
/// recompositions in `recomposed`.
/// With `bnneck` the pooled features are batch-normalized before the
/// classifier.
pub fn recomposed_id_loss(
    g: &mut Graph,
    recomposed: &[Var],
    pooling: Pooling,
    identity_labels: &[usize],
    classifier: Var,
    bnneck: bool,
) -> Result<Var> {
    if recomposed.is_empty() {
        return Err(Error::Empty("no recomposed maps".into()));
    }
    let n = g.shape(classifier)[0];
    let targets = one_hot(identity_labels, n, 0.0, "identity labels")?;
    let mut terms = Vec::with_capacity(recomposed.len());
    for &m in recomposed {
        if g.shape(m)[0] != identity_labels.len() {
            return Err(Error::Shape(format!("{} labels for {} maps", identity_labels.len(), g.shape(m)[0])));
        }
        let mut pooled = g.global_pool(m, pooling);
        if bnneck {
            pooled = g.batch_norm(pooled);
        }
        let logits = g.matmul_nt(pooled, classifier);
        terms.push((g.softmax_cross_entropy(logits, targets.clone()), 1.0 / recomposed.len() as f64));
    }
    Ok(if terms.len() == 1 { terms[0].0 } else { g.weighted_sum(&terms) })
}

/// Pairing and coefficient of one mixup draw.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupPlan {
    /// Partner of every sample.
    pub partner: Vec<usize>,
    pub lambda: f64,
}

impl MixupPlan {
    pub fn draw<R: Rng>(batch: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::config("far.mixup_alpha", format!("must be positive, got {alpha}")));
        }
        let beta = Beta::new(alpha, alpha).map_err(|e| Error::config("far.mixup_alpha", e.to_string()))?;
        let lambda = beta.sample(rng);
        let mut partner: Vec<usize> = (0..batch).collect();
        partner.shuffle(rng);
        Ok(MixupPlan { partner, lambda })
    }
}

/// `lambda * e + (1 - lambda) * e[partner]` and the matching soft identity
/// targets `lambda * y + (1 - lambda) * y[partner]`.
pub fn mixup_substitute(g: &mut Graph, embeddings: Var, identity_labels: &[usize], num_classes: usize, plan: &MixupPlan) -> Result<(Var, crate::tensor::Tensor)> {
    let n = identity_labels.len();
    if g.shape(embeddings)[0] != n || plan.partner.len() != n {
        return Err(Error::Shape("mixup plan, labels and embeddings disagree on batch size".into()));
    }
    let other = g.gather(embeddings, &plan.partner);
    let mixed = g.lincomb(embeddings, other, plan.lambda, 1.0 - plan.lambda);
    let ya = one_hot(identity_labels, num_classes, 0.0, "identity labels")?;
    let partner_labels: Vec<usize> = plan.partner.iter().map(|&j| identity_labels[j]).collect();
    let yb = one_hot(&partner_labels, num_classes, 0.0, "identity labels")?;
    let mut t = ya;
    t.data_mut().iter_mut().zip(yb.data()).for_each(|(a, b)| *a = plan.lambda * *a + (1.0 - plan.lambda) * b);
    Ok((mixed, t))
}

/// Cross-entropy of mixed embeddings against mixed targets.
pub fn mixup_loss(g: &mut Graph, embeddings: Var, identity_labels: &[usize], classifier: Var, plan: &MixupPlan) -> Result<Var> {
    let n = g.shape(classifier)[0];
    let (mixed, targets) = mixup_substitute(g, embeddings, identity_labels, n, plan)?;
    let logits = g.matmul_nt(mixed, classifier);
    Ok(g.softmax_cross_entropy(logits, targets))
}
