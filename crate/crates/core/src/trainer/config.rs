//! Run configuration, presets and hashing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainSchedule;
use crate::error::{Error, Result};
use crate::evalkit::Protocol;
use crate::far::{FarConfig, FarVariant};
use crate::featnet::BackboneConfig;
use crate::ffm::{FfmConfig, LabelSource};
use crate::objectives::LossWeights;
use crate::synthdata::augment::AugmentConfig;
use crate::synthdata::GenerateParams;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory written by `gen`; when absent the benchmark is
    /// generated in memory from `generate`.
    pub dir: Option<PathBuf>,
    pub generate: GenerateParams,
    pub augment: AugmentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub protocols: Vec<Protocol>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            protocols: Protocol::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    pub out: Option<PathBuf>,
    pub seed: u64,
    /// Runs are bit-reproducible for a given seed; the flag is recorded in
    /// the run metadata.
    pub deterministic: bool,
    /// Evaluate every this many epochs (0: only after the last epoch).
    pub eval_every: usize,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub ffm: FfmConfig,
    pub far: FarConfig,
    pub losses: LossWeights,
    pub schedule: TrainSchedule,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            out: None,
            seed: 0,
            deterministic: true,
            eval_every: 0,
            data: DataConfig::default(),
            backbone: BackboneConfig::default(),
            ffm: FfmConfig::default(),
            far: FarConfig::default(),
            losses: LossWeights::default(),
            schedule: TrainSchedule::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Named configurations of the ablation study.
pub const PRESETS: &[(&str, &str)] = &[
    ("fire2", "full method: identity, triplet, attribute and recomposition losses"),
    ("baseline", "identity + triplet losses only"),
    ("baseline-tri", "alias of `baseline`"),
    ("baseline-id", "identity loss only"),
    ("ours-w-cloth", "full method with ground-truth clothing ids as fine-grained labels"),
    ("wo-attr", "full method without the attribute-aware classification loss"),
    ("no-far", "full method without attribute recomposition"),
    ("mixup", "full method with embedding mixup in place of recomposition"),
    ("far-within-id", "recomposition donors restricted to the same identity"),
    ("far-between-ids", "recomposition donors restricted to other identities"),
];

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { reason, .. } => Error::config(path.display().to_string(), reason),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies a named preset on top of the current values.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "fire2" => {}
            "baseline" | "baseline-tri" => {
                self.losses.lambda3 = 0.0;
                self.losses.lambda4 = 0.0;
                self.far.variant = FarVariant::None;
            }
            "baseline-id" => {
                self.losses.lambda2 = 0.0;
                self.losses.lambda3 = 0.0;
                self.losses.lambda4 = 0.0;
                self.far.variant = FarVariant::None;
            }
            "ours-w-cloth" => self.ffm.labels = LabelSource::Clothing,
            "wo-attr" => self.losses.lambda3 = 0.0,
            "no-far" => {
                self.losses.lambda4 = 0.0;
                self.far.variant = FarVariant::None;
            }
            "mixup" => self.far.variant = FarVariant::Mixup,
            "far-within-id" => self.far.variant = FarVariant::WithinId,
            "far-between-ids" => self.far.variant = FarVariant::BetweenIds,
            other => {
                let known: Vec<&str> = PRESETS.iter().map(|p| p.0).collect();
                return Err(Error::config("preset", format!("unknown preset {other:?}; known: {}", known.join(", "))));
            }
        }
        if name != "fire2" {
            self.name = name.to_string();
        }
        Ok(())
    }

    /// Every problem in the configuration, prefixed with its section.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        out.extend(self.data.generate.problems());
        let aug = &self.data.augment;
        for (name, v) in [("flip_prob", aug.flip_prob), ("erase_prob", aug.erase_prob)] {
            if !(0.0..=1.0).contains(&v) {
                out.push(format!("data.augment.{name}: must be in [0, 1], got {v}"));
            }
        }
        if !(0.0 < aug.erase_area[0] && aug.erase_area[0] <= aug.erase_area[1] && aug.erase_area[1] <= 1.0) {
            out.push(format!("data.augment.erase_area: need 0 < min <= max <= 1, got {:?}", aug.erase_area));
        }
        out.extend(self.backbone.problems());
        out.extend(self.ffm.problems());
        out.extend(self.far.problems());
        out.extend(self.losses.problems());
        out.extend(self.schedule.problems());
        let s = &self.schedule;
        if self.losses.lambda2 > 0.0 && s.t0 < s.max_epochs && (s.ids_per_batch < 2 || s.instances_per_id < 2) {
            out.push(format!(
                "schedule.instances_per_id: the triplet loss needs >= 2 identities with >= 2 samples each, got P={} K={}",
                s.ids_per_batch, s.instances_per_id
            ));
        }
        if self.eval.protocols.is_empty() {
            out.push("eval.protocols: must list at least one protocol".into());
        }
        if self.backbone.problems().is_empty() && self.far.parts > 0 {
            let [h, w] = self.data.generate.image_size;
            let (fh, _) = self.backbone.output_size(h, w);
            if self.far.parts > fh {
                out.push(format!("far.parts: {} parts exceed the feature map height {fh}", self.far.parts));
            }
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

    /// SHA-256 over the whole configuration.
    pub fn config_hash(&self) -> String {
        hash_json(&serde_json::to_value(self).expect("config serializes"))
    }

    /// SHA-256 over the fields that determine the trained weights (run name,
    /// output directory, evaluation cadence and flags are excluded).
    pub fn training_hash(&self) -> String {
        let v = serde_json::json!({
            "seed": self.seed,
            "data": {"generate": self.data.generate, "augment": self.data.augment},
            "backbone": self.backbone,
            "ffm": self.ffm,
            "far": self.far,
            "losses": self.losses,
            "schedule": self.schedule,
        });
        hash_json(&v)
    }

    /// Names of the sections whose values differ from `other`.
    pub fn differing_sections(&self, other: &RunConfig) -> Vec<&'static str> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        ["seed", "data", "backbone", "ffm", "far", "losses", "schedule"]
            .into_iter()
            .filter(|k| a.get(k) != b.get(k))
            .collect()
    }
}

pub(crate) fn hash_json(v: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.config_hash(), c.config_hash());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("[losses]\nlambda9 = 1.0\n").unwrap_err().to_string();
        assert!(err.contains("lambda9"), "{err}");
        assert!(RunConfig::from_toml_str("bogus = 3\n").is_err());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::from_toml_str("seed = 5\n[far]\nparts = 3\n[schedule]\nmax_epochs = 7\nt0 = 2\n").unwrap();
        assert_eq!((c.seed, c.far.parts, c.schedule.max_epochs), (5, 3, 7));
        assert_eq!(c.losses, LossWeights::default());
    }

    #[test]
    fn all_problems_are_listed_together() {
        let mut c = RunConfig::default();
        c.losses.lambda2 = -1.0;
        c.ffm.epsilon = 1.5;
        c.far.parts = 0;
        c.schedule.t0 = 1000;
        match c.validate().unwrap_err() {
            Error::ConfigList(p) => {
                assert_eq!(p.len(), 4, "{p:?}");
                for key in ["lambda2", "epsilon", "parts", "t0"] {
                    assert!(p.iter().any(|s| s.contains(key)), "{key} missing from {p:?}");
                }
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn too_many_parts_for_the_feature_map() {
        let mut c = RunConfig::default();
        c.far.parts = 9;
        assert!(c.problems().iter().any(|p| p.contains("feature map height")));
    }

    #[test]
    fn presets_set_the_ablation_switches() {
        for (name, _) in PRESETS {
            let mut c = RunConfig::default();
            c.apply_preset(name).unwrap();
            c.validate().unwrap();
        }
        let mut c = RunConfig::default();
        c.apply_preset("baseline").unwrap();
        assert_eq!((c.losses.lambda3, c.losses.lambda4), (0.0, 0.0));
        assert_eq!(c.losses.lambda2, 1.0);
        let mut c = RunConfig::default();
        c.apply_preset("ours-w-cloth").unwrap();
        assert_eq!(c.ffm.labels, LabelSource::Clothing);
        assert!(RunConfig::default().apply_preset("nope").unwrap_err().is_config());
    }

    #[test]
    fn training_hash_ignores_bookkeeping() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.name = "other".into();
        b.eval_every = 3;
        assert_eq!(a.training_hash(), b.training_hash());
        assert_ne!(a.config_hash(), b.config_hash());
        b.losses.lambda4 = 0.5;
        assert_ne!(a.training_hash(), b.training_hash());
        assert_eq!(a.differing_sections(&b), vec!["losses"]);
    }
}
