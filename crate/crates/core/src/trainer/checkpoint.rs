//! Binary checkpoint files.
//!
//! ```text
//! magic   8 bytes  "CCREIDCK"
//! version u32 LE
//! hlen    u64 LE
//! header  hlen bytes of JSON (epoch, config echo, hashes, tensor manifest)
//! payload f64 LE: parameters, Adam first moments, Adam second moments,
//!         attribute classifier weights (if present), in manifest order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::optim::Adam;
use super::EpochMetrics;
use crate::error::{Error, Result};
use crate::featnet::ParamSet;
use crate::ffm::AttrClassifierState;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CCREIDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Complete training state after `epoch` finished epochs.
///
/// Random streams are derived from `(config.seed, subsystem, epoch)`, so the
/// root seed in the config echo and the epoch counter restore them.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointBundle {
    pub epoch: usize,
    pub step: usize,
    pub config: RunConfig,
    pub training_hash: String,
    pub data_fingerprint: String,
    /// Training identity of every classifier row.
    pub class_ids: Vec<usize>,
    pub params: ParamSet,
    pub optimizer: Adam,
    pub attr: Option<AttrClassifierState>,
    pub history: Vec<EpochMetrics>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AttrEntry {
    shape: Vec<usize>,
    tau: f64,
    epsilon: f64,
    normalize: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    epoch: usize,
    step: usize,
    config: RunConfig,
    training_hash: String,
    data_fingerprint: String,
    class_ids: Vec<usize>,
    tensors: Vec<TensorEntry>,
    weight_decay: f64,
    optimizer_step: u64,
    attr: Option<AttrEntry>,
    history: Vec<EpochMetrics>,
}

impl CheckpointBundle {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            epoch: self.epoch,
            step: self.step,
            config: self.config.clone(),
            training_hash: self.training_hash.clone(),
            data_fingerprint: self.data_fingerprint.clone(),
            class_ids: self.class_ids.clone(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            weight_decay: self.optimizer.weight_decay,
            optimizer_step: self.optimizer.step,
            attr: self.attr.as_ref().map(|a| AttrEntry {
                shape: a.weights.shape().to_vec(),
                tau: a.tau,
                epsilon: a.epsilon,
                normalize: a.normalize,
            }),
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let tensors = self
            .params
            .tensors()
            .iter()
            .chain(&self.optimizer.m)
            .chain(&self.optimizer.v)
            .chain(self.attr.iter().map(|a| &a.weights));
        for t in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |why: String| Error::format(path, why);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let hbytes = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(hbytes).map_err(|e| bad(e.to_string()))?;
        if header.config.training_hash() != header.training_hash {
            return Err(bad("config echo does not match its recorded hash".into()));
        }
        let mut payload = bytes[20 + hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = payload.by_ref().take(n).collect();
            if data.len() != n {
                return Err(bad("truncated tensor payload".into()));
            }
            Ok(Tensor::from_vec(shape.to_vec(), data))
        };
        let mut params = ParamSet::default();
        for e in &header.tensors {
            params.insert(e.name.clone(), take(&e.shape)?);
        }
        let m = header.tensors.iter().map(|e| take(&e.shape)).collect::<Result<Vec<_>>>()?;
        let v = header.tensors.iter().map(|e| take(&e.shape)).collect::<Result<Vec<_>>>()?;
        let attr = match &header.attr {
            Some(a) => Some(AttrClassifierState {
                weights: take(&a.shape)?,
                tau: a.tau,
                epsilon: a.epsilon,
                normalize: a.normalize,
            }),
            None => None,
        };
        if payload.next().is_some() {
            return Err(bad("trailing bytes after tensor payload".into()));
        }
        Ok(CheckpointBundle {
            epoch: header.epoch,
            step: header.step,
            config: header.config,
            training_hash: header.training_hash,
            data_fingerprint: header.data_fingerprint,
            class_ids: header.class_ids,
            params,
            optimizer: Adam {
                weight_decay: header.weight_decay,
                step: header.optimizer_step,
                m,
                v,
            },
            attr,
            history: header.history,
        })
    }

    /// Writes through a temporary file so an interrupted write never
    /// replaces a good checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        crate::synthdata::io::write_file(&tmp, &self.to_bytes())?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Fails unless `config` trains the same model as the one saved here.
    pub fn check_config(&self, config: &RunConfig) -> Result<()> {
        if config.training_hash() == self.training_hash {
            return Ok(());
        }
        let sections = self.config.differing_sections(config);
        Err(Error::CheckpointMismatch(format!(
            "config hash {} differs from checkpoint {} (sections: {})",
            &config.training_hash()[..12],
            &self.training_hash[..12],
            sections.join(", ")
        )))
    }

    /// Fails unless `fingerprint` identifies the dataset trained on.
    pub fn check_data(&self, fingerprint: &str) -> Result<()> {
        if fingerprint == self.data_fingerprint {
            Ok(())
        } else {
            Err(Error::CheckpointMismatch(format!(
                "dataset fingerprint {} differs from the checkpoint's {}",
                &fingerprint[..12.min(fingerprint.len())],
                &self.data_fingerprint[..12.min(self.data_fingerprint.len())]
            )))
        }
    }
}
