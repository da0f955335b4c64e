//! Two-stage training loop, learning-rate schedule, checkpoints and metrics.

mod checkpoint;
mod config;
mod optim;
mod sampler;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{CheckpointBundle, CHECKPOINT_VERSION};
pub use config::{DataConfig, EvalConfig, RunConfig, PRESETS};
pub use optim::Adam;
pub use sampler::pk_sample;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::evalkit::{cmc_map, EmbeddingRow, EvalResult, ItemMeta, Protocol};
use crate::far::{recompose_batch, recomposed_id_loss, sample_donors, FarVariant, MixupPlan};
use crate::featnet::{images_to_tensor, ReidModel, ID_CLASSIFIER};
use crate::ffm::{attr_loss, cluster_identities, init_attr_classifier, AttrClassifierState, ClusterTable, LabelSource};
use crate::objectives::{id_loss, total_loss_graph, triplet_loss, LossComponents, LossVars, Stage, StepLog};
use crate::synthdata::augment::augment;
use crate::synthdata::{Benchmark, Image};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub max_epochs: usize,
    /// Last epoch of the warm stage; `0` starts with every loss enabled.
    pub t0: usize,
    /// Epochs of linear warm-up from `lr_start` to `lr_peak`.
    pub warmup_epochs: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    /// After warm-up the rate is divided by this every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
    /// Identities per batch (P).
    pub ids_per_batch: usize,
    /// Samples per identity (K).
    pub instances_per_id: usize,
    pub weight_decay: f64,
    /// Keep `epoch_XXXX.ckpt` every this many epochs (0: only `last` and `final`).
    pub checkpoint_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            max_epochs: 40,
            t0: 10,
            warmup_epochs: 5,
            lr_start: 3.5e-6,
            lr_peak: 3.5e-4,
            decay_factor: 10.0,
            decay_every: 10,
            ids_per_batch: 8,
            instances_per_id: 4,
            weight_decay: 5e-4,
            checkpoint_every: 0,
        }
    }
}

impl TrainSchedule {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                out.push(format!("schedule.{msg}"));
            }
        };
        need(self.max_epochs >= 1, "max_epochs: must be >= 1".into());
        need(self.t0 <= self.max_epochs, format!("t0: {} exceeds max_epochs {}", self.t0, self.max_epochs));
        need(self.warmup_epochs >= 1, "warmup_epochs: must be >= 1".into());
        for (name, v) in [("lr_start", self.lr_start), ("lr_peak", self.lr_peak)] {
            need(v > 0.0 && v.is_finite(), format!("{name}: must be positive, got {v}"));
        }
        need(self.decay_factor >= 1.0 && self.decay_factor.is_finite(), format!("decay_factor: must be >= 1, got {}", self.decay_factor));
        need(self.decay_every >= 1, "decay_every: must be >= 1".into());
        need(self.ids_per_batch >= 1, "ids_per_batch: must be >= 1".into());
        need(self.instances_per_id >= 1, "instances_per_id: must be >= 1".into());
        need(self.weight_decay >= 0.0 && self.weight_decay.is_finite(), format!("weight_decay: must be >= 0, got {}", self.weight_decay));
        out
    }

    pub fn batch_size(&self) -> usize {
        self.ids_per_batch * self.instances_per_id
    }

    /// Learning rate of 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch == 0 || epoch > self.max_epochs {
            return Err(Error::config("schedule", format!("epoch {epoch} outside 1..={}", self.max_epochs)));
        }
        let w = self.warmup_epochs;
        if epoch <= w {
            if w == 1 {
                return Ok(self.lr_peak);
            }
            let t = (epoch - 1) as f64 / (w - 1) as f64;
            return Ok(self.lr_start + (self.lr_peak - self.lr_start) * t);
        }
        let decays = ((epoch - w) / self.decay_every) as i32;
        Ok(self.lr_peak * self.decay_factor.powi(-decays))
    }

    pub fn stage_at(&self, epoch: usize) -> Stage {
        if epoch <= self.t0 {
            Stage::Warm
        } else {
            Stage::Full
        }
    }
}

/// Independent random streams of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Sampler = 1,
    Augment = 2,
    Far = 3,
}

/// Generator for `stream` in `epoch`, derived from the root seed alone.
pub fn stream_rng(seed: u64, stream: Stream, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 32) | epoch as u64);
    rng
}

/// SHA-256 over the benchmark parameters, metadata and pixels.
pub fn dataset_fingerprint(bench: &Benchmark) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(&bench.params).expect("params serialize").as_bytes());
    for (split, m) in [("train", &bench.train), ("query", &bench.query), ("gallery", &bench.gallery)] {
        h.update(split.as_bytes());
        for r in &m.records {
            for v in [r.sample_id, r.identity_id, r.clothing_id, r.camera_id] {
                h.update((v as u64).to_le_bytes());
            }
            for p in &r.image.data {
                h.update(p.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

/// The benchmark named by `config`: loaded from `data.dir` when set (and
/// `data.generate` updated to the stored parameters), generated otherwise.
pub fn resolve_benchmark(config: &mut RunConfig) -> Result<Benchmark> {
    match &config.data.dir {
        Some(dir) => {
            let bench = crate::synthdata::io::load_benchmark(dir)?;
            config.data.generate = bench.params.clone();
            Ok(bench)
        }
        None => crate::synthdata::generate_dataset(&config.data.generate),
    }
}

/// One training batch as seen by [`compute_step`].
#[derive(Clone, Copy, Debug)]
pub struct StepBatch<'a> {
    pub images: &'a [&'a Image],
    /// Classifier row of every sample's identity.
    pub class_labels: &'a [usize],
    /// Fine-grained label of every sample (needed in the full stage).
    pub pseudo_labels: Option<&'a [usize]>,
    pub table: Option<&'a ClusterTable>,
}

/// Losses and gradients of one step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub components: LossComponents,
    pub total: f64,
    /// One gradient per model parameter, in [`crate::featnet::ParamSet`] order.
    pub grads: Vec<Tensor>,
    pub attr_grad: Option<Tensor>,
    pub passthrough: usize,
}

/// Forward and backward pass of one batch. Only terms that carry weight in
/// `stage` are built.
pub fn compute_step<R: Rng>(
    model: &ReidModel,
    attr: Option<&AttrClassifierState>,
    config: &RunConfig,
    stage: Stage,
    batch: &StepBatch,
    far_rng: &mut R,
) -> Result<StepOutput> {
    let w = &config.losses;
    let labels = batch.class_labels;
    if batch.images.len() != labels.len() {
        return Err(Error::Shape(format!("{} images for {} labels", batch.images.len(), labels.len())));
    }
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let x = g.constant(images_to_tensor(batch.images));
    let f = model.features(&mut g, &bound, x);
    let classifier = bound.var(ID_CLASSIFIER);
    let neck = if w.bnneck { g.batch_norm(f.embedding) } else { f.embedding };
    let id = id_loss(&mut g, neck, labels, classifier, w.id_label_smoothing)?;
    let mut vars = LossVars {
        id,
        tri: None,
        attr: None,
        r: None,
    };
    let mut attr_var = None;
    let mut passthrough = 0;
    if stage == Stage::Full {
        if w.lambda2 > 0.0 {
            vars.tri = Some(triplet_loss(&mut g, f.embedding, labels, w.triplet_margin)?);
        }
        let fine = || -> Result<(&[usize], &ClusterTable)> {
            match (batch.pseudo_labels, batch.table) {
                (Some(p), Some(t)) => Ok((p, t)),
                _ => Err(Error::InvalidBatch("full stage needs fine-grained labels".into())),
            }
        };
        if w.lambda3 > 0.0 {
            let state = attr.ok_or_else(|| Error::InvalidBatch("attribute classifier not initialised".into()))?;
            let (pseudo, table) = fine()?;
            let wv = g.param(state.weights.clone());
            vars.attr = Some(attr_loss(&mut g, f.embedding, pseudo, table, state, wv)?);
            attr_var = Some(wv);
        }
        if w.lambda4 > 0.0 && config.far.is_active() {
            vars.r = Some(if config.far.variant == FarVariant::Mixup {
                let plan = MixupPlan::draw(labels.len(), config.far.mixup_alpha, far_rng)?;
                crate::far::mixup_loss(&mut g, neck, labels, classifier, &plan)?
            } else {
                let (pseudo, _) = fine()?;
                let mut maps = Vec::with_capacity(config.far.times);
                for _ in 0..config.far.times {
                    let plan = sample_donors(pseudo, labels, config.far.parts, config.far.variant, far_rng)?;
                    passthrough += plan.num_passthrough();
                    maps.push(recompose_batch(&mut g, f.map, &plan, &config.far)?);
                }
                recomposed_id_loss(&mut g, &maps, model.config.pooling, labels, classifier, w.bnneck)?
            });
        }
    }
    let total = total_loss_graph(&mut g, &vars, w, stage);
    let grads = g.backward(total);
    let value = |v: Option<crate::autodiff::Var>| v.map(|v| g.value(v).item());
    Ok(StepOutput {
        components: LossComponents {
            id: g.value(vars.id).item(),
            tri: value(vars.tri),
            attr: value(vars.attr),
            r: value(vars.r),
        },
        total: g.value(total).item(),
        grads: bound.gradients(&g, &grads),
        attr_grad: attr_var.map(|v| grads.get_or_zeros(v, g.shape(v))),
        passthrough,
    })
}

/// Rank-1 and mAP of one protocol, in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub protocol: Protocol,
    pub rank1: f64,
    pub map: f64,
}

impl From<&EvalResult> for EvalSummary {
    fn from(r: &EvalResult) -> Self {
        EvalSummary {
            protocol: r.protocol,
            rank1: 100.0 * r.rank(1),
            map: 100.0 * r.map,
        }
    }
}

/// Per-epoch means of the step losses plus bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub stage: Stage,
    /// Number of fine-grained clusters over all identities.
    pub num_clusters: usize,
    pub l_id: f64,
    pub l_tri: Option<f64>,
    pub l_attr: Option<f64>,
    pub l_r: Option<f64>,
    pub total: f64,
    /// (sample, part) slots left unchanged for lack of a donor.
    pub passthrough: usize,
    pub eval: Vec<EvalSummary>,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,lr,stage,N_s,L_id,L_tri,L_attr,L_r,total,std_rank1,std_mAP,cc_rank1,cc_mAP";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let stage = match self.stage {
            Stage::Warm => "warm",
            Stage::Full => "full",
        };
        let mut s = format!(
            "{},{},{stage},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.num_clusters,
            self.l_id,
            opt(self.l_tri),
            opt(self.l_attr),
            opt(self.l_r),
            self.total
        );
        for p in Protocol::ALL {
            let e = self.eval.iter().find(|e| e.protocol == p);
            write!(s, ",{},{}", opt(e.map(|e| e.rank1)), opt(e.map(|e| e.map))).expect("write to string");
        }
        s
    }

    pub fn eval_for(&self, protocol: Protocol) -> Option<&EvalSummary> {
        self.eval.iter().find(|e| e.protocol == protocol)
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = format!("{}\n", EpochMetrics::CSV_HEADER);
    for m in history {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    s
}

/// Query-vs-gallery evaluation of `model` under each protocol.
pub fn evaluate(model: &ReidModel, bench: &Benchmark, protocols: &[Protocol]) -> Result<Vec<EvalResult>> {
    let embed = |m: &crate::synthdata::DatasetManifest| -> Result<Vec<Vec<f64>>> {
        let imgs: Vec<&Image> = m.records.iter().map(|r| &r.image).collect();
        Ok(model.embed(&imgs)?.into_iter().map(|e| e.vector).collect())
    };
    let qe = embed(&bench.query)?;
    let ge = embed(&bench.gallery)?;
    let qm: Vec<ItemMeta> = bench.query.records.iter().map(ItemMeta::from).collect();
    let gm: Vec<ItemMeta> = bench.gallery.records.iter().map(ItemMeta::from).collect();
    protocols.iter().map(|&p| cmc_map(&qm, &gm, &qe, &ge, p)).collect()
}

/// Result of a finished run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ReidModel,
    pub history: Vec<EpochMetrics>,
    pub final_eval: Vec<EvalResult>,
    pub checkpoint: CheckpointBundle,
}

/// Training state over one benchmark.
pub struct Trainer<'a> {
    config: RunConfig,
    bench: &'a Benchmark,
    fingerprint: String,
    class_ids: Vec<usize>,
    class_of: BTreeMap<usize, usize>,
    model: ReidModel,
    optimizer: Adam,
    attr: Option<AttrClassifierState>,
    table: Option<ClusterTable>,
    epoch: usize,
    step: usize,
    history: Vec<EpochMetrics>,
    steps: Vec<StepLog>,
}

impl<'a> Trainer<'a> {
    /// Fresh run. The benchmark must have been produced from
    /// `config.data.generate`.
    pub fn new(config: RunConfig, bench: &'a Benchmark) -> Result<Self> {
        config.validate()?;
        if bench.params != config.data.generate {
            return Err(Error::config("data.generate", "benchmark was generated with different parameters"));
        }
        if bench.train.is_empty() {
            return Err(Error::Empty("training split".into()));
        }
        let class_ids = bench.train.identities();
        if config.schedule.ids_per_batch > class_ids.len() {
            return Err(Error::config(
                "schedule.ids_per_batch",
                format!("{} identities per batch but the training split has {}", config.schedule.ids_per_batch, class_ids.len()),
            ));
        }
        let seed = stream_rng(config.seed, Stream::Init, 0).next_u64();
        let model = ReidModel::new(config.backbone.clone(), class_ids.len(), seed)?;
        let optimizer = Adam::new(model.params.tensors(), config.schedule.weight_decay);
        Ok(Trainer {
            fingerprint: dataset_fingerprint(bench),
            class_of: class_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect(),
            class_ids,
            config,
            bench,
            model,
            optimizer,
            attr: None,
            table: None,
            epoch: 0,
            step: 0,
            history: Vec::new(),
            steps: Vec::new(),
        })
    }

    /// Continues the run saved in `bundle`.
    pub fn from_checkpoint(bundle: CheckpointBundle, bench: &'a Benchmark) -> Result<Self> {
        let mut t = Trainer::new(bundle.config.clone(), bench)?;
        bundle.check_data(&t.fingerprint)?;
        if bundle.class_ids != t.class_ids {
            return Err(Error::CheckpointMismatch("training identities differ".into()));
        }
        if bundle.params.names() != t.model.params.names() || bundle.params.iter().zip(t.model.params.iter()).any(|(a, b)| a.1.shape() != b.1.shape()) {
            return Err(Error::CheckpointMismatch("parameter manifest differs from the configured backbone".into()));
        }
        t.model.params = bundle.params;
        t.optimizer = bundle.optimizer;
        t.attr = bundle.attr;
        t.epoch = bundle.epoch;
        t.step = bundle.step;
        t.history = bundle.history;
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &ReidModel {
        &self.model
    }

    /// Finished epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochMetrics] {
        &self.history
    }

    /// Step losses of the most recent epoch.
    pub fn last_steps(&self) -> &[StepLog] {
        &self.steps
    }

    /// Fine-grained clusters of the most recent epoch.
    pub fn table(&self) -> Option<&ClusterTable> {
        self.table.as_ref()
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.schedule.max_epochs
    }

    pub fn checkpoint(&self) -> CheckpointBundle {
        CheckpointBundle {
            epoch: self.epoch,
            step: self.step,
            config: self.config.clone(),
            training_hash: self.config.training_hash(),
            data_fingerprint: self.fingerprint.clone(),
            class_ids: self.class_ids.clone(),
            params: self.model.params.clone(),
            optimizer: self.optimizer.clone(),
            attr: self.attr.clone(),
            history: self.history.clone(),
        }
    }

    /// Unaugmented embeddings of the training split, by sample id.
    pub fn train_embeddings(&self) -> Result<BTreeMap<usize, Vec<f64>>> {
        let recs = &self.bench.train.records;
        let imgs: Vec<&Image> = recs.iter().map(|r| &r.image).collect();
        let embs = self.model.embed(&imgs)?;
        Ok(recs.iter().zip(embs).map(|(r, e)| (r.sample_id, e.vector)).collect())
    }

    /// Fine-grained labels of the training split under the current model.
    pub fn cluster(&self, features: &BTreeMap<usize, Vec<f64>>) -> Result<ClusterTable> {
        let recs = &self.bench.train.records;
        match self.config.ffm.labels {
            LabelSource::Clusters => {
                let ids: BTreeMap<usize, usize> = recs.iter().map(|r| (r.sample_id, r.identity_id)).collect();
                cluster_identities(features, &ids, &self.config.ffm.cluster)
            }
            LabelSource::Clothing => {
                let g: Vec<(usize, usize, usize)> = recs.iter().map(|r| (r.sample_id, r.identity_id, r.clothing_id)).collect();
                ClusterTable::from_groups(&g)
            }
        }
    }

    /// Trains one epoch and returns its metrics.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        if self.is_done() {
            return Err(Error::config("schedule.max_epochs", "training already finished"));
        }
        let e = self.epoch + 1;
        let s = &self.config.schedule;
        let lr = s.lr_at(e)?;
        let stage = s.stage_at(e);
        let aborted = |reason: String| Error::Aborted { epoch: e, reason };

        let features = self.train_embeddings().map_err(|err| match err {
            Error::NonFinite(m) => aborted(format!("non-finite embedding: {m}")),
            other => other,
        })?;
        let table = self.cluster(&features)?;
        let w = &self.config.losses;
        self.attr = if stage == Stage::Full && w.lambda3 > 0.0 {
            Some(init_attr_classifier(&table, &features, &self.config.ffm)?)
        } else {
            None
        };
        let mut attr_opt = self.attr.as_ref().map(|a| Adam::new(std::slice::from_ref(&a.weights), s.weight_decay));

        let recs = &self.bench.train.records;
        let by_id: BTreeMap<usize, &crate::synthdata::SampleRecord> = recs.iter().map(|r| (r.sample_id, r)).collect();
        let items: Vec<(usize, usize)> = recs.iter().map(|r| (r.sample_id, r.identity_id)).collect();
        let batches = pk_sample(&items, s.ids_per_batch, s.instances_per_id, &mut stream_rng(self.config.seed, Stream::Sampler, e))?;
        let mut aug_rng = stream_rng(self.config.seed, Stream::Augment, e);
        let mut far_rng = stream_rng(self.config.seed, Stream::Far, e);

        self.steps.clear();
        let mut sums = [0.0; 5];
        let mut counts = [0usize; 5];
        let mut passthrough = 0;
        for batch in &batches {
            let images: Vec<Image> = batch.iter().map(|sid| augment(&by_id[sid].image, &self.config.data.augment, &mut aug_rng)).collect();
            let refs: Vec<&Image> = images.iter().collect();
            let class_labels: Vec<usize> = batch.iter().map(|sid| self.class_of[&by_id[sid].identity_id]).collect();
            let pseudo: Vec<usize> = batch
                .iter()
                .map(|sid| table.label_of(*sid).ok_or_else(|| Error::InvalidBatch(format!("sample {sid} has no fine-grained label"))))
                .collect::<Result<_>>()?;
            let sb = StepBatch {
                images: &refs,
                class_labels: &class_labels,
                pseudo_labels: Some(&pseudo),
                table: Some(&table),
            };
            let out = compute_step(&self.model, self.attr.as_ref(), &self.config, stage, &sb, &mut far_rng)?;
            if !out.total.is_finite() {
                return Err(aborted(format!("non-finite loss {} at step {}", out.total, self.step + 1)));
            }
            if out.grads.iter().chain(&out.attr_grad).any(|g| !g.data().iter().all(|v| v.is_finite())) {
                return Err(aborted(format!("non-finite gradient at step {}", self.step + 1)));
            }
            self.optimizer.update(self.model.params.tensors_mut(), &out.grads, lr);
            if let (Some(state), Some(opt), Some(g)) = (self.attr.as_mut(), attr_opt.as_mut(), out.attr_grad.as_ref()) {
                opt.update(std::slice::from_mut(&mut state.weights), std::slice::from_ref(g), lr);
                state.renormalize();
            }
            self.step += 1;
            let c = out.components;
            for (i, v) in [Some(c.id), c.tri, c.attr, c.r, Some(out.total)].into_iter().enumerate() {
                if let Some(v) = v {
                    sums[i] += v;
                    counts[i] += 1;
                }
            }
            passthrough += out.passthrough;
            self.steps.push(StepLog {
                step: self.step,
                components: c,
                total: out.total,
            });
        }
        let mean = |i: usize| (counts[i] > 0).then(|| sums[i] / counts[i] as f64);
        let every = self.config.eval_every;
        let eval = if e == s.max_epochs || (every > 0 && e.is_multiple_of(every)) {
            evaluate(&self.model, self.bench, &self.config.eval.protocols)?.iter().map(EvalSummary::from).collect()
        } else {
            Vec::new()
        };
        let m = EpochMetrics {
            epoch: e,
            lr,
            stage,
            num_clusters: table.num_clusters(),
            l_id: mean(0).unwrap_or(0.0),
            l_tri: mean(1),
            l_attr: mean(2),
            l_r: mean(3),
            total: mean(4).unwrap_or(0.0),
            passthrough,
            eval,
        };
        log::info!(
            "epoch {e}/{} lr {lr:.3e} {:?} N_s {} loss {:.4}",
            s.max_epochs,
            stage,
            m.num_clusters,
            m.total
        );
        self.table = Some(table);
        self.epoch = e;
        self.history.push(m.clone());
        Ok(m)
    }

    /// Runs the remaining epochs. With `out`, writes `metrics.csv`,
    /// `steps.csv` and checkpoints after every epoch.
    pub fn run(&mut self, out: Option<&Path>) -> Result<TrainOutcome> {
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            if self.epoch == 0 {
                crate::synthdata::io::write_file(&dir.join("steps.csv"), format!("{}\n", StepLog::CSV_HEADER).as_bytes())?;
            }
        }
        while !self.is_done() {
            self.run_epoch()?;
            if let Some(dir) = out {
                self.write_epoch_outputs(dir)?;
            }
        }
        let final_eval = evaluate(&self.model, self.bench, &self.config.eval.protocols)?;
        let checkpoint = self.checkpoint();
        if let Some(dir) = out {
            checkpoint.save(&dir.join("final.ckpt"))?;
        }
        Ok(TrainOutcome {
            model: self.model.clone(),
            history: self.history.clone(),
            final_eval,
            checkpoint,
        })
    }

    fn write_epoch_outputs(&self, dir: &Path) -> Result<()> {
        let steps_path = dir.join("steps.csv");
        let mut f = OpenOptions::new().append(true).create(true).open(&steps_path).map_err(|e| Error::io(&steps_path, e))?;
        let mut rows = String::new();
        for s in &self.steps {
            rows.push_str(&s.csv_row());
            rows.push('\n');
        }
        f.write_all(rows.as_bytes()).map_err(|e| Error::io(&steps_path, e))?;
        crate::synthdata::io::write_file(&dir.join("metrics.csv"), metrics_csv(&self.history).as_bytes())?;
        let ckpt = self.checkpoint();
        ckpt.save(&dir.join("last.ckpt"))?;
        let every = self.config.schedule.checkpoint_every;
        if every > 0 && self.epoch.is_multiple_of(every) {
            ckpt.save(&dir.join(format!("epoch_{:04}.ckpt", self.epoch)))?;
        }
        Ok(())
    }

    /// Embeddings of every split, with fine-grained labels for training samples.
    pub fn embedding_rows(&self) -> Result<Vec<EmbeddingRow>> {
        embedding_rows(&self.model, self.bench, self.table.as_ref())
    }
}

/// Embedding dump rows for all splits of `bench`.
pub fn embedding_rows(model: &ReidModel, bench: &Benchmark, table: Option<&ClusterTable>) -> Result<Vec<EmbeddingRow>> {
    let mut rows = Vec::new();
    for (name, m) in [("train", &bench.train), ("query", &bench.query), ("gallery", &bench.gallery)] {
        let imgs: Vec<&Image> = m.records.iter().map(|r| &r.image).collect();
        for (r, e) in m.records.iter().zip(model.embed(&imgs)?) {
            rows.push(EmbeddingRow {
                sample_id: r.sample_id,
                identity: r.identity_id,
                clothing: r.clothing_id,
                pseudo_label: if name == "train" { table.and_then(|t| t.label_of(r.sample_id)) } else { None },
                split: name.to_string(),
                vector: e.vector,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests;
