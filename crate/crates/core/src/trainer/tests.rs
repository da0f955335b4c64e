use super::*;
use crate::synthdata::{generate_dataset, GenerateParams};

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.data.generate = GenerateParams {
        seed: 3,
        n_identities: 4,
        n_test_identities: 3,
        outfits_per_id: [2, 2],
        images_per_outfit: [3, 3],
        n_cameras: 2,
        image_size: [16, 8],
        occlusion_prob: 0.1,
    };
    c.backbone.widths = vec![4, 8, 8];
    c.backbone.embed_dim = 8;
    c.backbone.norm_groups = 2;
    c.far.parts = 2;
    c.schedule = TrainSchedule {
        max_epochs: 4,
        t0: 1,
        warmup_epochs: 2,
        lr_start: 1e-4,
        lr_peak: 1e-3,
        decay_every: 2,
        ids_per_batch: 2,
        instances_per_id: 2,
        ..TrainSchedule::default()
    };
    c
}

fn bench(c: &RunConfig) -> Benchmark {
    generate_dataset(&c.data.generate).unwrap()
}

#[test]
fn lr_schedule_warms_up_then_steps_down() {
    let s = TrainSchedule {
        max_epochs: 120,
        warmup_epochs: 10,
        decay_every: 20,
        ..TrainSchedule::default()
    };
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1e-300);
    assert!(close(s.lr_at(1).unwrap(), 3.5e-6));
    assert!(close(s.lr_at(10).unwrap(), 3.5e-4));
    assert!(close(s.lr_at(29).unwrap(), 3.5e-4));
    assert!(close(s.lr_at(30).unwrap(), 3.5e-5));
    assert!(close(s.lr_at(31).unwrap(), 3.5e-5));
    assert!(close(s.lr_at(50).unwrap(), 3.5e-6));
    assert!(close(s.lr_at(70).unwrap(), 3.5e-7));
    for e in 1..10 {
        assert!(s.lr_at(e).unwrap() < s.lr_at(e + 1).unwrap());
    }
    assert!(s.lr_at(0).is_err());
    assert!(s.lr_at(121).is_err());
}

#[test]
fn stages_switch_after_t0() {
    let s = TrainSchedule::default();
    assert_eq!(s.stage_at(s.t0), Stage::Warm);
    assert_eq!(s.stage_at(s.t0 + 1), Stage::Full);
    let s = TrainSchedule { t0: 0, ..s };
    assert_eq!(s.stage_at(1), Stage::Full);
}

#[test]
fn streams_are_distinct_and_reproducible() {
    let a = stream_rng(1, Stream::Sampler, 3).next_u64();
    assert_eq!(a, stream_rng(1, Stream::Sampler, 3).next_u64());
    assert_ne!(a, stream_rng(1, Stream::Sampler, 4).next_u64());
    assert_ne!(a, stream_rng(1, Stream::Far, 3).next_u64());
    assert_ne!(a, stream_rng(2, Stream::Sampler, 3).next_u64());
}

#[test]
fn triplet_needs_two_per_identity() {
    let mut c = tiny_config();
    c.schedule.instances_per_id = 1;
    assert!(c.problems().iter().any(|p| p.contains("instances_per_id")));
    c.losses.lambda2 = 0.0;
    assert!(c.problems().is_empty(), "{:?}", c.problems());
}

#[test]
fn tiny_run_produces_finite_metrics() {
    let c = tiny_config();
    let b = bench(&c);
    let mut t = Trainer::new(c, &b).unwrap();
    let out = t.run(None).unwrap();
    assert_eq!(out.history.len(), 4);
    assert_eq!(out.history[0].stage, Stage::Warm);
    assert!(out.history[0].l_tri.is_none());
    let last = out.history.last().unwrap();
    assert_eq!(last.stage, Stage::Full);
    assert!(last.l_tri.is_some() && last.l_attr.is_some() && last.l_r.is_some());
    assert!(last.total.is_finite());
    assert_eq!(last.eval.len(), 2);
    assert!(out.history[1].eval.is_empty());
    assert_eq!(out.final_eval.len(), 2);
    let csv = metrics_csv(&out.history);
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().all(|l| l.split(',').count() == 13));
}

#[test]
fn warm_stage_gradient_is_the_identity_gradient() {
    let full = tiny_config();
    let b = bench(&full);
    let mut id_only = full.clone();
    id_only.apply_preset("baseline-id").unwrap();
    let mut t = Trainer::new(full.clone(), &b).unwrap();
    let features = t.train_embeddings().unwrap();
    let table = t.cluster(&features).unwrap();
    t.attr = Some(init_attr_classifier(&table, &features, &full.ffm).unwrap());
    let recs = &b.train.records[..8];
    let imgs: Vec<&Image> = recs.iter().map(|r| &r.image).collect();
    let labels: Vec<usize> = recs.iter().map(|r| t.class_of[&r.identity_id]).collect();
    let pseudo: Vec<usize> = recs.iter().map(|r| table.label_of(r.sample_id).unwrap()).collect();
    let sb = StepBatch {
        images: &imgs,
        class_labels: &labels,
        pseudo_labels: Some(&pseudo),
        table: Some(&table),
    };
    let mut rng = stream_rng(0, Stream::Far, 1);
    let warm = compute_step(&t.model, t.attr.as_ref(), &full, Stage::Warm, &sb, &mut rng).unwrap();
    let reference = compute_step(&t.model, None, &id_only, Stage::Full, &sb, &mut rng).unwrap();
    assert_eq!(warm.grads, reference.grads);
    assert_eq!(warm.total, reference.total);
    assert!(warm.attr_grad.is_none());
    let both = compute_step(&t.model, t.attr.as_ref(), &full, Stage::Full, &sb, &mut rng).unwrap();
    assert_ne!(both.grads, reference.grads);
    assert!(both.attr_grad.is_some());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let c = tiny_config();
    let b = bench(&c);
    let mut straight = Trainer::new(c.clone(), &b).unwrap();
    let full = straight.run(None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(c, &b).unwrap();
    first.run_epoch().unwrap();
    first.run_epoch().unwrap();
    let path = dir.path().join("mid.ckpt");
    first.checkpoint().save(&path).unwrap();
    drop(first);
    let loaded = CheckpointBundle::load(&path).unwrap();
    assert_eq!(loaded.epoch, 2);
    let mut resumed = Trainer::from_checkpoint(loaded, &b).unwrap();
    let rest = resumed.run(None).unwrap();
    assert_eq!(rest.model.params, full.model.params);
    assert_eq!(rest.history, full.history);
}

#[test]
fn checkpoint_round_trips_and_rejects_mismatches() {
    let c = tiny_config();
    let b = bench(&c);
    let mut t = Trainer::new(c.clone(), &b).unwrap();
    t.run_epoch().unwrap();
    t.run_epoch().unwrap();
    let ck = t.checkpoint();
    assert!(ck.attr.is_some());
    let bytes = ck.to_bytes();
    let back = CheckpointBundle::from_bytes(&bytes, Path::new("x")).unwrap();
    assert_eq!(back, ck);

    let mut other = c.clone();
    other.losses.lambda4 = 0.1;
    let err = back.check_config(&other).unwrap_err().to_string();
    assert!(err.contains("losses"), "{err}");
    back.check_config(&c).unwrap();
    assert!(back.check_data("deadbeef").is_err());

    assert!(matches!(CheckpointBundle::from_bytes(&bytes[..bytes.len() - 3], Path::new("x")), Err(Error::Format { .. })));
    assert!(matches!(CheckpointBundle::from_bytes(b"not a checkpoint at all", Path::new("x")), Err(Error::Format { .. })));

    let mut c2 = c.clone();
    c2.data.generate.seed = 99;
    let b2 = bench(&c2);
    let mut moved = back.clone();
    moved.config = c2.clone();
    moved.training_hash = c2.training_hash();
    assert!(matches!(Trainer::from_checkpoint(moved, &b2), Err(Error::CheckpointMismatch(_))));
}

#[test]
fn diverging_run_aborts_and_keeps_last_good_checkpoint() {
    let mut c = tiny_config();
    c.schedule.lr_peak = 1e200;
    c.schedule.lr_start = 1e-4;
    c.schedule.t0 = 0;
    let b = bench(&c);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(c, &b).unwrap();
    match t.run(Some(dir.path())) {
        Err(Error::Aborted { epoch, .. }) => {
            assert!(epoch >= 2);
            let last = CheckpointBundle::load(&dir.path().join("last.ckpt")).unwrap();
            assert_eq!(last.epoch, epoch - 1);
            assert!(last.params.tensors().iter().all(|t| t.data().iter().all(|v| v.is_finite())));
        }
        other => panic!("expected an abort, got {:?}", other.map(|o| o.history.len())),
    }
}

#[test]
fn output_files_are_written() {
    let mut c = tiny_config();
    c.schedule.checkpoint_every = 2;
    let b = bench(&c);
    let dir = tempfile::tempdir().unwrap();
    Trainer::new(c, &b).unwrap().run(Some(dir.path())).unwrap();
    for f in ["metrics.csv", "steps.csv", "last.ckpt", "final.ckpt", "epoch_0002.ckpt", "epoch_0004.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let steps = fs::read_to_string(dir.path().join("steps.csv")).unwrap();
    assert!(steps.starts_with(StepLog::CSV_HEADER));
}
