use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny"
[data.generate]
seed = 3
n_identities = 4
n_test_identities = 3
outfits_per_id = [2, 2]
images_per_outfit = [3, 3]
n_cameras = 2
image_size = [16, 8]
[backbone]
widths = [4, 8, 8]
embed_dim = 8
norm_groups = 2
[schedule]
max_epochs = 4
t0 = 1
warmup_epochs = 2
lr_start = 1e-4
lr_peak = 1e-3
decay_every = 2
ids_per_batch = 2
instances_per_id = 2
"#;

fn ccreid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccreid")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join(format!("config{}.toml", extra.len()));
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

#[test]
fn gen_writes_manifest_and_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = ccreid(&["gen", "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(a.join("manifest.json").exists());
    assert!(a.join("run.json").exists());
    let again = ccreid(&["gen", "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(code(&again), 2);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert_eq!(code(&ccreid(&["gen", "--config", s(&cfg), "--out", s(&a), "--force"])), 0);
    assert_eq!(code(&ccreid(&["gen", "--config", s(&cfg), "--out", s(&b)])), 0);
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
}

#[test]
fn invalid_config_lists_every_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[losses]\nlambda2 = -1.0\n[ffm]\nepsilon = 2.0\n[far]\nparts = 0\n").unwrap();
    let o = ccreid(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    for key in ["lambda2", "epsilon", "parts"] {
        assert!(err.contains(key), "{key} missing from {err}");
    }
    assert!(!tmp.path().join("run").exists());
    let o = ccreid(&["train", "--config", s(&cfg), "--preset", "nope"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_eval_and_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let run = tmp.path().join("run");
    let o = ccreid(&["train", "--config", s(&cfg), "--out", s(&run), "--dump-embeddings", "--eval-every", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "steps.csv", "final.ckpt", "last.ckpt", "config.toml", "run.json", "embeddings.csv", "report_standard.json", "report_cloth_changing.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[2].ends_with(|c: char| c.is_ascii_digit()), "epoch 2 evaluates: {}", rows[2]);
    let info: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    for key in ["config_hash", "code_version", "seed", "wall_time_secs"] {
        assert!(info.get(key).is_some(), "{key}");
    }
    assert_eq!(
        ccreid(&["train", "--config", s(&cfg), "--out", s(&run)]).status.code(),
        Some(2),
        "existing run directory needs --force"
    );

    let ck = run.join("final.ckpt");
    let ev = tmp.path().join("eval");
    let o = ccreid(&["eval", "--checkpoint", s(&ck), "--out", s(&ev)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("Rank-1") && stdout.contains("cloth_changing"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("report_cloth_changing.json")).unwrap()).unwrap();
    let trained: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report_cloth_changing.json")).unwrap()).unwrap();
    assert_eq!(report["mAP"], trained["mAP"]);

    let other = write_config(tmp.path(), "[losses]\nlambda4 = 0.9\n");
    let o = ccreid(&["eval", "--checkpoint", s(&ck), "--config", s(&other)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("losses"));
    assert_eq!(code(&ccreid(&["eval", "--checkpoint", s(&ck), "--config", s(&cfg)])), 0);

    let ci = tmp.path().join("ci");
    let o = ccreid(&["cluster-inspect", "--checkpoint", s(&ck), "--out", s(&ci)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("purity"));
    assert_eq!(fs::read_to_string(ci.join("clusters.csv")).unwrap().lines().count(), 1 + 4 * 2 * 3);
    let dump: serde_json::Value = serde_json::from_str(&fs::read_to_string(ci.join("clusters.json")).unwrap()).unwrap();
    let dumped: usize = dump.as_object().unwrap().values().flat_map(|c| c.as_array().unwrap()).map(|m| m.as_array().unwrap().len()).sum();
    assert_eq!(dumped, 4 * 2 * 3);
    assert_eq!(code(&ccreid(&["cluster-inspect", "--checkpoint", s(&ck), "--fixed-k", "2"])), 0);

    let gen = tmp.path().join("data");
    assert_eq!(code(&ccreid(&["gen", "--config", s(&cfg), "--out", s(&gen)])), 0);
    let o = ccreid(&["eval", "--checkpoint", s(&ck), "--data", s(&gen), "--protocol", "cloth-changing"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("standard"));
}

#[test]
fn missing_checkpoint_leaves_no_report() {
    let tmp = tempfile::tempdir().unwrap();
    let ev = tmp.path().join("eval");
    let o = ccreid(&["eval", "--checkpoint", s(&tmp.path().join("nope.ckpt")), "--out", s(&ev)]);
    assert_ne!(code(&o), 0);
    assert!(!ev.exists());
}

#[test]
fn untrained_model_can_be_evaluated() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let o = ccreid(&["eval", "--untrained", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn resume_continues_the_same_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let full = tmp.path().join("full");
    let o = ccreid(&["train", "--config", s(&cfg), "--out", s(&full), "--preset", "fire2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let cut = write_config(tmp.path(), "[far]\nparts = 2\n");
    let part = tmp.path().join("part");
    let mut text = fs::read_to_string(&cut).unwrap();
    text = text.replace("[schedule]\n", "[schedule]\ncheckpoint_every = 2\n");
    fs::write(&cut, text).unwrap();
    assert_eq!(code(&ccreid(&["train", "--config", s(&cut), "--out", s(&part)])), 0);
    let resumed = tmp.path().join("resumed");
    let o = ccreid(&["train", "--resume", s(&part.join("epoch_0002.ckpt")), "--out", s(&resumed)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(full.join("metrics.csv")).unwrap(), fs::read_to_string(resumed.join("metrics.csv")).unwrap());

    let other = write_config(tmp.path(), "[losses]\nlambda3 = 0.5\n");
    let o = ccreid(&["train", "--resume", s(&part.join("epoch_0002.ckpt")), "--config", s(&other), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn diverging_run_exits_with_runtime_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace("lr_peak = 1e-3", "lr_peak = 1e200").replace("t0 = 1", "t0 = 0");
    fs::write(&cfg, text).unwrap();
    let run = tmp.path().join("run");
    let o = ccreid(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("last.ckpt").exists());
    let info = fs::read_to_string(run.join("run.json")).unwrap();
    assert!(info.contains("aborted"));
}

#[test]
fn sweep_writes_csv_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("sweep");
    let o = ccreid(&["sweep", "--config", s(&cfg), "--axis", "epsilon", "--values", "0,0.1,0.5", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().skip(1).all(|l| l.contains(",ok,")));
    assert!(fs::metadata(out.join("sweep.svg")).unwrap().len() > 0);

    let bad = tmp.path().join("bad");
    let o = ccreid(&["sweep", "--config", s(&cfg), "--axis", "P_parts", "--values", "2,99", "--out", s(&bad)]);
    assert_eq!(code(&o), 3);
    let csv = fs::read_to_string(bad.join("sweep.csv")).unwrap();
    assert!(csv.contains(",failed,") && csv.contains(",ok,"));
}

#[test]
fn lambda4_zero_sweep_row_matches_no_far_preset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("sweep");
    let o = ccreid(&["sweep", "--config", s(&cfg), "--axis", "lambda4", "--values", "0", "--out", s(&out), "--jobs", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = tmp.path().join("nofar");
    assert_eq!(code(&ccreid(&["train", "--config", s(&cfg), "--preset", "no-far", "--out", s(&run)])), 0);
    assert_eq!(
        fs::read_to_string(out.join("lambda4_0").join("metrics.csv")).unwrap(),
        fs::read_to_string(run.join("metrics.csv")).unwrap()
    );
}
