mod plot;
mod sweep;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ccreid::evalkit::{per_query_csv, write_embedding_dump, Protocol};
use ccreid::ffm::{ClusterMethod, ClusterTable};
use ccreid::synthdata::io::{save_benchmark, ImageFormat};
use ccreid::synthdata::Benchmark;
use ccreid::trainer::{embedding_rows, evaluate, resolve_benchmark, CheckpointBundle, RunConfig, Trainer, PRESETS};
use ccreid::Error;

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("CCREID_GIT_REV"));

#[derive(Parser)]
#[command(name = "ccreid", version = CODE_VERSION, about = "Cloth-changing person re-identification on a synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark into a directory.
    Gen {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "raw")]
        format: Format,
    },
    /// Train a model and write checkpoints, metrics and reports.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write train/query/gallery embeddings to embeddings.csv.
        #[arg(long)]
        dump_embeddings: bool,
    },
    /// Evaluate a checkpoint on the query/gallery splits.
    Eval {
        #[arg(long, required_unless_present = "untrained")]
        checkpoint: Option<PathBuf>,
        /// Evaluate a freshly initialized model built from --config instead.
        #[arg(long)]
        untrained: bool,
        /// Must train the same model as the checkpoint when given.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory; defaults to the checkpoint's own dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        protocol: ProtocolArg,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dump_embeddings: bool,
    },
    /// Cluster the training split with a checkpoint's model and report purity.
    ClusterInspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        radius: Option<f64>,
        /// Per-identity k-means with this many clusters instead of DBSCAN.
        #[arg(long)]
        fixed_k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate once per value of one hyper-parameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        axis: sweep::Axis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Sub-runs trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// List the named presets.
    Presets,
}

#[derive(Args, Clone, Default)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Recorded in run metadata; runs are always bit-reproducible.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite an existing output directory.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Raw,
    Png,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Both,
    Standard,
    ClothChanging,
}

impl ProtocolArg {
    fn protocols(self) -> Vec<Protocol> {
        match self {
            ProtocolArg::Both => Protocol::ALL.to_vec(),
            ProtocolArg::Standard => vec![Protocol::Standard],
            ProtocolArg::ClothChanging => vec![Protocol::ClothChanging],
        }
    }
}

impl RunArgs {
    /// Config file (or defaults) with preset and flag overrides, validated.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(p) = &self.preset {
            c.apply_preset(p)?;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if self.deterministic {
            c.deterministic = true;
        }
        if let Some(o) = &self.out {
            c.out = Some(o.clone());
        }
        if let Some(e) = self.eval_every {
            c.eval_every = e;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Serialize)]
struct RunInfo<'a> {
    command: &'a str,
    code_version: &'a str,
    config_hash: Option<String>,
    training_hash: Option<String>,
    seed: Option<u64>,
    deterministic: Option<bool>,
    started_unix: u64,
    wall_time_secs: f64,
    status: &'a str,
}

fn write_run_json(dir: &Path, command: &str, config: Option<&RunConfig>, started: (u64, Instant), status: &str) -> Result<()> {
    let info = RunInfo {
        command,
        code_version: CODE_VERSION,
        config_hash: config.map(RunConfig::config_hash),
        training_hash: config.map(RunConfig::training_hash),
        seed: config.map(|c| c.seed),
        deterministic: config.map(|c| c.deterministic),
        started_unix: started.0,
        wall_time_secs: started.1.elapsed().as_secs_f64(),
        status,
    };
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&info)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn now() -> (u64, Instant) {
    let unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    (unix, Instant::now())
}

/// Creates `dir`, refusing to reuse one that already holds run outputs.
pub fn prepare_out_dir(dir: &Path, force: bool, markers: &[&str]) -> Result<()> {
    if !force {
        if let Some(m) = markers.iter().find(|m| dir.join(m).exists()) {
            bail!(Error::Config {
                field: "out".into(),
                reason: format!("{} already holds {m}; pass --force to overwrite", dir.display()),
            });
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_gen(run: &RunArgs, format: Format) -> Result<()> {
    let started = now();
    let config = run.resolve()?;
    let dir = config
        .out
        .clone()
        .or_else(|| config.data.dir.clone())
        .ok_or_else(|| Error::Config {
            field: "out".into(),
            reason: "gen needs --out or data.dir".into(),
        })?;
    let bench = ccreid::synthdata::generate_dataset(&config.data.generate)?;
    let format = match format {
        Format::Raw => ImageFormat::Raw,
        Format::Png => ImageFormat::Png,
    };
    save_benchmark(&bench, &dir, format, run.force)?;
    write_run_json(&dir, "gen", Some(&config), started, "ok")?;
    println!(
        "wrote {} train, {} query, {} gallery images to {}",
        bench.train.len(),
        bench.query.len(),
        bench.gallery.len(),
        dir.display()
    );
    Ok(())
}

fn print_results(results: &[ccreid::evalkit::EvalResult]) {
    println!("{:<16} {:>8} {:>8} {:>8} {:>8} {:>8}", "protocol", "Rank-1", "Rank-5", "Rank-10", "mAP", "queries");
    for r in results {
        println!(
            "{:<16} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8}",
            r.protocol.name(),
            100.0 * r.rank(1),
            100.0 * r.rank(5),
            100.0 * r.rank(10),
            100.0 * r.map,
            r.num_queries
        );
    }
}

fn write_reports(dir: &Path, results: &[ccreid::evalkit::EvalResult]) -> Result<()> {
    for r in results {
        let name = r.protocol.name();
        fs::write(dir.join(format!("report_{name}.json")), serde_json::to_string_pretty(&r.report())? + "\n")?;
        fs::write(dir.join(format!("per_query_{name}.csv")), per_query_csv(r))?;
    }
    Ok(())
}

fn cmd_train(run: &RunArgs, resume: Option<&Path>, dump: bool) -> Result<()> {
    let started = now();
    let (mut config, bundle) = match resume {
        Some(path) => {
            let bundle = CheckpointBundle::load(path)?;
            let mut config = bundle.config.clone();
            if run.config.is_some() || run.preset.is_some() || run.seed.is_some() {
                let requested = run.resolve()?;
                bundle.check_config(&requested)?;
                config = requested;
            }
            if let Some(o) = &run.out {
                config.out = Some(o.clone());
            }
            if let Some(e) = run.eval_every {
                config.eval_every = e;
            }
            (config, Some(bundle))
        }
        None => (run.resolve()?, None),
    };
    let out = config.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(&config.name));
    if bundle.is_none() {
        prepare_out_dir(&out, run.force, &["metrics.csv", "last.ckpt", "final.ckpt"])?;
    } else {
        fs::create_dir_all(&out)?;
    }
    let bench = resolve_benchmark(&mut config)?;
    fs::write(out.join("config.toml"), config.to_toml())?;
    let mut trainer = match bundle {
        Some(mut b) => {
            b.config.eval_every = config.eval_every;
            b.config.out = config.out.clone();
            Trainer::from_checkpoint(b, &bench)?
        }
        None => Trainer::new(config.clone(), &bench)?,
    };
    log::info!("training {} for {} epochs into {}", config.name, config.schedule.max_epochs, out.display());
    let outcome = match trainer.run(Some(&out)) {
        Ok(o) => o,
        Err(e) => {
            write_run_json(&out, "train", Some(&config), started, "aborted")?;
            return Err(e.into());
        }
    };
    write_reports(&out, &outcome.final_eval)?;
    if dump {
        write_embedding_dump(&out.join("embeddings.csv"), &trainer.embedding_rows()?)?;
    }
    write_run_json(&out, "train", Some(&config), started, "ok")?;
    print_results(&outcome.final_eval);
    Ok(())
}

fn benchmark_for(config: &mut RunConfig, data: Option<&Path>) -> Result<Benchmark> {
    if let Some(d) = data {
        let trained_on = config.data.generate.image_size;
        config.data.dir = Some(d.to_path_buf());
        let bench = resolve_benchmark(config)?;
        if bench.params.image_size != trained_on {
            bail!(Error::CheckpointMismatch(format!(
                "dataset images are {:?}, the model was trained on {:?}",
                bench.params.image_size, trained_on
            )));
        }
        Ok(bench)
    } else {
        Ok(resolve_benchmark(config)?)
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: Option<&Path>,
    untrained: bool,
    config_path: Option<&Path>,
    data: Option<&Path>,
    protocol: ProtocolArg,
    out: Option<&Path>,
    seed: Option<u64>,
    dump: bool,
) -> Result<()> {
    let started = now();
    let (config, model, bench) = if untrained {
        let mut c = RunArgs {
            config: config_path.map(Path::to_path_buf),
            seed,
            ..RunArgs::default()
        }
        .resolve()?;
        let bench = benchmark_for(&mut c, data)?;
        let model = Trainer::new(c.clone(), &bench)?.model().clone();
        (c, model, bench)
    } else {
        let path = checkpoint.expect("clap requires --checkpoint");
        let bundle = CheckpointBundle::load(path)?;
        if let Some(p) = config_path {
            bundle.check_config(&RunConfig::load(p)?)?;
        }
        let mut model = ccreid::featnet::ReidModel::new(bundle.config.backbone.clone(), bundle.class_ids.len(), 0)?;
        model.params = bundle.params;
        let mut c = bundle.config;
        let bench = benchmark_for(&mut c, data)?;
        (c, model, bench)
    };
    let results = evaluate(&model, &bench, &protocol.protocols())?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_reports(dir, &results)?;
        if dump {
            write_embedding_dump(&dir.join("embeddings.csv"), &embedding_rows(&model, &bench, None)?)?;
        }
        write_run_json(dir, "eval", Some(&config), started, "ok")?;
    }
    print_results(&results);
    Ok(())
}

/// Majority-clothing purity of every cluster.
fn purity(table: &ClusterTable, clothing: &BTreeMap<usize, usize>) -> Vec<f64> {
    (0..table.num_clusters())
        .map(|l| {
            let members = table.members(l);
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for s in members {
                *counts.entry(clothing[s]).or_insert(0) += 1;
            }
            *counts.values().max().unwrap_or(&0) as f64 / members.len() as f64
        })
        .collect()
}

fn cmd_cluster_inspect(checkpoint: &Path, data: Option<&Path>, radius: Option<f64>, fixed_k: Option<usize>, out: Option<&Path>) -> Result<()> {
    let started = now();
    let bundle = CheckpointBundle::load(checkpoint)?;
    let mut config = bundle.config.clone();
    if let Some(r) = radius {
        config.ffm.cluster.radius = r;
    }
    if let Some(k) = fixed_k {
        config.ffm.cluster.method = ClusterMethod::Kmeans;
        config.ffm.cluster.fixed_k = k;
    }
    config.validate()?;
    let bench = benchmark_for(&mut config, data)?;
    let mut trainer_config = config.clone();
    trainer_config.out = None;
    let trainer = Trainer::from_checkpoint(
        CheckpointBundle {
            config: trainer_config.clone(),
            training_hash: trainer_config.training_hash(),
            ..bundle
        },
        &bench,
    )?;
    let features = trainer.train_embeddings()?;
    let table = trainer.cluster(&features)?;
    let clothing: BTreeMap<usize, usize> = bench.train.records.iter().map(|r| (r.sample_id, r.clothing_id)).collect();
    let outfits: BTreeMap<usize, usize> = bench.identities.iter().map(|s| (s.identity_id, s.num_outfits)).collect();
    let pur = purity(&table, &clothing);
    let mut per_id: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (label, p) in pur.iter().enumerate() {
        per_id.entry(table.identity_of(label).expect("label in range")).or_default().push(*p);
    }
    println!("{:<10} {:>8} {:>8} {:>10}", "identity", "outfits", "N_s", "purity");
    for (id, p) in &per_id {
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        println!("{id:<10} {:>8} {:>8} {mean:>10.3}", outfits.get(id).copied().unwrap_or(0), p.len());
    }
    println!("total clusters {} over {} identities", table.num_clusters(), table.num_identities());
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut csv = String::from("sample_id,identity,clothing,pseudo_label\n");
        for r in &bench.train.records {
            let l = table.label_of(r.sample_id).map(|l| l.to_string()).unwrap_or_default();
            csv.push_str(&format!("{},{},{},{l}\n", r.sample_id, r.identity_id, r.clothing_id));
        }
        fs::write(dir.join("clusters.csv"), csv)?;
        let records: BTreeMap<usize, &ccreid::synthdata::SampleRecord> = bench.train.records.iter().map(|r| (r.sample_id, r)).collect();
        let mut dump = serde_json::Map::new();
        for (id, clusters) in &table.clusters {
            let clusters: Vec<Vec<serde_json::Value>> = clusters
                .iter()
                .map(|members| {
                    members
                        .iter()
                        .map(|s| serde_json::json!([s, records[s].clothing_id, records[s].viewpoint]))
                        .collect()
                })
                .collect();
            dump.insert(id.to_string(), serde_json::json!(clusters));
        }
        fs::write(dir.join("clusters.json"), serde_json::to_string_pretty(&dump)?)?;
        write_run_json(dir, "cluster-inspect", Some(&config), started, "ok")?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_config() || matches!(e, Error::CheckpointMismatch(_)) => 2,
        Some(_) => 3,
        None => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen { run, format } => cmd_gen(run, *format),
        Command::Train { run, resume, dump_embeddings } => cmd_train(run, resume.as_deref(), *dump_embeddings),
        Command::Eval {
            checkpoint,
            untrained,
            config,
            data,
            protocol,
            out,
            seed,
            dump_embeddings,
        } => cmd_eval(
            checkpoint.as_deref(),
            *untrained,
            config.as_deref(),
            data.as_deref(),
            *protocol,
            out.as_deref(),
            *seed,
            *dump_embeddings,
        ),
        Command::ClusterInspect {
            checkpoint,
            data,
            radius,
            fixed_k,
            out,
        } => cmd_cluster_inspect(checkpoint, data.as_deref(), *radius, *fixed_k, out.as_deref()),
        Command::Sweep { run, axis, values, jobs } => sweep::cmd_sweep(run, *axis, values, *jobs),
        Command::Presets => {
            for (name, about) in PRESETS {
                println!("{name:<16} {about}");
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
