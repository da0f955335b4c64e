//! One-axis hyper-parameter sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Result};
use clap::ValueEnum;

use ccreid::evalkit::Protocol;
use ccreid::ffm::ClusterMethod;
use ccreid::synthdata::Benchmark;
use ccreid::trainer::{resolve_benchmark, RunConfig, Trainer};
use ccreid::Error;

use crate::plot::{line_chart, Series};
use crate::{now, prepare_out_dir, write_run_json, RunArgs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    #[value(name = "epsilon")]
    Epsilon,
    /// 1 / tau of the attribute classifier.
    #[value(name = "inv_tau")]
    InvTau,
    #[value(name = "lambda4")]
    Lambda4,
    #[value(name = "P_parts")]
    PParts,
    #[value(name = "K_times")]
    KTimes,
    #[value(name = "radius")]
    Radius,
    /// Per-identity k-means with this many clusters.
    #[value(name = "fixed_k")]
    FixedK,
    #[value(name = "t0")]
    T0,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Epsilon => "epsilon",
            Axis::InvTau => "inv_tau",
            Axis::Lambda4 => "lambda4",
            Axis::PParts => "P_parts",
            Axis::KTimes => "K_times",
            Axis::Radius => "radius",
            Axis::FixedK => "fixed_k",
            Axis::T0 => "t0",
        }
    }

    pub fn apply(self, c: &mut RunConfig, v: f64) -> ccreid::Result<()> {
        let int = || -> ccreid::Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config {
                    field: self.name().into(),
                    reason: format!("needs a non-negative integer, got {v}"),
                })
            }
        };
        match self {
            Axis::Epsilon => c.ffm.epsilon = v,
            Axis::InvTau => {
                if v <= 0.0 {
                    return Err(Error::Config {
                        field: "inv_tau".into(),
                        reason: format!("must be positive, got {v}"),
                    });
                }
                c.ffm.tau = 1.0 / v;
            }
            Axis::Lambda4 => c.losses.lambda4 = v,
            Axis::PParts => c.far.parts = int()?,
            Axis::KTimes => c.far.times = int()?,
            Axis::Radius => c.ffm.cluster.radius = v,
            Axis::FixedK => {
                c.ffm.cluster.method = ClusterMethod::Kmeans;
                c.ffm.cluster.fixed_k = int()?;
            }
            Axis::T0 => c.schedule.t0 = int()?,
        }
        Ok(())
    }
}

/// Outcome of one sweep value.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: f64,
    /// `(protocol, rank-1 %, mAP %)`, empty on failure.
    pub metrics: Vec<(Protocol, f64, f64)>,
    pub error: Option<String>,
}

pub const CSV_HEADER: &str = "value,status,standard_rank1,standard_mAP,cloth_changing_rank1,cloth_changing_mAP";

pub fn rows_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let status = if r.error.is_some() { "failed" } else { "ok" };
        let _ = write!(s, "{},{status}", r.value);
        for p in Protocol::ALL {
            match r.metrics.iter().find(|m| m.0 == p) {
                Some(&(_, r1, map)) => {
                    let _ = write!(s, ",{r1},{map}");
                }
                None => s.push_str(",,"),
            }
        }
        s.push('\n');
    }
    s
}

fn run_one(config: RunConfig, bench: &Benchmark, dir: &Path) -> ccreid::Result<Vec<(Protocol, f64, f64)>> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let out = Trainer::new(config, bench)?.run(Some(dir))?;
    Ok(out.final_eval.iter().map(|r| (r.protocol, 100.0 * r.rank(1), 100.0 * r.map)).collect())
}

pub fn cmd_sweep(run: &RunArgs, axis: Axis, values: &[f64], jobs: usize) -> Result<()> {
    let started = now();
    if values.is_empty() {
        return Err(Error::Config {
            field: "values".into(),
            reason: "no sweep values given".into(),
        }
        .into());
    }
    let mut base = run.resolve()?;
    let out = base.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(format!("sweep_{}", axis.name())));
    prepare_out_dir(&out, run.force, &["sweep.csv"])?;
    let bench = resolve_benchmark(&mut base)?;
    fs::write(out.join("config.toml"), base.to_toml())?;

    let mut jobs_list = Vec::new();
    let mut rows: Vec<Option<SweepRow>> = vec![None; values.len()];
    for (i, &v) in values.iter().enumerate() {
        let mut c = base.clone();
        let prepared = axis.apply(&mut c, v).and_then(|_| c.validate());
        match prepared {
            Ok(()) => {
                c.name = format!("{}_{}={v}", base.name, axis.name());
                jobs_list.push((i, v, c));
            }
            Err(e) => {
                rows[i] = Some(SweepRow {
                    value: v,
                    metrics: Vec::new(),
                    error: Some(e.to_string()),
                })
            }
        }
    }
    let run_job = |(i, v, c): &(usize, f64, RunConfig)| -> (usize, SweepRow) {
        let t = Instant::now();
        let dir = out.join(format!("{}_{v}", axis.name()));
        let res = run_one(c.clone(), &bench, &dir);
        log::info!("{}={v} finished in {:.1}s", axis.name(), t.elapsed().as_secs_f64());
        let row = match res {
            Ok(metrics) => SweepRow {
                value: *v,
                metrics,
                error: None,
            },
            Err(e) => SweepRow {
                value: *v,
                metrics: Vec::new(),
                error: Some(e.to_string()),
            },
        };
        (*i, row)
    };
    let jobs = jobs.max(1);
    let finished: Vec<(usize, SweepRow)> = if jobs == 1 {
        jobs_list.iter().map(run_job).collect()
    } else {
        std::thread::scope(|scope| {
            let chunks: Vec<_> = jobs_list.chunks(jobs_list.len().div_ceil(jobs).max(1)).collect();
            let handles: Vec<_> = chunks.into_iter().map(|chunk| scope.spawn(move || chunk.iter().map(run_job).collect::<Vec<_>>())).collect();
            handles.into_iter().flat_map(|h| h.join().expect("sweep worker panicked")).collect()
        })
    };
    for (i, row) in finished {
        rows[i] = Some(row);
    }
    let rows: Vec<SweepRow> = rows.into_iter().map(|r| r.expect("every value handled")).collect();

    fs::write(out.join("sweep.csv"), rows_csv(&rows))?;
    let mut series = Vec::new();
    for p in Protocol::ALL {
        for (metric, pick) in [("mAP", 2usize), ("Rank-1", 1)] {
            let points: Vec<(f64, f64)> = rows
                .iter()
                .filter_map(|r| r.metrics.iter().find(|m| m.0 == p).map(|m| (r.value, if pick == 1 { m.1 } else { m.2 })))
                .collect();
            if !points.is_empty() {
                series.push(Series {
                    name: format!("{} {metric}", p.name()),
                    points,
                });
            }
        }
    }
    fs::write(out.join("sweep.svg"), line_chart(&format!("sweep over {}", axis.name()), axis.name(), "%", &series))?;

    let failed: Vec<&SweepRow> = rows.iter().filter(|r| r.error.is_some()).collect();
    write_run_json(&out, "sweep", Some(&base), started, if failed.is_empty() { "ok" } else { "partial" })?;
    println!("{:>10} {:>10} {:>10} {:>10} {:>10}", axis.name(), "std R1", "std mAP", "cc R1", "cc mAP");
    for r in &rows {
        match &r.error {
            Some(e) => println!("{:>10} FAILED: {e}", r.value),
            None => {
                let get = |p: Protocol| r.metrics.iter().find(|m| m.0 == p).map(|m| (m.1, m.2)).unwrap_or((f64::NAN, f64::NAN));
                let (s1, sm) = get(Protocol::Standard);
                let (c1, cm) = get(Protocol::ClothChanging);
                println!("{:>10} {s1:>10.2} {sm:>10.2} {c1:>10.2} {cm:>10.2}", r.value);
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(anyhow!("{} of {} sweep values failed", failed.len(), rows.len()))
    }
}
