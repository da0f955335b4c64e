//! Trains the ablation presets over several seeds and prints the
//! cloth-changing mAP of each.
//!
//! ```text
//! cargo run --release --example ablation -- [seeds] [presets...]
//! ```

use std::time::Instant;

use ccreid::evalkit::Protocol;
use ccreid::synthdata::generate_dataset;
use ccreid::trainer::{RunConfig, Trainer};

fn main() -> ccreid::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(3);
    let presets: Vec<&str> = if args.len() > 1 {
        args[1..].iter().map(String::as_str).collect()
    } else {
        vec!["fire2", "no-far", "wo-attr", "baseline"]
    };
    let base = match std::env::var("ABLATION_CONFIG") {
        Ok(p) => RunConfig::load(p.as_ref())?,
        Err(_) => RunConfig::default(),
    };
    let bench = generate_dataset(&base.data.generate)?;
    println!("train {} query {} gallery {}", bench.train.len(), bench.query.len(), bench.gallery.len());
    for preset in presets {
        let mut maps = Vec::new();
        for seed in 0..seeds {
            let mut c = base.clone();
            c.apply_preset(preset)?;
            c.seed = seed;
            let start = Instant::now();
            let out = Trainer::new(c, &bench)?.run(None)?;
            let cc = out.final_eval.iter().find(|r| r.protocol == Protocol::ClothChanging).expect("protocol evaluated");
            let std = out.final_eval.iter().find(|r| r.protocol == Protocol::Standard).expect("protocol evaluated");
            println!(
                "{preset:>16} seed {seed}: cc mAP {:6.2} R1 {:6.2} | std mAP {:6.2} R1 {:6.2} | {:.1}s",
                100.0 * cc.map,
                100.0 * cc.rank(1),
                100.0 * std.map,
                100.0 * std.rank(1),
                start.elapsed().as_secs_f64()
            );
            maps.push(100.0 * cc.map);
        }
        println!("{preset:>16} mean cc mAP {:.2}", maps.iter().sum::<f64>() / maps.len() as f64);
    }
    Ok(())
}
