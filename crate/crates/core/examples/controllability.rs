//! Trains on the synthetic benchmark with rating and diversity augmentation
//! and prints the nine-point controllability report.
//!
//! `cargo run --release --example controllability [epochs]`

use mocdt::augment::{AugmentSpec, Strategy};
use mocdt::pipeline::{run_experiment, ExperimentConfig};

fn main() -> mocdt::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let epochs = std::env::args().nth(1).map_or(30, |s| s.parse().expect("epochs"));
    let mut cfg = ExperimentConfig::default();
    cfg.train.epochs = epochs;
    cfg.eval_last = cfg.eval_last.min(epochs);
    cfg.augment = vec![
        AugmentSpec { strategy: Strategy::Rating, rate: 1.0, seed: 1 },
        AugmentSpec { strategy: Strategy::Diversity, rate: 1.0, seed: 2 },
    ];
    let start = std::time::Instant::now();
    let out = run_experiment(&cfg)?;
    println!("windows: {}, wall: {:.1}s", out.num_windows, start.elapsed().as_secs_f64());
    println!("loss: {:?}", out.loss_curve);
    let last = *out.report.epochs().last().expect("evaluated epochs");
    println!("epoch {last}:");
    for r in out.report.rows_for(last) {
        println!(
            "  ({:.1}, {:.1})  rating {:7.3} ± {:.3}  diversity {:.3} ± {:.3}",
            r.o_rate, r.o_div, r.mean_rating, r.std_rating, r.mean_diversity, r.std_diversity
        );
    }
    if let Some(s) = out.stats {
        println!("{s:#?}");
    }
    Ok(())
}
