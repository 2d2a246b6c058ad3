//! Trains briefly, then generates recommendation lists for one user at the
//! two extreme objective points, greedily and by sampling.
//!
//! `cargo run --release --example generation [epochs]`

use mocdt::augment::{AugmentSpec, Strategy};
use mocdt::infer::{generate_scored, DecodeMode, GenRequest};
use mocdt::objectives::ObjectivePoint;
use mocdt::pipeline::{run_experiment, ExperimentConfig};

fn main() -> mocdt::Result<()> {
    let epochs = std::env::args().nth(1).map_or(5, |s| s.parse().expect("epochs"));
    let mut cfg = ExperimentConfig::default();
    cfg.synth.num_users = 80;
    cfg.train.epochs = epochs;
    cfg.eval_last = 1;
    cfg.augment = vec![
        AugmentSpec { strategy: Strategy::Rating, rate: 1.0, seed: 1 },
        AugmentSpec { strategy: Strategy::Diversity, rate: 1.0, seed: 2 },
    ];
    let out = run_experiment(&cfg)?;
    let user = 6;
    let items = out.dataset.user_items(user)?;
    let history: Vec<usize> = items[..24].iter().map(|e| e.0).collect();

    for point in [ObjectivePoint::new(1.0, 0.0)?, ObjectivePoint::new(0.0, 1.0)?] {
        for mode in [DecodeMode::Greedy, "sample:0.7".parse()?] {
            let req = GenRequest {
                mode,
                seed: 3,
                ..GenRequest::greedy(user, history.clone(), point, cfg.horizon)
            };
            let res = generate_scored(&out.model, &req, &out.oracle, &out.dataset.catalog)?;
            let (rating, div) = res.realized.expect("scored");
            println!("{point} {mode:?}: rating {rating:.2}, diversity {div:.3}");
            println!("    {:?}", res.items);
        }
    }
    Ok(())
}
