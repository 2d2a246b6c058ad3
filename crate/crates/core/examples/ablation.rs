//! Layer-count and horizon sweeps on a reduced benchmark, printed as
//! markdown tables.
//!
//! `cargo run --release --example ablation [epochs]`

use mocdt::augment::{AugmentSpec, Strategy};
use mocdt::corpus::{synth_dataset, SynthSpec};
use mocdt::eval::{ablation_sweep, AblationAxis, EvalConfig};
use mocdt::pipeline::{training_split, ModelParams};
use mocdt::train::TrainConfig;

fn main() -> mocdt::Result<()> {
    let epochs = std::env::args().nth(1).map_or(3, |s| s.parse().expect("epochs"));
    let (ds, oracle) = synth_dataset(&SynthSpec {
        num_users: 60,
        num_items: 120,
        traj_len: 40,
        ..SynthSpec::default()
    })?;
    let eval = EvalConfig::default();
    let aug = [AugmentSpec { strategy: Strategy::Diversity, rate: 1.0, seed: 1 }];
    let train_set = training_split(&ds, eval.eval_fraction, &aug, 10)?;
    let base = ModelParams { d_model: 16, ..ModelParams::default() }.resolve(&ds, 10);
    let train_cfg = TrainConfig { epochs, ..TrainConfig::default() };
    for axis in [AblationAxis::default_layers(), AblationAxis::default_horizon()] {
        let table = ablation_sweep(&train_set, &ds, &oracle, &axis, &base, &train_cfg, &eval)?;
        println!("{}", table.to_markdown());
    }
    Ok(())
}
