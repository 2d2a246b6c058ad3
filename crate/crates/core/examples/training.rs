//! Trains a small model on hindsight-labelled windows, writes a checkpoint
//! per epoch and reloads the last one.
//!
//! `cargo run --release --example training [epochs]`

use mocdt::corpus::{synth_dataset, SynthSpec};
use mocdt::model::MocdtModel;
use mocdt::pipeline::ModelParams;
use mocdt::train::{make_windows, train_with_checkpoints, TrainConfig};

fn main() -> mocdt::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let epochs = std::env::args().nth(1).map_or(5, |s| s.parse().expect("epochs"));
    let (ds, _) = synth_dataset(&SynthSpec {
        num_users: 60,
        num_items: 100,
        ..SynthSpec::default()
    })?;
    let horizon = 10;
    let params = ModelParams::default();
    let windows = make_windows(&ds, horizon, params.max_hist)?;
    let mut model = MocdtModel::new(params.resolve(&ds, horizon))?;
    println!("{} windows, {} parameters", windows.len(), model.num_params());

    let dir = std::env::temp_dir().join("mocdt-training-example");
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let (curve, paths) = train_with_checkpoints(&mut model, &windows, &cfg, &dir)?;
    for (e, l) in curve.iter().enumerate() {
        println!("epoch {e}: {l:.4}");
    }
    let last = paths.last().expect("at least one epoch");
    let reloaded = MocdtModel::load(last)?;
    println!("reloaded {} identical: {}", last.display(), reloaded == model);
    Ok(())
}
