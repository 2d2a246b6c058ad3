//! Generates the synthetic benchmark and shows what it contains: the rating
//! oracle, the category catalog and logged trajectories with their
//! hindsight objective points.
//!
//! `cargo run --release --example synthetic_data [out_dir]`

use std::path::PathBuf;

use mocdt::corpus::{synth_dataset, write_csv, OracleFormat, SynthSpec};
use mocdt::train::make_windows;

fn main() -> mocdt::Result<()> {
    let spec = SynthSpec::default();
    let (ds, oracle) = synth_dataset(&spec)?;
    println!(
        "{} users, {} items, {} categories, {} trajectories of length {}",
        ds.num_users,
        ds.num_items(),
        ds.catalog.num_categories(),
        ds.trajectories.len(),
        spec.traj_len
    );

    let ratings = oracle.as_slice();
    let mean = ratings.iter().sum::<f64>() / ratings.len() as f64;
    println!("oracle mean rating {mean:.3} on scale {:?}", oracle.scale());

    let first = &ds.trajectories[0];
    println!("user 0 starts with:");
    for step in first.steps.iter().take(5) {
        println!(
            "  item {:3}  rating {:.2}  categories {:?}",
            step.item,
            step.rating,
            ds.catalog.categories(step.item)?
        );
    }

    let windows = make_windows(&ds, 10, 50)?;
    let n = windows.len() as f64;
    let o_rate = windows.iter().map(|w| w.point.o_rate).sum::<f64>() / n;
    let o_div = windows.iter().map(|w| w.point.o_div).sum::<f64>() / n;
    println!("{} training windows, mean point ({o_rate:.3}, {o_div:.3})", windows.len());

    if let Some(dir) = std::env::args().nth(1).map(PathBuf::from) {
        std::fs::create_dir_all(&dir).map_err(|e| mocdt::Error::io(&dir, e))?;
        write_csv(&ds, &dir.join("interactions.csv"), &dir.join("categories.csv"))?;
        let path = dir.join("oracle.csv");
        let file = std::fs::File::create(&path).map_err(|e| mocdt::Error::io(&path, e))?;
        oracle
            .write(std::io::BufWriter::new(file), OracleFormat::Long)
            .map_err(|e| mocdt::Error::io(&path, e))?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}
