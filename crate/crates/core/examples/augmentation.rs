//! The three to-go strategies on one trajectory, then whole-dataset
//! augmentation and how it shifts the objective points seen in training.
//!
//! `cargo run --release --example augmentation`

use mocdt::augment::{augment_at, augment_dataset, AugmentSpec, Strategy};
use mocdt::corpus::{synth_dataset, SynthSpec};
use mocdt::objectives::{diversity_of, DiversityConvention};
use mocdt::train::make_windows;

fn main() -> mocdt::Result<()> {
    let (ds, _) = synth_dataset(&SynthSpec::default())?;
    let horizon = 5;
    let traj = &ds.trajectories[3];
    for strategy in [Strategy::Rating, Strategy::Diversity, Strategy::Random] {
        let spec = AugmentSpec { strategy, rate: 1.0, seed: 7 };
        let aug = augment_at(&ds, traj, 6, &spec, horizon)?.expect("long enough record");
        let items: Vec<usize> = aug.togo.iter().map(|e| e.0).collect();
        let rating: f64 = aug.togo[..horizon].iter().map(|e| e.1).sum();
        let div = diversity_of(&items[..horizon], &ds.catalog, DiversityConvention::FromSecond)?;
        println!("{strategy:>9}: {items:?}");
        println!("           first {horizon}: rating {rating:.2}, diversity {div:.3}");
    }

    let summary = |name: &str, d: &mocdt::corpus::Dataset| -> mocdt::Result<()> {
        let w = make_windows(d, 10, 50)?;
        let n = w.len() as f64;
        let div = w.iter().map(|x| x.point.o_div).sum::<f64>() / n;
        let high = w.iter().filter(|x| x.point.o_div >= 0.9).count();
        println!("{name:>10}: {} windows, mean o_div {div:.3}, {high} with o_div >= 0.9", w.len());
        Ok(())
    };
    summary("logged", &ds)?;
    for strategy in [Strategy::Rating, Strategy::Diversity] {
        let aug = augment_dataset(&ds, &AugmentSpec { strategy, rate: 1.0, seed: 1 }, 10)?;
        summary(&format!("+{strategy}"), &aug)?;
    }
    Ok(())
}
