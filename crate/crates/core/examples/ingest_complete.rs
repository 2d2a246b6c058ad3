//! Round trip through the CSV ingest path, then fill the rating matrix by
//! matrix factorization and compare it with the known ground truth.
//!
//! `cargo run --release --example ingest_complete`

use mocdt::corpus::{complete_matrix, ingest_readers, synth_dataset, write_csv_writers, MfConfig, SynthSpec};

fn main() -> mocdt::Result<()> {
    let (truth_ds, truth) = synth_dataset(&SynthSpec {
        num_users: 100,
        num_items: 150,
        traj_len: 40,
        ..SynthSpec::default()
    })?;
    let (mut inter, mut cats) = (Vec::new(), Vec::new());
    write_csv_writers(&truth_ds, &mut inter, &mut cats)?;
    println!("interactions.csv starts with:");
    for line in String::from_utf8_lossy(&inter).lines().take(3) {
        println!("  {line}");
    }

    let ds = ingest_readers(&inter[..], &cats[..], (1.0, 5.0))?;
    println!("ingested {} trajectories over {} items", ds.trajectories.len(), ds.num_items());

    let done = complete_matrix(&ds, &MfConfig::default())?;
    let (mut err, mut n) = (0.0, 0);
    for u in 0..ds.num_users {
        let (ext_u, row) = (ds.user_ids.to_external(u).unwrap() as usize, done.oracle.row(u));
        for (i, r) in row.iter().enumerate() {
            let ext_i = ds.item_ids.to_external(i).unwrap() as usize;
            err += (r - truth.rating(ext_u, ext_i)?).abs();
            n += 1;
        }
    }
    println!("training MAE {:.4}, MAE against ground truth {:.4}", done.train_mae, err / n as f64);
    Ok(())
}
