//! Hindsight-labelled training windows and the minibatch training loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, ItemId, UserId};
use crate::diffcore::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::model::MocdtModel;
use crate::objectives::{cumulative_rating, diversity, normalize, FutureWindow, ObjectivePoint};

/// One supervised example: predict `targets` from the user, the history and
/// the objective point the targets actually achieved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingWindow {
    pub user: UserId,
    /// Most recent item last.
    pub history: Vec<ItemId>,
    pub targets: Vec<ItemId>,
    pub point: ObjectivePoint,
}

/// One window per split `t ∈ [1, |τ| − H]` of every trajectory, in
/// (trajectory, t) order. History is items `1..=t` cut to the last
/// `max_hist`, targets are items `t+1..=t+H`.
pub fn make_windows(dataset: &Dataset, horizon: usize, max_hist: usize) -> Result<Vec<TrainingWindow>> {
    if horizon < 2 {
        return Err(Error::Domain(format!("horizon must be >= 2, got {horizon}")));
    }
    let mut out = Vec::new();
    for traj in &dataset.trajectories {
        let items = traj.items();
        let ratings = traj.ratings();
        if items.len() <= horizon {
            continue;
        }
        for t in 1..=items.len() - horizon {
            let future = FutureWindow::new(items[t..t + horizon].to_vec(), ratings[t..t + horizon].to_vec())?;
            let point = normalize(
                cumulative_rating(&future),
                diversity(&future, &dataset.catalog)?,
                horizon,
                dataset.r_max,
            )?;
            out.push(TrainingWindow {
                user: traj.user,
                history: items[t.saturating_sub(max_hist)..t].to_vec(),
                targets: future.items,
                point,
            });
        }
    }
    Ok(out)
}

/// Optimizer settings. None of the defaults come from the method itself;
/// they were picked on the synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Maximum global L2 norm of each minibatch gradient.
    pub grad_clip: f64,
    /// Reshuffle the windows every epoch.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 5e-4,
            seed: 0,
            grad_clip: 1.0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: field.into(),
                message: message.into(),
            })
        };
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr", "must be a positive finite value");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip", "must be positive");
        }
        Ok(())
    }
}

fn canonical_key(w: &TrainingWindow) -> (UserId, &[ItemId], &[ItemId], u64, u64) {
    (
        w.user,
        &w.history,
        &w.targets,
        w.point.o_rate.to_bits(),
        w.point.o_div.to_bits(),
    )
}

/// Window order used for epoch `e` (0-based): canonical order, then one
/// seeded permutation per epoch drawn from a single stream.
pub fn epoch_orders(windows: &[TrainingWindow], cfg: &TrainConfig) -> Vec<Vec<usize>> {
    let mut base: Vec<usize> = (0..windows.len()).collect();
    base.sort_by(|&a, &b| canonical_key(&windows[a]).cmp(&canonical_key(&windows[b])));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.epochs)
        .map(|_| {
            let mut order = base.clone();
            if cfg.shuffle {
                order.shuffle(&mut rng);
            }
            order
        })
        .collect()
}

/// Adam over shuffled minibatches with global-norm clipping.
///
/// Returns the mean minibatch loss of every epoch. `on_epoch(epoch, model,
/// mean_loss)` runs after each epoch, e.g. to write a checkpoint.
pub fn train(
    model: &mut MocdtModel,
    windows: &[TrainingWindow],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &MocdtModel, f64) -> Result<()>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::Domain("no training windows".into()));
    }
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), model.params());
    let mut curve = Vec::with_capacity(cfg.epochs);
    for (epoch, order) in epoch_orders(windows, cfg).into_iter().enumerate() {
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainingWindow> = chunk.iter().map(|&i| &windows[i]).collect();
            let (loss, mut grads) = {
                let mut g = model.graph();
                let loss = model.batch_loss(&mut g, &batch).map_err(|e| match e {
                    Error::Divergence(m) => {
                        Error::Divergence(format!("epoch {epoch}, batch {bi}: {m}"))
                    }
                    other => other,
                })?;
                g.backward(loss)?;
                (g.value(loss).item(), g.param_grads())
            };
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss or gradient at epoch {epoch}, batch {bi}; try a smaller lr than {}",
                    cfg.lr
                )));
            }
            grads.clip_global_norm(cfg.grad_clip);
            opt.step(model.params_mut(), &grads)?;
            total += loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::info!("epoch {epoch}: mean loss {mean:.6}");
        curve.push(mean);
        on_epoch(epoch, model, mean)?;
    }
    Ok(curve)
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}

/// [`train`] writing `epoch_NNN.ckpt` into `dir` after every epoch.
pub fn train_with_checkpoints(
    model: &mut MocdtModel,
    windows: &[TrainingWindow],
    cfg: &TrainConfig,
    dir: &Path,
) -> Result<(Vec<f64>, Vec<PathBuf>)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    let curve = train(model, windows, cfg, |epoch, m, _| {
        let p = checkpoint_path(dir, epoch);
        m.save(&p)?;
        paths.push(p);
        Ok(())
    })?;
    Ok((curve, paths))
}

pub fn write_loss_curve(curve: &[f64], mut w: impl Write) -> std::io::Result<()> {
    let mut out = String::from("epoch,mean_loss\n");
    for (e, l) in curve.iter().enumerate() {
        out.push_str(&format!("{e},{l}\n"));
    }
    w.write_all(out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_dataset, SynthSpec};
    use crate::model::ModelConfig;
    use std::collections::BTreeSet;

    fn small() -> Dataset {
        synth_dataset(&SynthSpec {
            num_users: 6,
            num_items: 30,
            num_categories: 4,
            traj_len: 12,
            latent_rank: 2,
            seed: 2,
            ..SynthSpec::default()
        })
        .unwrap()
        .0
    }

    #[test]
    fn window_counts() {
        let ds = small();
        assert_eq!(make_windows(&ds, 10, 50).unwrap().len(), 6 * 2);
        assert!(make_windows(&ds, 12, 50).unwrap().is_empty());
        let w = make_windows(&ds, 3, 4).unwrap();
        assert_eq!(w.len(), 6 * 9);
        assert_eq!(w[0].history.len(), 1);
        assert!(w.iter().all(|w| w.history.len() <= 4));
        let items = ds.trajectories[0].items();
        assert_eq!(w[8].history, items[5..9].to_vec());
        assert_eq!(w[8].targets, items[9..12].to_vec());
    }

    #[test]
    fn window_points_recompute_bitwise() {
        let ds = small();
        for w in make_windows(&ds, 4, 50).unwrap() {
            let cats: Vec<Vec<u32>> = w
                .targets
                .iter()
                .map(|&i| ds.catalog.categories(i).unwrap().to_vec())
                .collect();
            let mut total = 0.0;
            for k in 1..cats.len() {
                let prior: BTreeSet<u32> = cats[..k].iter().flatten().copied().collect();
                let cur: BTreeSet<u32> = cats[k].iter().copied().collect();
                let inter = prior.intersection(&cur).count();
                let union = prior.union(&cur).count();
                total += 1.0 - inter as f64 / union as f64;
            }
            assert_eq!(w.point.o_div, (total / (cats.len() - 1) as f64).clamp(0.0, 1.0));
        }
    }

    #[test]
    fn shuffles_are_permutations() {
        let ds = small();
        let windows = make_windows(&ds, 3, 5).unwrap();
        let cfg = TrainConfig { epochs: 4, ..TrainConfig::default() };
        let orders = epoch_orders(&windows, &cfg);
        for o in &orders {
            let mut s = o.clone();
            s.sort();
            assert_eq!(s, (0..windows.len()).collect::<Vec<_>>());
        }
        assert_ne!(orders[0], orders[1]);
    }

    fn tiny_model(ds: &Dataset, h: usize) -> MocdtModel {
        MocdtModel::new(ModelConfig {
            d_model: 8,
            layers: 1,
            heads: 2,
            horizon: h,
            vocab: ds.num_items(),
            num_users: ds.num_users,
            max_hist: 5,
            seed: 1,
            control_layer: None,
        })
        .unwrap()
    }

    #[test]
    fn deterministic_and_order_invariant() {
        let ds = small();
        let windows = make_windows(&ds, 3, 5).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 8, lr: 5e-3, ..TrainConfig::default() };
        let run = |w: &[TrainingWindow]| {
            let mut m = tiny_model(&ds, 3);
            let curve = train(&mut m, w, &cfg, |_, _, _| Ok(())).unwrap();
            (curve, m)
        };
        let (c1, m1) = run(&windows);
        let (c2, m2) = run(&windows);
        assert_eq!(c1, c2);
        assert_eq!(m1, m2);
        let mut reversed = windows.clone();
        reversed.reverse();
        let (c3, m3) = run(&reversed);
        assert_eq!(c1, c3);
        assert_eq!(m1, m3);
    }

    #[test]
    fn first_epoch_near_uniform_loss() {
        let ds = small();
        let windows = make_windows(&ds, 3, 5).unwrap();
        let mut m = tiny_model(&ds, 3);
        let cfg = TrainConfig { epochs: 1, lr: 1e-3, ..TrainConfig::default() };
        let curve = train(&mut m, &windows, &cfg, |_, _, _| Ok(())).unwrap();
        let ln_v = (ds.num_items() as f64).ln();
        assert!((curve[0] - ln_v).abs() < 0.05 * ln_v, "{} vs {ln_v}", curve[0]);
    }

    #[test]
    fn loss_curve_csv() {
        let mut buf = Vec::new();
        write_loss_curve(&[3.5, 2.25], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,mean_loss\n0,3.5\n1,2.25\n");
    }

    #[test]
    fn rejects_bad_config() {
        let ds = small();
        let windows = make_windows(&ds, 3, 5).unwrap();
        let mut m = tiny_model(&ds, 3);
        let cfg = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(matches!(train(&mut m, &windows, &cfg, |_, _, _| Ok(())), Err(Error::Config { .. })));
        assert!(matches!(train(&mut m, &[], &TrainConfig::default(), |_, _, _| Ok(())), Err(Error::Domain(_))));
    }
}
