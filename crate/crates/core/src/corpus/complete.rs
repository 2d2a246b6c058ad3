use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, RatingOracle};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfConfig {
    pub rank: usize,
    pub epochs: usize,
    pub lr: f64,
    pub reg: f64,
    pub seed: u64,
}

impl Default for MfConfig {
    fn default() -> Self {
        MfConfig {
            rank: 8,
            epochs: 100,
            lr: 0.01,
            reg: 0.02,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub oracle: RatingOracle,
    /// Mean absolute error on the observed entries after fitting.
    pub train_mae: f64,
}

/// Biased matrix factorization `μ + b_u + b_i + p_u · q_i`, fitted by seeded
/// SGD on squared error with L2 regularization, then materialized densely and
/// clipped into the rating scale.
///
/// Observations come from the logged trajectories only.
pub fn complete_matrix(dataset: &Dataset, cfg: &MfConfig) -> Result<Completion> {
    if cfg.rank == 0 {
        return Err(Error::Config {
            field: "rank".into(),
            message: "must be >= 1".into(),
        });
    }
    let obs: Vec<(usize, usize, f64)> = dataset
        .logged()
        .flat_map(|t| t.steps.iter().map(|s| (s.user, s.item, s.rating)))
        .collect();
    if obs.is_empty() {
        return Err(Error::Domain("no observed interactions to fit".into()));
    }
    let (nu, ni, k) = (dataset.num_users, dataset.num_items(), cfg.rank);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mu = obs.iter().map(|o| o.2).sum::<f64>() / obs.len() as f64;
    let init = 0.1 / (k as f64).sqrt();
    let mut p: Vec<f64> = (0..nu * k).map(|_| rng.gen_range(-init..init)).collect();
    let mut q: Vec<f64> = (0..ni * k).map(|_| rng.gen_range(-init..init)).collect();
    let mut bu = vec![0.0; nu];
    let mut bi = vec![0.0; ni];
    let mut order: Vec<usize> = (0..obs.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sq = 0.0;
        for &idx in &order {
            let (u, i, r) = obs[idx];
            let (pu, qi) = (u * k, i * k);
            let dot: f64 = (0..k).map(|f| p[pu + f] * q[qi + f]).sum();
            let err = r - (mu + bu[u] + bi[i] + dot);
            sq += err * err;
            bu[u] += cfg.lr * (err - cfg.reg * bu[u]);
            bi[i] += cfg.lr * (err - cfg.reg * bi[i]);
            for f in 0..k {
                let (pf, qf) = (p[pu + f], q[qi + f]);
                p[pu + f] += cfg.lr * (err * qf - cfg.reg * pf);
                q[qi + f] += cfg.lr * (err * pf - cfg.reg * qf);
            }
        }
        if !sq.is_finite() {
            return Err(Error::Divergence(format!(
                "matrix factorization loss became non-finite at epoch {epoch}; try a smaller lr than {}",
                cfg.lr
            )));
        }
    }

    let predict = |u: usize, i: usize| -> f64 {
        let dot: f64 = (0..k).map(|f| p[u * k + f] * q[i * k + f]).sum();
        mu + bu[u] + bi[i] + dot
    };
    let mut dense = Vec::with_capacity(nu * ni);
    for u in 0..nu {
        for i in 0..ni {
            dense.push(predict(u, i));
        }
    }
    let oracle = RatingOracle::from_dense(nu, ni, dataset.scale(), dense)?;
    let train_mae = obs
        .iter()
        .map(|&(u, i, r)| (oracle.as_slice()[u * ni + i] - r).abs())
        .sum::<f64>()
        / obs.len() as f64;
    Ok(Completion { oracle, train_mae })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Catalog, Interaction, Origin, Trajectory};

    fn dataset_from(obs: &[(usize, usize, f64)], nu: usize, ni: usize) -> Dataset {
        let mut trajs = Vec::new();
        for u in 0..nu {
            let steps: Vec<Interaction> = obs
                .iter()
                .filter(|o| o.0 == u)
                .enumerate()
                .map(|(t, &(user, item, rating))| Interaction {
                    user,
                    item,
                    rating,
                    timestamp: t as i64,
                })
                .collect();
            trajs.push(Trajectory::new(u, steps, Origin::Logged).unwrap());
        }
        let catalog = Catalog::new(1, vec![vec![0]; ni]).unwrap();
        Dataset::new(catalog, trajs, (1.0, 5.0), nu).unwrap()
    }

    #[test]
    fn constant_ratings_are_recovered() {
        let obs: Vec<_> = (0..10)
            .flat_map(|u| (0..8).filter(move |i| (u + i) % 2 == 0).map(move |i| (u, i, 3.7)))
            .collect();
        let ds = dataset_from(&obs, 10, 8);
        let c = complete_matrix(&ds, &MfConfig { rank: 2, epochs: 50, ..MfConfig::default() }).unwrap();
        for &(u, i, r) in &obs {
            assert!((c.oracle.rating(u, i).unwrap() - r).abs() < 0.05);
        }
        assert!(c.train_mae < 0.05);
    }

    #[test]
    fn rank_two_held_out_error() {
        // Ground truth from explicit rank-2 factors; 60% observed.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (nu, ni) = (60, 50);
        let uf: Vec<[f64; 2]> = (0..nu).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let vf: Vec<[f64; 2]> = (0..ni).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let truth = |u: usize, i: usize| 3.0 + 1.0 * (uf[u][0] * vf[i][0] + uf[u][1] * vf[i][1]);
        let mut observed = Vec::new();
        let mut held = Vec::new();
        for u in 0..nu {
            for i in 0..ni {
                if rng.gen_bool(0.6) {
                    observed.push((u, i, truth(u, i)));
                } else {
                    held.push((u, i, truth(u, i)));
                }
            }
        }
        let ds = dataset_from(&observed, nu, ni);
        let cfg = MfConfig {
            rank: 2,
            epochs: 200,
            lr: 0.02,
            reg: 0.01,
            seed: 1,
        };
        let c = complete_matrix(&ds, &cfg).unwrap();
        let mae = held
            .iter()
            .map(|&(u, i, r)| (c.oracle.rating(u, i).unwrap() - r).abs())
            .sum::<f64>()
            / held.len() as f64;
        assert!(mae < 0.25, "held-out MAE {mae}");
        let again = complete_matrix(&ds, &cfg).unwrap();
        assert_eq!(again.oracle, c.oracle);
        assert!(c.oracle.as_slice().iter().all(|r| (1.0..=5.0).contains(r)));
    }

    #[test]
    fn divergence_is_reported() {
        let obs: Vec<_> = (0..5).flat_map(|u| (0..5).map(move |i| (u, i, 1.0 + (u * i % 5) as f64))).collect();
        let ds = dataset_from(&obs, 5, 5);
        let err = complete_matrix(&ds, &MfConfig { lr: 50.0, epochs: 200, ..MfConfig::default() }).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)), "{err:?}");
        assert!(err.to_string().contains("smaller lr"));
    }
}
