use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Catalog, CategoryId, Dataset, Interaction, Origin, RatingOracle, Trajectory};
use crate::error::{Error, Result};

/// `rating = offset + gain * (u · v)`, clipped to the scale afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingAffine {
    pub offset: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub num_categories: usize,
    pub traj_len: usize,
    pub latent_rank: usize,
    pub seed: u64,
    pub r_min: f64,
    pub r_max: f64,
    /// Each user's behavior policy picks the best remaining item with a
    /// probability drawn uniformly from this range, else a uniform item.
    pub greedy_prob: (f64, f64),
    /// Std of an item's latent offset from its primary category's centroid.
    pub item_noise: f64,
    /// Extra categories of an item are drawn from the `extra_span`
    /// categories following its primary one (cyclically), so items sharing a
    /// primary category also share most secondary ones.
    pub extra_span: usize,
    /// Defaults to centering on the scale midpoint with a quarter-range gain
    /// per unit of normalized affinity.
    pub affine: Option<RatingAffine>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_users: 200,
            num_items: 300,
            num_categories: 12,
            traj_len: 30,
            latent_rank: 4,
            seed: 0,
            r_min: 1.0,
            r_max: 5.0,
            greedy_prob: (0.5, 1.0),
            item_noise: 0.2,
            extra_span: 2,
            affine: None,
        }
    }
}

impl SynthSpec {
    pub fn affine(&self) -> RatingAffine {
        self.affine.unwrap_or(RatingAffine {
            offset: 0.5 * (self.r_min + self.r_max),
            gain: 0.25 * (self.r_max - self.r_min) / (self.latent_rank as f64).sqrt(),
        })
    }

    fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: field.into(),
                message: message.into(),
            })
        };
        if self.latent_rank == 0 {
            return bad("latent_rank", "must be >= 1");
        }
        if self.num_users == 0 || self.num_items == 0 {
            return bad("num_users", "users and items must be non-empty");
        }
        if self.num_categories == 0 {
            return bad("num_categories", "must be >= 1");
        }
        if self.traj_len > self.num_items {
            return Err(Error::Domain(format!(
                "traj_len {} exceeds num_items {}; trajectories sample without replacement",
                self.traj_len, self.num_items
            )));
        }
        if !(self.r_min < self.r_max) {
            return bad("r_min", "requires r_min < r_max");
        }
        let (lo, hi) = self.greedy_prob;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return bad("greedy_prob", "must be a sub-range of [0, 1]");
        }
        Ok(())
    }
}

/// Dense `clip(offset + gain * U Vᵀ)` from explicit latent factors.
pub fn low_rank_ratings(
    users: &[Vec<f64>],
    items: &[Vec<f64>],
    affine: RatingAffine,
    scale: (f64, f64),
) -> Result<RatingOracle> {
    let mut ratings = Vec::with_capacity(users.len() * items.len());
    for u in users {
        for v in items {
            if u.len() != v.len() {
                return Err(Error::Shape {
                    op: "low_rank_ratings",
                    left: vec![u.len()],
                    right: vec![v.len()],
                });
            }
            let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            ratings.push(affine.offset + affine.gain * dot);
        }
    }
    RatingOracle::from_dense(users.len(), items.len(), scale, ratings)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Seeded synthetic dataset plus its ground-truth rating matrix.
///
/// Items get a primary category and up to two extra ones; item factors are
/// drawn around their primary category's centroid, so a user's favorite
/// items concentrate in few categories.
pub fn synth_dataset(spec: &SynthSpec) -> Result<(Dataset, RatingOracle)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rank = spec.latent_rank;

    let centroids: Vec<Vec<f64>> = (0..spec.num_categories)
        .map(|_| normal_vec(&mut rng, rank))
        .collect();
    let mut categories: Vec<Vec<CategoryId>> = Vec::with_capacity(spec.num_items);
    let mut item_factors = Vec::with_capacity(spec.num_items);
    for _ in 0..spec.num_items {
        let primary = rng.gen_range(0..spec.num_categories);
        let span = spec.extra_span.min(spec.num_categories - 1);
        let extra = rng.gen_range(0..3usize).min(span);
        let mut cats = vec![primary as CategoryId];
        while cats.len() < 1 + extra {
            let c = ((primary + rng.gen_range(1..=span)) % spec.num_categories) as CategoryId;
            if !cats.contains(&c) {
                cats.push(c);
            }
        }
        let noise = normal_vec(&mut rng, rank);
        let v: Vec<f64> = centroids[primary]
            .iter()
            .zip(&noise)
            .map(|(c, n)| c + spec.item_noise * n)
            .collect();
        item_factors.push(v);
        categories.push(cats);
    }
    let user_factors: Vec<Vec<f64>> = (0..spec.num_users)
        .map(|_| normal_vec(&mut rng, rank))
        .collect();
    let oracle = low_rank_ratings(
        &user_factors,
        &item_factors,
        spec.affine(),
        (spec.r_min, spec.r_max),
    )?;
    let catalog = Catalog::new(spec.num_categories, categories)?;

    let mut trajectories = Vec::with_capacity(spec.num_users);
    for user in 0..spec.num_users {
        let p_greedy = rng.gen_range(spec.greedy_prob.0..=spec.greedy_prob.1);
        let row = oracle.row(user);
        let mut by_rating: Vec<usize> = (0..spec.num_items).collect();
        by_rating.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let mut used = vec![false; spec.num_items];
        let mut steps = Vec::with_capacity(spec.traj_len);
        for t in 0..spec.traj_len {
            let item = if rng.gen_bool(p_greedy) {
                *by_rating.iter().find(|&&i| !used[i]).expect("traj_len <= num_items")
            } else {
                let remaining: Vec<usize> = (0..spec.num_items).filter(|&i| !used[i]).collect();
                *remaining.choose(&mut rng).expect("traj_len <= num_items")
            };
            used[item] = true;
            steps.push(Interaction {
                user,
                item,
                rating: row[item],
                timestamp: t as i64,
            });
        }
        trajectories.push(Trajectory::new(user, steps, Origin::Logged)?);
    }
    let dataset = Dataset::new(
        catalog,
        trajectories,
        (spec.r_min, spec.r_max),
        spec.num_users,
    )?;
    Ok((dataset, oracle))
}
