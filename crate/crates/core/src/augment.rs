//! Synthetic to-go sequences built from a user's own logged interactions,
//! spliced after a trajectory prefix.
//!
//! Three selection rules are available: highest rating first, least category
//! overlap first, and uniform random. Every rule treats the prefix as the
//! already-recommended list, so prefix items are never selected, and no item
//! is selected twice. Ties always go to the smaller item id.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, CategoryId, Dataset, Interaction, ItemId, Origin, Trajectory, UserId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Rating,
    Diversity,
    Random,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Rating => "rating",
            Strategy::Diversity => "diversity",
            Strategy::Random => "random",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rating" => Ok(Strategy::Rating),
            "diversity" => Ok(Strategy::Diversity),
            "random" => Ok(Strategy::Random),
            other => Err(Error::Usage(format!(
                "unknown strategy {other:?} (expected rating, diversity or random)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub strategy: Strategy,
    /// Synthetic trajectories per logged trajectory.
    pub rate: f64,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            strategy: Strategy::Rating,
            rate: 1.0,
            seed: 0,
        }
    }
}

/// A prefix of a logged trajectory followed by a synthetic to-go sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedTrajectory {
    pub user: UserId,
    pub base: Vec<Interaction>,
    pub togo: Vec<(ItemId, f64)>,
    pub origin: Strategy,
}

impl AugmentedTrajectory {
    pub fn into_trajectory(self) -> Result<Trajectory> {
        let mut next_ts = self.base.last().map_or(0, |s| s.timestamp + 1);
        let mut steps = self.base;
        for (item, rating) in self.togo {
            steps.push(Interaction {
                user: self.user,
                item,
                rating,
                timestamp: next_ts,
            });
            next_ts += 1;
        }
        Trajectory::new(self.user, steps, Origin::Synthetic(self.origin))
    }
}

/// Record entries not in `history`, first occurrence per item.
fn eligible(record: &[(ItemId, f64)], history: &[ItemId]) -> Vec<(ItemId, f64)> {
    let excluded: BTreeSet<ItemId> = history.iter().copied().collect();
    let mut seen = BTreeSet::new();
    record
        .iter()
        .filter(|(i, _)| !excluded.contains(i) && seen.insert(*i))
        .copied()
        .collect()
}

/// Highest rating first among record items outside `history`; `None` when
/// fewer than `2 * horizon` items are eligible.
pub fn togo_rating(record: &[(ItemId, f64)], history: &[ItemId], horizon: usize) -> Option<Vec<(ItemId, f64)>> {
    let mut pool = eligible(record, history);
    let len = 2 * horizon;
    if pool.len() < len {
        return None;
    }
    pool.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    pool.truncate(len);
    Some(pool)
}

/// Least category overlap with the running recommended list first.
///
/// The overlap reference starts as the categories of `history`. Once it
/// covers every category used in the catalog it is emptied; already chosen
/// items stay ineligible.
pub fn togo_diversity(
    record: &[(ItemId, f64)],
    history: &[ItemId],
    catalog: &Catalog,
    horizon: usize,
) -> Result<Option<Vec<(ItemId, f64)>>> {
    let mut pool = eligible(record, history);
    let len = 2 * horizon;
    if pool.len() < len {
        return Ok(None);
    }
    pool.sort_by_key(|e| e.0);
    let all: BTreeSet<CategoryId> = catalog.all_categories().iter().flatten().copied().collect();
    let mut reference: BTreeSet<CategoryId> = BTreeSet::new();
    for &h in history {
        reference.extend(catalog.categories(h)?.iter().copied());
    }
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        if reference.len() >= all.len() && all.is_subset(&reference) {
            reference.clear();
        }
        let mut best: Option<(usize, usize)> = None;
        for (pos, &(item, _)) in pool.iter().enumerate() {
            let overlap = catalog.categories(item)?.iter().filter(|c| reference.contains(c)).count();
            // pool is id-sorted, so strict < keeps the smallest id on ties
            if best.map_or(true, |(_, o)| overlap < o) {
                best = Some((pos, overlap));
            }
        }
        let (pos, _) = best.expect("pool holds at least len - out.len() items");
        let chosen = pool.remove(pos);
        reference.extend(catalog.categories(chosen.0)?.iter().copied());
        out.push(chosen);
    }
    Ok(Some(out))
}

/// Uniform sampling without replacement from record items outside `history`.
pub fn togo_random(
    record: &[(ItemId, f64)],
    history: &[ItemId],
    horizon: usize,
    rng: &mut impl Rng,
) -> Option<Vec<(ItemId, f64)>> {
    let mut pool = eligible(record, history);
    let len = 2 * horizon;
    if pool.len() < len {
        return None;
    }
    pool.sort_by_key(|e| e.0);
    let (chosen, _) = pool.partial_shuffle(rng, len);
    Some(chosen.to_vec())
}

fn sub_seed(seed: u64, user: UserId, split: usize) -> u64 {
    // splitmix64 over the packed triple
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(user as u64 + 1))
        .wrapping_add((split as u64) << 32);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds the to-go sequence for one split of one trajectory. `split` is
/// the 1-based position t; the prefix is steps `1..t`.
pub fn augment_at(
    dataset: &Dataset,
    trajectory: &Trajectory,
    split: usize,
    spec: &AugmentSpec,
    horizon: usize,
) -> Result<Option<AugmentedTrajectory>> {
    let base: Vec<Interaction> = trajectory.steps[..split - 1].to_vec();
    let history: Vec<ItemId> = base.iter().map(|s| s.item).collect();
    let record = dataset.user_items(trajectory.user)?;
    let togo = match spec.strategy {
        Strategy::Rating => togo_rating(&record, &history, horizon),
        Strategy::Diversity => togo_diversity(&record, &history, &dataset.catalog, horizon)?,
        Strategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, trajectory.user, split));
            togo_random(&record, &history, horizon, &mut rng)
        }
    };
    Ok(togo.map(|togo| AugmentedTrajectory {
        user: trajectory.user,
        base,
        togo,
        origin: spec.strategy,
    }))
}

/// Appends `⌈rate × #logged⌉` synthetic trajectories to a copy of `dataset`.
///
/// Each synthetic picks a logged trajectory uniformly among those with at
/// least one usable split, then a split uniformly among its usable
/// positions. Existing trajectories are kept unchanged and in order.
pub fn augment_dataset(dataset: &Dataset, spec: &AugmentSpec, horizon: usize) -> Result<Dataset> {
    if horizon < 2 {
        return Err(Error::Domain(format!("horizon must be >= 2, got {horizon}")));
    }
    if !(spec.rate >= 0.0) || !spec.rate.is_finite() {
        return Err(Error::Config {
            field: "rate".into(),
            message: format!("must be a finite value >= 0, got {}", spec.rate),
        });
    }
    let logged: Vec<&Trajectory> = dataset.logged().collect();
    let count = (spec.rate * logged.len() as f64).ceil() as usize;
    if count == 0 {
        log::warn!("augmentation rate {} yields no synthetic trajectories", spec.rate);
        return Ok(dataset.clone());
    }

    // usable splits per trajectory: at least 2H record items outside the prefix
    let mut candidates: Vec<(&Trajectory, Vec<usize>)> = Vec::new();
    for t in &logged {
        let record = dataset.user_items(t.user)?;
        let splits: Vec<usize> = (1..=t.len())
            .filter(|&split| {
                let history: Vec<ItemId> = t.steps[..split - 1].iter().map(|s| s.item).collect();
                eligible(&record, &history).len() >= 2 * horizon
            })
            .collect();
        if !splits.is_empty() {
            candidates.push((t, splits));
        }
    }
    if candidates.is_empty() {
        log::warn!(
            "no trajectory has {} record items beyond any prefix; dataset left unchanged",
            2 * horizon
        );
        return Ok(dataset.clone());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = dataset.clone();
    for _ in 0..count {
        let (traj, splits) = &candidates[rng.gen_range(0..candidates.len())];
        let split = splits[rng.gen_range(0..splits.len())];
        let aug = augment_at(dataset, traj, split, spec, horizon)?
            .expect("split pre-filtered for eligibility");
        out.trajectories.push(aug.into_trajectory()?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_dataset, SynthSpec};
    use std::collections::HashMap;

    const A: usize = 0;
    const B: usize = 1;
    const C: usize = 2;
    const D: usize = 3;
    const E: usize = 4;

    fn ids(v: &[(ItemId, f64)]) -> Vec<ItemId> {
        v.iter().map(|e| e.0).collect()
    }

    #[test]
    fn rating_orders_by_rating_then_id() {
        let record = [(A, 5.0), (B, 3.0), (C, 4.0), (D, 2.0), (E, 1.0)];
        assert_eq!(ids(&togo_rating(&record, &[B], 2).unwrap()), vec![A, C, D, E]);
        let flat = [(4, 3.0), (2, 3.0), (9, 3.0), (1, 3.0)];
        assert_eq!(ids(&togo_rating(&flat, &[], 2).unwrap()), vec![1, 2, 4, 9]);
        assert!(togo_rating(&record, &[A, B], 2).is_none());
        let out = togo_rating(&record, &[A], 2).unwrap();
        assert!(!ids(&out).contains(&A));
    }

    #[test]
    fn diversity_prefers_disjoint_categories() {
        let catalog = Catalog::new(4, vec![vec![1], vec![2], vec![1, 2], vec![3]]).unwrap();
        let record = [(A, 1.0), (B, 1.0), (C, 1.0), (D, 1.0)];
        let out = togo_diversity(&record, &[A], &catalog, 1).unwrap().unwrap();
        assert_eq!(ids(&out), vec![B, D]);
    }

    #[test]
    fn diversity_single_category_resets_every_step() {
        let catalog = Catalog::new(1, vec![vec![0]; 6]).unwrap();
        let record: Vec<_> = [5, 3, 1, 4, 2].iter().map(|&i| (i, 1.0)).collect();
        let out = togo_diversity(&record, &[0], &catalog, 2).unwrap().unwrap();
        assert_eq!(ids(&out), vec![1, 2, 3, 4]);
    }

    #[test]
    fn diversity_constant_sets_is_id_order() {
        let catalog = Catalog::new(3, vec![vec![0, 2]; 8]).unwrap();
        let record: Vec<_> = [7, 3, 5, 1, 0, 6].iter().map(|&i| (i, 2.0)).collect();
        let out = togo_diversity(&record, &[6], &catalog, 2).unwrap().unwrap();
        assert_eq!(ids(&out), vec![0, 1, 3, 5]);
    }

    #[test]
    fn random_exhausts_and_is_seeded() {
        let record: Vec<_> = (0..6).map(|i| (i, i as f64)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut out = ids(&togo_random(&record, &[0, 5], 2, &mut rng).unwrap());
        out.sort();
        assert_eq!(out, vec![1, 2, 3, 4]);
        let a = togo_random(&record, &[], 2, &mut ChaCha8Rng::seed_from_u64(9));
        let b = togo_random(&record, &[], 2, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn random_pairs_are_uniform() {
        let record: Vec<_> = (0..4).map(|i| (i, 1.0)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        let draws = 10_000;
        for _ in 0..draws {
            let out = ids(&togo_random(&record, &[], 1, &mut rng).unwrap());
            let key = (out[0].min(out[1]), out[0].max(out[1]));
            *counts.entry(key).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        for (&pair, &n) in &counts {
            let f = n as f64 / draws as f64;
            assert!((f - 1.0 / 6.0).abs() < 0.02, "{pair:?}: {f}");
        }
    }

    fn small() -> Dataset {
        synth_dataset(&SynthSpec {
            num_users: 10,
            num_items: 40,
            num_categories: 5,
            traj_len: 16,
            latent_rank: 2,
            seed: 3,
            ..SynthSpec::default()
        })
        .unwrap()
        .0
    }

    #[test]
    fn zero_rate_is_identity() {
        let ds = small();
        let spec = AugmentSpec { strategy: Strategy::Rating, rate: 0.0, seed: 1 };
        assert_eq!(augment_dataset(&ds, &spec, 3).unwrap(), ds);
    }

    #[test]
    fn unit_rate_doubles_and_preserves_originals() {
        let ds = small();
        for strategy in [Strategy::Rating, Strategy::Diversity, Strategy::Random] {
            let spec = AugmentSpec { strategy, rate: 1.0, seed: 1 };
            let out = augment_dataset(&ds, &spec, 3).unwrap();
            assert_eq!(out.trajectories.len(), 20);
            assert_eq!(out.num_synthetic(), 10);
            assert_eq!(&out.trajectories[..10], &ds.trajectories[..]);
            for t in &out.trajectories[10..] {
                assert_eq!(t.origin, Origin::Synthetic(strategy));
                let items = t.items();
                let set: BTreeSet<_> = items.iter().collect();
                assert_eq!(set.len(), items.len(), "repeated item");
            }
            assert_eq!(augment_dataset(&ds, &spec, 3).unwrap(), out);
        }
    }

    #[test]
    fn rating_togo_is_best_subset_on_small_records() {
        // enumeration of every H-subset of the eligible items
        let ds = small();
        for t in ds.logged() {
            let record: Vec<_> = ds.user_items(t.user).unwrap().into_iter().take(8).collect();
            let h = 3;
            let history = vec![record[0].0];
            let Some(out) = togo_rating(&record, &history, h) else { continue };
            let best: f64 = out[..h].iter().map(|e| e.1).sum();
            let pool: Vec<f64> = record[1..].iter().map(|e| e.1).collect();
            let n = pool.len();
            for mask in 0u32..(1 << n) {
                if mask.count_ones() as usize == h {
                    let s: f64 = (0..n).filter(|b| mask & (1 << b) != 0).map(|b| pool[b]).sum();
                    assert!(best >= s - 1e-12);
                }
            }
            let ratings: Vec<f64> = out.iter().map(|e| e.1).collect();
            assert!(ratings.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    proptest::proptest! {
        #[test]
        fn diversity_first_window_is_perfect_when_packable(
            h in 2usize..6,
            extra in 0usize..4,
            hist_cats in proptest::collection::vec(0u32..20, 0..4),
            seed in 0u64..1000,
        ) {
            use crate::objectives::{diversity_of, DiversityConvention};
            // single-category items; at least h categories untouched by history
            let free: Vec<u32> = (0..20).filter(|c| !hist_cats.contains(c)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cats: Vec<Vec<u32>> = free.choose_multiple(&mut rng, h).map(|&c| vec![c]).collect();
            for _ in 0..(h + extra) {
                cats.push(vec![rng.gen_range(0..20)]);
            }
            let hist_items: Vec<ItemId> = (cats.len()..cats.len() + hist_cats.len()).collect();
            cats.extend(hist_cats.iter().map(|&c| vec![c]));
            let catalog = Catalog::new(20, cats).unwrap();
            let mut record: Vec<(ItemId, f64)> = (0..catalog.num_items()).map(|i| (i, 1.0)).collect();
            record.shuffle(&mut rng);
            if let Some(out) = togo_diversity(&record, &hist_items, &catalog, h).unwrap() {
                let first: Vec<ItemId> = ids(&out)[..h].to_vec();
                let d = diversity_of(&first, &catalog, DiversityConvention::FromSecond).unwrap();
                proptest::prop_assert_eq!(d, 1.0);
            }
        }
    }

    #[test]
    fn strategy_parse() {
        assert_eq!("diversity".parse::<Strategy>().unwrap(), Strategy::Diversity);
        assert!("best".parse::<Strategy>().is_err());
    }
}
