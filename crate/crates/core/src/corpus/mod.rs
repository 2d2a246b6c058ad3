//! Data model for interaction trajectories, plus ingestion, synthetic
//! generation and rating-matrix completion.

mod complete;
mod ingest;
mod oracle;
mod synth;

pub use complete::{complete_matrix, Completion, MfConfig};
pub use ingest::{ingest_csv, ingest_readers, write_csv, write_csv_writers};
pub use oracle::{OracleFormat, RatingOracle};
pub use synth::{low_rank_ratings, synth_dataset, RatingAffine, SynthSpec};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::augment::Strategy;
use crate::error::{Error, Result};

pub type UserId = usize;
pub type ItemId = usize;
pub type CategoryId = u32;

/// Items and their category sets. Each set is sorted and non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    num_categories: usize,
    categories: Vec<Vec<CategoryId>>,
}

impl Catalog {
    pub fn new(num_categories: usize, categories: Vec<Vec<CategoryId>>) -> Result<Self> {
        let mut sorted = Vec::with_capacity(categories.len());
        for (item, cats) in categories.into_iter().enumerate() {
            let set: BTreeSet<CategoryId> = cats.into_iter().collect();
            if set.is_empty() {
                return Err(Error::validation(format!("item {item} has no category")));
            }
            if let Some(&c) = set.iter().find(|&&c| c as usize >= num_categories) {
                return Err(Error::validation(format!(
                    "item {item} references category {c} >= {num_categories}"
                )));
            }
            sorted.push(set.into_iter().collect());
        }
        Ok(Catalog {
            num_categories,
            categories: sorted,
        })
    }

    pub fn num_items(&self) -> usize {
        self.categories.len()
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn categories(&self, item: ItemId) -> Result<&[CategoryId]> {
        self.categories
            .get(item)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("item {item} not in catalog")))
    }

    pub fn all_categories(&self) -> &[Vec<CategoryId>] {
        &self.categories
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub rating: f64,
    pub timestamp: i64,
}

/// Where a trajectory came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Logged,
    Synthetic(Strategy),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user: UserId,
    pub steps: Vec<Interaction>,
    pub origin: Origin,
}

impl Trajectory {
    /// Checks that every step belongs to `user` and timestamps strictly increase.
    pub fn new(user: UserId, steps: Vec<Interaction>, origin: Origin) -> Result<Self> {
        let t = Trajectory {
            user,
            steps,
            origin,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.steps.iter().find(|s| s.user != self.user) {
            return Err(Error::validation(format!(
                "trajectory of user {} contains an interaction of user {}",
                self.user, s.user
            )));
        }
        for w in self.steps.windows(2) {
            if w[1].timestamp <= w[0].timestamp {
                return Err(Error::validation(format!(
                    "timestamps of user {} not strictly increasing ({} then {})",
                    self.user, w[0].timestamp, w[1].timestamp
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn items(&self) -> Vec<ItemId> {
        self.steps.iter().map(|s| s.item).collect()
    }

    pub fn ratings(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.rating).collect()
    }
}

/// Dense position ↔ external id map. Positions follow ascending external id.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IdMap {
    external: Vec<u64>,
}

impl IdMap {
    pub fn from_sorted(external: Vec<u64>) -> Self {
        debug_assert!(external.windows(2).all(|w| w[0] < w[1]));
        IdMap { external }
    }

    pub fn identity(n: usize) -> Self {
        IdMap {
            external: (0..n as u64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.external.len()
    }

    pub fn is_empty(&self) -> bool {
        self.external.is_empty()
    }

    pub fn to_internal(&self, external: u64) -> Option<usize> {
        self.external.binary_search(&external).ok()
    }

    pub fn to_external(&self, internal: usize) -> Option<u64> {
        self.external.get(internal).copied()
    }
}

/// An offline dataset: catalog, trajectories and the rating scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub catalog: Catalog,
    pub trajectories: Vec<Trajectory>,
    pub r_min: f64,
    pub r_max: f64,
    pub num_users: usize,
    pub user_ids: IdMap,
    pub item_ids: IdMap,
}

impl Dataset {
    pub fn new(
        catalog: Catalog,
        trajectories: Vec<Trajectory>,
        scale: (f64, f64),
        num_users: usize,
    ) -> Result<Self> {
        let n_items = catalog.num_items();
        let ds = Dataset {
            catalog,
            trajectories,
            r_min: scale.0,
            r_max: scale.1,
            num_users,
            user_ids: IdMap::identity(num_users),
            item_ids: IdMap::identity(n_items),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_min < self.r_max) {
            return Err(Error::validation(format!(
                "rating scale ({}, {}) requires r_min < r_max",
                self.r_min, self.r_max
            )));
        }
        for t in &self.trajectories {
            t.validate()?;
            if t.user >= self.num_users {
                return Err(Error::validation(format!("user {} out of range", t.user)));
            }
            for s in &t.steps {
                if s.item >= self.catalog.num_items() {
                    return Err(Error::validation(format!(
                        "item {} not in catalog",
                        s.item
                    )));
                }
                if !(self.r_min..=self.r_max).contains(&s.rating) {
                    return Err(Error::validation(format!(
                        "rating {} outside scale [{}, {}]",
                        s.rating, self.r_min, self.r_max
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_items(&self) -> usize {
        self.catalog.num_items()
    }

    pub fn scale(&self) -> (f64, f64) {
        (self.r_min, self.r_max)
    }

    pub fn logged(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories
            .iter()
            .filter(|t| t.origin == Origin::Logged)
    }

    pub fn num_synthetic(&self) -> usize {
        self.trajectories
            .iter()
            .filter(|t| t.origin != Origin::Logged)
            .count()
    }

    /// Every logged interaction of `user`, in timestamp order.
    pub fn user_items(&self, user: UserId) -> Result<Vec<(ItemId, f64)>> {
        if user >= self.num_users {
            return Err(Error::Lookup(format!("unknown user {user}")));
        }
        let mut steps: Vec<&Interaction> = self
            .logged()
            .filter(|t| t.user == user)
            .flat_map(|t| t.steps.iter())
            .collect();
        if steps.is_empty() {
            return Err(Error::Lookup(format!("user {user} has no interactions")));
        }
        steps.sort_by_key(|s| s.timestamp);
        Ok(steps.iter().map(|s| (s.item, s.rating)).collect())
    }

    /// Like [`Dataset::user_items`], addressed by the external user id.
    pub fn user_items_external(&self, external: u64) -> Result<Vec<(ItemId, f64)>> {
        let user = self
            .user_ids
            .to_internal(external)
            .ok_or_else(|| Error::Lookup(format!("unknown external user id {external}")))?;
        self.user_items(user)
    }

    /// Keeps the first `fraction` of every logged trajectory (at least one
    /// step). Synthetic trajectories are dropped.
    pub fn temporal_prefix(&self, fraction: f64) -> Dataset {
        let trajectories = self
            .logged()
            .map(|t| {
                let cut = eval_cut(t.len(), fraction);
                Trajectory {
                    user: t.user,
                    steps: t.steps[..cut].to_vec(),
                    origin: Origin::Logged,
                }
            })
            .collect();
        Dataset {
            trajectories,
            ..self.clone()
        }
    }
}

/// Number of leading steps kept by a temporal cut at `fraction`.
pub fn eval_cut(len: usize, fraction: f64) -> usize {
    ((len as f64 * fraction).floor() as usize).clamp(1.min(len), len)
}
