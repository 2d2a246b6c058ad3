//! Objectives measured on an H-step future window: cumulative rating and
//! category diversity, and their normalization into an objective point.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, CategoryId, ItemId};
use crate::error::{Error, Result};

/// Normalized `(o_rate, o_div) ∈ [0, 1]²` conditioning generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectivePoint {
    pub o_rate: f64,
    pub o_div: f64,
}

impl ObjectivePoint {
    pub fn new(o_rate: f64, o_div: f64) -> Result<Self> {
        for (name, v) in [("o_rate", o_rate), ("o_div", o_div)] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(ObjectivePoint { o_rate, o_div })
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.o_rate, self.o_div]
    }
}

impl std::fmt::Display for ObjectivePoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({:.1}, {:.1})", self.o_rate, self.o_div)
    }
}

/// Items of an H-step window with the ratings they received.
#[derive(Debug, Clone, PartialEq)]
pub struct FutureWindow {
    pub items: Vec<ItemId>,
    pub ratings: Vec<f64>,
}

impl FutureWindow {
    pub fn new(items: Vec<ItemId>, ratings: Vec<f64>) -> Result<Self> {
        if items.len() != ratings.len() {
            return Err(Error::Shape {
                op: "future_window",
                left: vec![items.len()],
                right: vec![ratings.len()],
            });
        }
        if items.len() < 2 {
            return Err(Error::Domain(format!(
                "future window needs H >= 2, got {}",
                items.len()
            )));
        }
        Ok(FutureWindow { items, ratings })
    }

    pub fn horizon(&self) -> usize {
        self.items.len()
    }
}

/// How the first position of the diversity average is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityConvention {
    /// Sum from the second item, averaged over H − 1 terms. Reaches 1.0.
    #[default]
    FromSecond,
    /// Every position contributes; the first one scores `1 − J(∅, C₁) = 0`
    /// and the sum is averaged over H, capping the metric at (H − 1)/H.
    AllPositions,
}

pub fn cumulative_rating(window: &FutureWindow) -> f64 {
    window.ratings.iter().sum()
}

/// Jaccard similarity of two sorted category sets.
pub fn jaccard(a: &BTreeSet<CategoryId>, b: &[CategoryId]) -> f64 {
    let inter = b.iter().filter(|c| a.contains(c)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        // J(∅, ∅): treat as identical sets.
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Average novelty `1 − J(C_{1:k−1}, C_k)` of each item against the union of
/// the categories before it.
pub fn diversity(window: &FutureWindow, catalog: &Catalog) -> Result<f64> {
    diversity_of(&window.items, catalog, DiversityConvention::FromSecond)
}

pub fn diversity_of(items: &[ItemId], catalog: &Catalog, convention: DiversityConvention) -> Result<f64> {
    let h = items.len();
    if h < 2 {
        return Err(Error::Domain(format!("diversity needs H >= 2, got {h}")));
    }
    let mut seen: BTreeSet<CategoryId> = catalog.categories(items[0])?.iter().copied().collect();
    let mut total = 0.0;
    for &item in &items[1..] {
        let cats = catalog.categories(item)?;
        total += 1.0 - jaccard(&seen, cats);
        seen.extend(cats.iter().copied());
    }
    Ok(match convention {
        DiversityConvention::FromSecond => total / (h - 1) as f64,
        DiversityConvention::AllPositions => total / h as f64,
    })
}

/// `o_rate = clamp(raw_rate / (H · r_max))`, `o_div = clamp(raw_div)`.
pub fn normalize(raw_rate: f64, raw_div: f64, horizon: usize, r_max: f64) -> Result<ObjectivePoint> {
    if !raw_rate.is_finite() || !raw_div.is_finite() || !r_max.is_finite() {
        return Err(Error::Domain("non-finite objective value".into()));
    }
    if horizon < 2 {
        return Err(Error::Domain(format!("horizon must be >= 2, got {horizon}")));
    }
    if r_max <= 0.0 {
        return Err(Error::Domain(format!("r_max must be positive, got {r_max}")));
    }
    Ok(ObjectivePoint {
        o_rate: (raw_rate / (horizon as f64 * r_max)).clamp(0.0, 1.0),
        o_div: raw_div.clamp(0.0, 1.0),
    })
}

/// The 3 × 3 grid `{1.0, 0.5, 0.0} × {0.0, 0.5, 1.0}`, row-major, starting at
/// `(1.0, 0.0)`.
pub fn grid_points() -> Vec<ObjectivePoint> {
    let mut out = Vec::with_capacity(9);
    for o_rate in [1.0, 0.5, 0.0] {
        for o_div in [0.0, 0.5, 1.0] {
            out.push(ObjectivePoint { o_rate, o_div });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn catalog(sets: &[&[u32]]) -> Catalog {
        let n = sets.iter().flat_map(|s| s.iter()).max().map_or(1, |&m| m as usize + 1);
        Catalog::new(n, sets.iter().map(|s| s.to_vec()).collect()).unwrap()
    }

    fn window(items: Vec<usize>) -> FutureWindow {
        let n = items.len();
        FutureWindow::new(items, vec![1.0; n]).unwrap()
    }

    #[test]
    fn cumulative_rating_examples() {
        let w = FutureWindow::new(vec![0, 1, 2], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(cumulative_rating(&w), 6.0);
        let w = FutureWindow::new(vec![0, 1], vec![0.0, 0.0]).unwrap();
        assert_eq!(cumulative_rating(&w), 0.0);
    }

    #[test]
    fn diversity_examples() {
        let c = catalog(&[&[8u32][..]; 10]);
        assert_eq!(diversity(&window((0..10).collect()), &c).unwrap(), 0.0);
        let c = catalog(&[&[1], &[2]]);
        assert_eq!(diversity(&window(vec![0, 1]), &c).unwrap(), 1.0);
        let c = catalog(&[&[1], &[1, 2], &[2]]);
        assert_eq!(diversity(&window(vec![0, 1, 2]), &c).unwrap(), 0.5);
    }

    #[test]
    fn all_positions_convention_caps_below_one() {
        let c = catalog(&[&[1], &[2]]);
        let d = diversity_of(&[0, 1], &c, DiversityConvention::AllPositions).unwrap();
        assert_eq!(d, 0.5);
    }

    #[test]
    fn diversity_needs_two_items() {
        let c = catalog(&[&[1]]);
        assert!(matches!(
            diversity_of(&[0], &c, DiversityConvention::FromSecond),
            Err(Error::Domain(_))
        ));
        assert!(FutureWindow::new(vec![0], vec![1.0]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let p = normalize(42.83, 0.5, 10, 5.0).unwrap();
        assert!((p.o_rate - 0.8566).abs() < 1e-12);
        assert_eq!(p.o_div, 0.5);
        assert_eq!(normalize(50.0, 0.0, 10, 5.0).unwrap().o_rate, 1.0);
        assert!(normalize(f64::NAN, 0.0, 10, 5.0).is_err());
    }

    #[test]
    fn grid_layout() {
        let g = grid_points();
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], ObjectivePoint { o_rate: 1.0, o_div: 0.0 });
        for (r, d) in [(0.0, 1.0), (0.5, 0.5), (1.0, 0.0)] {
            assert!(g.contains(&ObjectivePoint { o_rate: r, o_div: d }));
        }
    }

    /// Reference implementation over explicit `HashSet`s.
    fn brute_diversity(sets: &[Vec<u32>]) -> f64 {
        use std::collections::HashSet;
        let h = sets.len();
        let mut total = 0.0;
        for k in 1..h {
            let prior: HashSet<u32> = sets[..k].iter().flatten().copied().collect();
            let cur: HashSet<u32> = sets[k].iter().copied().collect();
            let inter = prior.intersection(&cur).count() as f64;
            let union = prior.union(&cur).count() as f64;
            total += 1.0 - inter / union;
        }
        total / (h - 1) as f64
    }

    fn sets_strategy() -> impl Strategy<Value = Vec<Vec<u32>>> {
        prop::collection::vec(prop::collection::btree_set(0u32..6, 1..4), 2..12)
            .prop_map(|v| v.into_iter().map(|s| s.into_iter().collect()).collect())
    }

    proptest! {
        #[test]
        fn diversity_matches_reference_and_is_bounded(sets in sets_strategy()) {
            let refs: Vec<&[u32]> = sets.iter().map(Vec::as_slice).collect();
            let c = Catalog::new(6, refs.iter().map(|s| s.to_vec()).collect()).unwrap();
            let d = diversity(&window((0..sets.len()).collect()), &c).unwrap();
            prop_assert!((d - brute_diversity(&sets)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn diversity_invariant_under_category_relabeling(sets in sets_strategy(), shift in 0u32..6) {
            let relabeled: Vec<Vec<u32>> = sets.iter().map(|s| s.iter().map(|c| (c + shift) % 6).collect()).collect();
            let a = Catalog::new(6, sets.clone()).unwrap();
            let b = Catalog::new(6, relabeled).unwrap();
            let w = window((0..sets.len()).collect());
            prop_assert_eq!(diversity(&w, &a).unwrap(), diversity(&w, &b).unwrap());
        }

        #[test]
        fn rating_is_linear(r in prop::collection::vec(0.0f64..5.0, 2..12), lambda in -3.0f64..3.0) {
            let w = FutureWindow::new((0..r.len()).collect(), r.clone()).unwrap();
            let scaled = FutureWindow::new((0..r.len()).collect(), r.iter().map(|v| v * lambda).collect()).unwrap();
            prop_assert!((cumulative_rating(&scaled) - lambda * cumulative_rating(&w)).abs() < 1e-9);
        }

        #[test]
        fn normalize_is_monotone(a in -10.0f64..60.0, b in -10.0f64..60.0, x in -0.5f64..1.5, y in -0.5f64..1.5) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(normalize(lo, x, 10, 5.0).unwrap().o_rate <= normalize(hi, x, 10, 5.0).unwrap().o_rate);
            let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
            prop_assert!(normalize(a, lo, 10, 5.0).unwrap().o_div <= normalize(a, hi, 10, 5.0).unwrap().o_div);
        }
    }
}
