//! Objective-conditioned generation of item sequences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, ItemId, RatingOracle, UserId};
use crate::diffcore::{log_sum_exp, softmax_in_place};
use crate::error::{Error, Result};
use crate::model::MocdtModel;
use crate::objectives::{diversity_of, DiversityConvention, ObjectivePoint};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64 },
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    /// `greedy` or `sample:T`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "greedy" {
            return Ok(DecodeMode::Greedy);
        }
        if let Some(t) = s.strip_prefix("sample:") {
            let temperature: f64 = t
                .parse()
                .map_err(|_| Error::Usage(format!("bad temperature {t:?}")))?;
            if !(temperature > 0.0) || !temperature.is_finite() {
                return Err(Error::Usage(format!("temperature must be > 0, got {t}")));
            }
            return Ok(DecodeMode::Sample { temperature });
        }
        Err(Error::Usage(format!("unknown mode {s:?} (expected greedy or sample:T)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub user: UserId,
    /// Only the last `max_hist` items are used.
    pub history: Vec<ItemId>,
    pub point: ObjectivePoint,
    pub horizon: usize,
    pub mode: DecodeMode,
    pub seed: u64,
    pub forbid_repeats: bool,
    pub exclude_history: bool,
}

impl GenRequest {
    pub fn greedy(user: UserId, history: Vec<ItemId>, point: ObjectivePoint, horizon: usize) -> Self {
        GenRequest {
            user,
            history,
            point,
            horizon,
            mode: DecodeMode::Greedy,
            seed: 0,
            forbid_repeats: true,
            exclude_history: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenResult {
    pub items: Vec<ItemId>,
    /// Model log-probability of each chosen item, before masking.
    pub stepwise_logprobs: Vec<f64>,
    /// Raw cumulative rating and diversity, when scored against an oracle.
    pub realized: Option<(f64, f64)>,
}

/// Picks the next item among those not `banned`. Greedy ties go to the
/// smallest id. Returns `None` when everything is banned.
pub fn select_next(logits: &[f64], banned: &[bool], mode: DecodeMode, rng: &mut impl Rng) -> Option<ItemId> {
    match mode {
        DecodeMode::Greedy => {
            let mut best: Option<(ItemId, f64)> = None;
            for (i, &l) in logits.iter().enumerate() {
                if !banned[i] && best.map_or(true, |(_, b)| l > b) {
                    best = Some((i, l));
                }
            }
            best.map(|b| b.0)
        }
        DecodeMode::Sample { temperature } => {
            if banned.iter().all(|&b| b) {
                return None;
            }
            let mut p: Vec<f64> = logits
                .iter()
                .zip(banned)
                .map(|(&l, &b)| if b { f64::NEG_INFINITY } else { l / temperature })
                .collect();
            softmax_in_place(&mut p);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut last = None;
            for (i, &pi) in p.iter().enumerate() {
                if pi > 0.0 {
                    acc += pi;
                    last = Some(i);
                    if u < acc {
                        return Some(i);
                    }
                }
            }
            last
        }
    }
}

fn validate(model: &MocdtModel, req: &GenRequest) -> Result<()> {
    let cfg = model.config();
    if req.horizon == 0 || req.horizon > cfg.horizon {
        return Err(Error::Domain(format!(
            "generation horizon {} outside 1..={}",
            req.horizon, cfg.horizon
        )));
    }
    if let DecodeMode::Sample { temperature } = req.mode {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Domain(format!("temperature must be > 0, got {temperature}")));
        }
    }
    if req.forbid_repeats {
        let mut excluded = 0;
        if req.exclude_history {
            let mut h = req.history.clone();
            h.sort_unstable();
            h.dedup();
            excluded = h.iter().filter(|&&i| i < cfg.vocab).count();
        }
        if cfg.vocab - excluded < req.horizon {
            return Err(Error::Infeasible(format!(
                "{} eligible items cannot fill {} distinct positions",
                cfg.vocab - excluded,
                req.horizon
            )));
        }
    }
    Ok(())
}

/// Generates for a batch of requests sharing one horizon.
///
/// The control signal and initial state are computed once per request;
/// each step re-runs the causal transformer over the items chosen so far
/// and decodes the last position.
pub fn generate_batch(model: &MocdtModel, reqs: &[GenRequest]) -> Result<Vec<GenResult>> {
    let Some(first) = reqs.first() else {
        return Ok(Vec::new());
    };
    let horizon = first.horizon;
    for r in reqs {
        if r.horizon != horizon {
            return Err(Error::Domain("batched requests must share a horizon".into()));
        }
        validate(model, r)?;
    }
    let cfg = model.config();
    let b = reqs.len();
    let users: Vec<UserId> = reqs.iter().map(|r| r.user).collect();
    let hists: Vec<&[ItemId]> = reqs
        .iter()
        .map(|r| &r.history[r.history.len().saturating_sub(cfg.max_hist)..])
        .collect();
    let points: Vec<ObjectivePoint> = reqs.iter().map(|r| r.point).collect();
    let mut rngs: Vec<ChaCha8Rng> = reqs.iter().map(|r| ChaCha8Rng::seed_from_u64(r.seed)).collect();
    let mut banned: Vec<Vec<bool>> = reqs
        .iter()
        .map(|r| {
            let mut v = vec![false; cfg.vocab];
            if r.exclude_history {
                for &i in &r.history {
                    if i < cfg.vocab {
                        v[i] = true;
                    }
                }
            }
            v
        })
        .collect();

    let mut g = model.graph().checked(false);
    let (ctrl, state) = model.context(&mut g, &users, &hists, &points)?;
    let mut items: Vec<Vec<ItemId>> = vec![Vec::with_capacity(horizon); b];
    let mut logprobs: Vec<Vec<f64>> = vec![Vec::with_capacity(horizon); b];
    for k in 0..horizon {
        let inputs: Vec<&[ItemId]> = items.iter().map(Vec::as_slice).collect();
        let hidden = model.sequence_hidden(&mut g, ctrl, state, &inputs)?;
        let rows: Vec<usize> = ((k + 1) * b..(k + 2) * b).collect();
        let last = g.row_select(hidden, &rows)?;
        let logits = model.decode(&mut g, last)?;
        let logits = g.value(logits);
        if !logits.is_finite() {
            return Err(Error::Divergence("non-finite logits during generation".into()));
        }
        for (r, req) in reqs.iter().enumerate() {
            let row = logits.row_slice(r);
            let choice = select_next(row, &banned[r], req.mode, &mut rngs[r])
                .ok_or_else(|| Error::Infeasible("every item is masked".into()))?;
            logprobs[r].push(row[choice] - log_sum_exp(row));
            items[r].push(choice);
            if req.forbid_repeats {
                banned[r][choice] = true;
            }
        }
    }
    Ok(items
        .into_iter()
        .zip(logprobs)
        .map(|(items, stepwise_logprobs)| GenResult {
            items,
            stepwise_logprobs,
            realized: None,
        })
        .collect())
}

pub fn generate(model: &MocdtModel, req: &GenRequest) -> Result<GenResult> {
    Ok(generate_batch(model, std::slice::from_ref(req))?.remove(0))
}

/// [`generate`] followed by [`score_sequence`] when the horizon allows a
/// diversity value (H ≥ 2).
pub fn generate_scored(
    model: &MocdtModel,
    req: &GenRequest,
    oracle: &RatingOracle,
    catalog: &Catalog,
) -> Result<GenResult> {
    let mut res = generate(model, req)?;
    if res.items.len() >= 2 {
        res.realized = Some(score_sequence(oracle, catalog, req.user, &res.items)?);
    }
    Ok(res)
}

/// Raw cumulative oracle rating and diversity of `items` for `user`.
pub fn score_sequence(
    oracle: &RatingOracle,
    catalog: &Catalog,
    user: UserId,
    items: &[ItemId],
) -> Result<(f64, f64)> {
    if items.is_empty() {
        return Err(Error::Domain("cannot score an empty sequence".into()));
    }
    let mut rating = 0.0;
    for &i in items {
        rating += oracle.rating(user, i)?;
    }
    let div = diversity_of(items, catalog, DiversityConvention::FromSecond)?;
    Ok((rating, div))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Array;
    use crate::model::ModelConfig;
    use crate::objectives::{cumulative_rating, diversity, FutureWindow};
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest};

    fn model(vocab: usize) -> MocdtModel {
        let mut m = MocdtModel::new(ModelConfig {
            d_model: 8,
            layers: 1,
            heads: 2,
            horizon: 5,
            vocab,
            num_users: 3,
            max_hist: 4,
            seed: 2,
            control_layer: None,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let id = m.params().find("decoder.weight").unwrap();
        let data = (0..8 * vocab).map(|_| rng.gen_range(-1.0..1.0)).collect();
        m.params_mut().set(id, Array::new(vec![8, vocab], data).unwrap()).unwrap();
        m
    }

    fn req() -> GenRequest {
        GenRequest::greedy(1, vec![2, 3, 4, 5, 6, 7], ObjectivePoint::new(0.5, 0.5).unwrap(), 5)
    }

    #[test]
    fn greedy_is_deterministic_and_distinct() {
        let m = model(12);
        let a = generate(&m, &req()).unwrap();
        let b = generate(&m, &req()).unwrap();
        assert_eq!(a, b);
        let mut s = a.items.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 5);
        assert!(a.stepwise_logprobs.iter().all(|&l| l <= 0.0));
    }

    #[test]
    fn history_exclusion() {
        let m = model(12);
        let r = GenRequest { exclude_history: true, ..req() };
        let out = generate(&m, &r).unwrap();
        assert!(out.items.iter().all(|i| !r.history.contains(i)));
        let tight = GenRequest { horizon: 5, ..r.clone() };
        let small = model(10);
        assert!(matches!(generate(&small, &tight), Err(Error::Infeasible(_))));
    }

    #[test]
    fn infeasible_vocab() {
        let m = model(4);
        let r = GenRequest { history: vec![1, 2], ..req() };
        assert!(matches!(generate(&m, &r), Err(Error::Infeasible(_))));
        let r = GenRequest { forbid_repeats: false, ..r };
        assert_eq!(generate(&m, &r).unwrap().items.len(), 5);
    }

    #[test]
    fn zero_decoder_ties_break_to_small_ids() {
        let m = MocdtModel::new(ModelConfig {
            d_model: 8,
            layers: 1,
            heads: 2,
            horizon: 5,
            vocab: 12,
            num_users: 3,
            max_hist: 4,
            seed: 2,
            control_layer: None,
        })
        .unwrap();
        assert_eq!(generate(&m, &req()).unwrap().items, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn low_temperature_matches_greedy() {
        let m = model(12);
        let greedy = generate(&m, &req()).unwrap();
        for seed in 0..5 {
            let r = GenRequest { mode: DecodeMode::Sample { temperature: 1e-4 }, seed, ..req() };
            assert_eq!(generate(&m, &r).unwrap().items, greedy.items);
        }
    }

    #[test]
    fn batch_matches_single() {
        let m = model(12);
        let reqs: Vec<GenRequest> = (0..3)
            .map(|u| GenRequest { user: u, history: vec![u + 1; u], ..req() })
            .collect();
        let batch = generate_batch(&m, &reqs).unwrap();
        for (r, out) in reqs.iter().zip(&batch) {
            let single = generate(&m, r).unwrap();
            assert_eq!(single.items, out.items);
            for (a, b) in single.stepwise_logprobs.iter().zip(&out.stepwise_logprobs) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("greedy".parse::<DecodeMode>().unwrap(), DecodeMode::Greedy);
        assert_eq!("sample:0.5".parse::<DecodeMode>().unwrap(), DecodeMode::Sample { temperature: 0.5 });
        assert!("sample:0".parse::<DecodeMode>().is_err());
        assert!("beam".parse::<DecodeMode>().is_err());
    }

    #[test]
    fn scoring() {
        let oracle = RatingOracle::from_dense(2, 10, (1.0, 5.0), vec![3.0; 20]).unwrap();
        let catalog = Catalog::new(10, vec![vec![4]; 10]).unwrap();
        let items: Vec<usize> = (0..10).collect();
        assert_eq!(score_sequence(&oracle, &catalog, 1, &items).unwrap(), (30.0, 0.0));
        assert!(matches!(score_sequence(&oracle, &catalog, 2, &items), Err(Error::Lookup(_))));
        assert!(score_sequence(&oracle, &catalog, 0, &[]).is_err());
    }

    proptest! {
        #[test]
        fn greedy_ignores_constant_shift(
            logits in prop::collection::vec(-5.0f64..5.0, 2..20),
            shift in -100.0f64..100.0,
            ban_mask in any::<u32>(),
        ) {
            let banned: Vec<bool> = (0..logits.len()).map(|i| ban_mask & (1 << i) != 0).collect();
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let a = select_next(&logits, &banned, DecodeMode::Greedy, &mut rng);
            let b = select_next(&shifted, &banned, DecodeMode::Greedy, &mut rng);
            prop_assert_eq!(a, b);
            if let Some(i) = a {
                prop_assert!(!banned[i]);
            }
        }

        #[test]
        fn score_matches_objectives(
            ratings in prop::collection::vec(1.0f64..5.0, 12),
            cats in prop::collection::vec(prop::collection::btree_set(0u32..5, 1..3), 12),
            picks in prop::collection::btree_set(0usize..12, 2..8),
        ) {
            let oracle = RatingOracle::from_dense(1, 12, (1.0, 5.0), ratings.clone()).unwrap();
            let catalog = Catalog::new(5, cats.into_iter().map(|s| s.into_iter().collect()).collect()).unwrap();
            let items: Vec<usize> = picks.into_iter().collect();
            let window = FutureWindow::new(items.clone(), items.iter().map(|&i| ratings[i]).collect()).unwrap();
            let (r, d) = score_sequence(&oracle, &catalog, 0, &items).unwrap();
            prop_assert_eq!(r, cumulative_rating(&window));
            prop_assert_eq!(d, diversity(&window, &catalog).unwrap());
        }
    }
}
