//! Controllability evaluation: generate under a set of objective points for
//! every evaluated user and checkpoint, score against the rating oracle,
//! and summarize how consistently realized metrics follow the conditioning.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{eval_cut, Dataset, ItemId, RatingOracle, UserId};
use crate::error::{Error, Result};
use crate::infer::{generate_batch, score_sequence, GenRequest};
use crate::model::{MocdtModel, ModelConfig};
use crate::objectives::{grid_points, ObjectivePoint};
use crate::train::{checkpoint_path, make_windows, train, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UserSelection {
    All,
    Sampled { n: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub points: Vec<ObjectivePoint>,
    pub users: UserSelection,
    /// Epochs to evaluate; empty means every available one.
    pub checkpoints: Vec<usize>,
    pub horizon: usize,
    /// Share of each trajectory before the evaluation cut.
    pub eval_fraction: f64,
    pub exclude_history: bool,
    /// Requests generated together in one graph.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            points: grid_points(),
            users: UserSelection::All,
            checkpoints: Vec::new(),
            horizon: 10,
            eval_fraction: 0.8,
            exclude_history: false,
            batch_size: 32,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Config {
                field: "points".into(),
                message: "must be non-empty".into(),
            });
        }
        if self.horizon < 2 {
            return Err(Error::Config {
                field: "horizon".into(),
                message: format!("must be >= 2, got {}", self.horizon),
            });
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction <= 1.0) {
            return Err(Error::Config {
                field: "eval_fraction".into(),
                message: "must be in (0, 1]".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::Config {
                field: "batch_size".into(),
                message: "must be >= 1".into(),
            });
        }
        Ok(())
    }
}

/// Aggregated outcome of one objective point at one checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub epoch: usize,
    pub o_rate: f64,
    pub o_div: f64,
    pub mean_rating: f64,
    pub std_rating: f64,
    pub mean_diversity: f64,
    pub std_diversity: f64,
}

impl ReportRow {
    pub fn point(&self) -> ObjectivePoint {
        ObjectivePoint {
            o_rate: self.o_rate,
            o_div: self.o_div,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Rating,
    Diversity,
}

impl Metric {
    fn of(self, row: &ReportRow) -> f64 {
        match self {
            Metric::Rating => row.mean_rating,
            Metric::Diversity => row.mean_diversity,
        }
    }

    fn target(self, row: &ReportRow) -> f64 {
        match self {
            Metric::Rating => row.o_rate,
            Metric::Diversity => row.o_div,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    /// Raw per-user `(rating, diversity)` behind each row, in user order.
    pub scores: Vec<Vec<(f64, f64)>>,
}

impl EvalReport {
    pub fn epochs(&self) -> Vec<usize> {
        let mut e: Vec<usize> = self.rows.iter().map(|r| r.epoch).collect();
        e.dedup();
        e
    }

    pub fn rows_for(&self, epoch: usize) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| r.epoch == epoch).collect()
    }

    /// `m[i][j] = sign(metric_i − metric_j)` over the points of one epoch.
    pub fn rank_matrix(&self, epoch: usize, metric: Metric) -> Vec<Vec<i8>> {
        let rows = self.rows_for(epoch);
        rows.iter()
            .map(|a| rows.iter().map(|b| sign(metric.of(a) - metric.of(b))).collect())
            .collect()
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        write_report(&self.rows, w)
    }
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

pub const REPORT_HEADER: &str = "epoch,o_rate,o_div,mean_rating,std_rating,mean_diversity,std_diversity";

pub fn write_report(rows: &[ReportRow], mut w: impl Write) -> Result<()> {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.o_rate, r.o_div, r.mean_rating, r.std_rating, r.mean_diversity, r.std_diversity
        ));
    }
    w.write_all(out.as_bytes()).map_err(|e| Error::io("<report>", e))
}

pub fn parse_report(r: impl Read) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_reader(r);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { line: 0, message: e.to_string() })?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if headers != REPORT_HEADER {
        return Err(Error::Format(format!("unexpected report header {headers:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<ReportRow>().enumerate() {
        rows.push(rec.map_err(|e| Error::Parse {
            line: i as u64 + 1,
            message: e.to_string(),
        })?);
    }
    Ok(rows)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// The evaluated users with their held-out histories: the last `max_hist`
/// items before the cut at `eval_fraction` of each user's logged record.
pub fn eval_contexts(
    dataset: &Dataset,
    selection: &UserSelection,
    eval_fraction: f64,
    max_hist: usize,
) -> Result<Vec<(UserId, Vec<ItemId>)>> {
    let mut users: Vec<UserId> = dataset.logged().map(|t| t.user).collect();
    users.sort_unstable();
    users.dedup();
    if let UserSelection::Sampled { n, seed } = *selection {
        if n < users.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<UserId> = sample(&mut rng, users.len(), n).into_iter().map(|i| users[i]).collect();
            picked.sort_unstable();
            users = picked;
        }
    }
    users
        .into_iter()
        .map(|u| {
            let items: Vec<ItemId> = dataset.user_items(u)?.into_iter().map(|e| e.0).collect();
            let cut = eval_cut(items.len(), eval_fraction);
            Ok((u, items[cut.saturating_sub(max_hist)..cut].to_vec()))
        })
        .collect()
}

/// Rows for one model, one per configured point, plus the raw scores.
pub fn evaluate_model(
    model: &MocdtModel,
    epoch: usize,
    dataset: &Dataset,
    oracle: &RatingOracle,
    cfg: &EvalConfig,
) -> Result<(Vec<ReportRow>, Vec<Vec<(f64, f64)>>)> {
    cfg.validate()?;
    let contexts = eval_contexts(dataset, &cfg.users, cfg.eval_fraction, model.config().max_hist)?;
    if contexts.is_empty() {
        return Err(Error::Domain("no users to evaluate".into()));
    }
    if contexts.iter().any(|(u, _)| *u >= oracle.num_users()) {
        return Err(Error::Lookup("rating oracle does not cover every evaluated user".into()));
    }
    let mut rows = Vec::with_capacity(cfg.points.len());
    let mut all_scores = Vec::with_capacity(cfg.points.len());
    for &point in &cfg.points {
        let reqs: Vec<GenRequest> = contexts
            .iter()
            .map(|(u, h)| GenRequest {
                exclude_history: cfg.exclude_history,
                ..GenRequest::greedy(*u, h.clone(), point, cfg.horizon)
            })
            .collect();
        let chunks: Vec<Vec<(f64, f64)>> = reqs
            .par_chunks(cfg.batch_size)
            .map(|chunk| -> Result<Vec<(f64, f64)>> {
                generate_batch(model, chunk)?
                    .iter()
                    .zip(chunk)
                    .map(|(res, req)| score_sequence(oracle, &dataset.catalog, req.user, &res.items))
                    .collect()
            })
            .collect::<Result<_>>()?;
        let scores: Vec<(f64, f64)> = chunks.into_iter().flatten().collect();
        let (mean_rating, std_rating) = mean_std(&scores.iter().map(|s| s.0).collect::<Vec<_>>());
        let (mean_diversity, std_diversity) = mean_std(&scores.iter().map(|s| s.1).collect::<Vec<_>>());
        rows.push(ReportRow {
            epoch,
            o_rate: point.o_rate,
            o_div: point.o_div,
            mean_rating,
            std_rating,
            mean_diversity,
            std_diversity,
        });
        all_scores.push(scores);
    }
    Ok((rows, all_scores))
}

/// Evaluates in-memory models given as `(epoch, model)`.
pub fn evaluate(
    models: &[(usize, &MocdtModel)],
    dataset: &Dataset,
    oracle: &RatingOracle,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut report = EvalReport {
        rows: Vec::new(),
        scores: Vec::new(),
    };
    for &(epoch, model) in models {
        let (rows, scores) = evaluate_model(model, epoch, dataset, oracle, cfg)?;
        report.rows.extend(rows);
        report.scores.extend(scores);
    }
    Ok(report)
}

/// Evaluates the checkpoints `epoch_NNN.ckpt` in `dir` for `cfg.checkpoints`.
pub fn evaluate_checkpoints(
    dir: &Path,
    dataset: &Dataset,
    oracle: &RatingOracle,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut report = EvalReport {
        rows: Vec::new(),
        scores: Vec::new(),
    };
    for &epoch in &cfg.checkpoints {
        let path = checkpoint_path(dir, epoch);
        if !path.exists() {
            return Err(Error::Io {
                path: path.clone(),
                source: std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("checkpoint for epoch {epoch} not found"),
                ),
            });
        }
        let model = MocdtModel::load(&path)?;
        let (rows, scores) = evaluate_model(&model, epoch, dataset, oracle, cfg)?;
        report.rows.extend(rows);
        report.scores.extend(scores);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllabilityStats {
    /// Spearman correlation of conditioned o_rate with mean rating,
    /// averaged over checkpoints.
    pub spearman_rate: f64,
    pub spearman_div: f64,
    /// Share of point pairs whose ordering under both metrics never changes
    /// across checkpoints.
    pub order_stability: f64,
    pub order_stability_rate: f64,
    pub order_stability_div: f64,
    /// Set when some checkpoint had all-equal values on either side of a
    /// correlation, which is then counted as 0.
    pub degenerate: bool,
    pub checkpoints: usize,
}

/// Average ranks, 1-based, ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

pub fn controllability_stats(rows: &[ReportRow]) -> Result<ControllabilityStats> {
    let mut by_epoch: BTreeMap<usize, Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        by_epoch.entry(r.epoch).or_default().push(r);
    }
    if by_epoch.len() < 2 {
        return Err(Error::Domain(format!(
            "controllability needs >= 2 checkpoints, got {}",
            by_epoch.len()
        )));
    }
    let epochs: Vec<Vec<&ReportRow>> = by_epoch.into_values().collect();
    let points: Vec<ObjectivePoint> = epochs[0].iter().map(|r| r.point()).collect();
    if points.len() < 3 {
        return Err(Error::Domain(format!(
            "controllability needs >= 3 points, got {}",
            points.len()
        )));
    }
    let mut aligned = Vec::with_capacity(epochs.len());
    for rows in &epochs {
        let mut ordered = Vec::with_capacity(points.len());
        for p in &points {
            let row = rows
                .iter()
                .find(|r| r.point() == *p)
                .ok_or_else(|| Error::Validation {
                    line: None,
                    message: format!("epoch {} lacks point {p}", rows[0].epoch),
                })?;
            ordered.push(*row);
        }
        if rows.len() != points.len() {
            return Err(Error::validation(format!(
                "epoch {} has {} rows for {} points",
                rows[0].epoch,
                rows.len(),
                points.len()
            )));
        }
        aligned.push(ordered);
    }

    let mut degenerate = false;
    let mut mean_corr = |metric: Metric| -> f64 {
        let mut total = 0.0;
        for rows in &aligned {
            let x: Vec<f64> = rows.iter().map(|r| metric.target(r)).collect();
            let y: Vec<f64> = rows.iter().map(|r| metric.of(r)).collect();
            match spearman(&x, &y) {
                Some(c) => total += c,
                None => degenerate = true,
            }
        }
        total / aligned.len() as f64
    };
    let spearman_rate = mean_corr(Metric::Rating);
    let spearman_div = mean_corr(Metric::Diversity);

    let n = points.len();
    let pairs = n * (n - 1) / 2;
    let constant = |metric: Metric, i: usize, j: usize| -> bool {
        let s0 = sign(metric.of(aligned[0][i]) - metric.of(aligned[0][j]));
        aligned
            .iter()
            .all(|rows| sign(metric.of(rows[i]) - metric.of(rows[j])) == s0)
    };
    let (mut both, mut rate, mut div) = (0, 0, 0);
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (constant(Metric::Rating, i, j), constant(Metric::Diversity, i, j));
            rate += a as usize;
            div += b as usize;
            both += (a && b) as usize;
        }
    }
    Ok(ControllabilityStats {
        spearman_rate,
        spearman_div,
        order_stability: both as f64 / pairs as f64,
        order_stability_rate: rate as f64 / pairs as f64,
        order_stability_div: div as f64 / pairs as f64,
        degenerate,
        checkpoints: aligned.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Layers(Vec<usize>),
    Horizon(Vec<usize>),
}

impl AblationAxis {
    pub fn default_layers() -> Self {
        AblationAxis::Layers((1..=5).collect())
    }

    pub fn default_horizon() -> Self {
        AblationAxis::Horizon(vec![3, 5, 8, 10, 15])
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::Layers(_) => "Layers",
            AblationAxis::Horizon(_) => "H",
        }
    }

    pub fn values(&self) -> &[usize] {
        match self {
            AblationAxis::Layers(v) | AblationAxis::Horizon(v) => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: usize,
    pub rating: f64,
    pub rating_per_h: f64,
    pub diversity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let mut out = format!("{},Rating,Rating/H,Diversity\n", self.axis);
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.value, r.rating, r.rating_per_h, r.diversity));
        }
        w.write_all(out.as_bytes()).map_err(|e| Error::io("<ablation>", e))
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("| {} | Rating | Rating/H | Diversity |\n|---|---|---|---|\n", self.axis);
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {:.4} | {:.4} | {:.4} |\n",
                r.value, r.rating, r.rating_per_h, r.diversity
            ));
        }
        out
    }
}

/// Trains one model per axis value from the same seeds and evaluates the
/// final model at `(1.0, 1.0)`.
///
/// `base.horizon` and `base.layers` are replaced by the axis value; the
/// evaluation horizon follows the model horizon.
pub fn ablation_sweep(
    train_set: &Dataset,
    eval_set: &Dataset,
    oracle: &RatingOracle,
    axis: &AblationAxis,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(axis.values().len());
    for &value in axis.values() {
        let mut cfg = base.clone();
        match axis {
            AblationAxis::Layers(_) => cfg.layers = value,
            AblationAxis::Horizon(_) => cfg.horizon = value,
        }
        let windows = make_windows(train_set, cfg.horizon, cfg.max_hist)?;
        let mut model = MocdtModel::new(cfg.clone())?;
        train(&mut model, &windows, train_cfg, |_, _, _| Ok(()))?;
        let ecfg = EvalConfig {
            points: vec![ObjectivePoint { o_rate: 1.0, o_div: 1.0 }],
            horizon: cfg.horizon,
            ..eval_cfg.clone()
        };
        let (r, _) = evaluate_model(&model, train_cfg.epochs - 1, eval_set, oracle, &ecfg)?;
        log::info!("ablation {} = {value}: rating {:.4}", axis.name(), r[0].mean_rating);
        rows.push(AblationRow {
            value,
            rating: r[0].mean_rating,
            rating_per_h: r[0].mean_rating / cfg.horizon as f64,
            diversity: r[0].mean_diversity,
        });
    }
    Ok(AblationTable {
        axis: axis.name().to_string(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, o_rate: f64, o_div: f64, r: f64, d: f64) -> ReportRow {
        ReportRow {
            epoch,
            o_rate,
            o_div,
            mean_rating: r,
            std_rating: 0.1,
            mean_diversity: d,
            std_diversity: 0.2,
        }
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn monotone_report_is_perfect() {
        let mut rows = Vec::new();
        for e in 0..3 {
            for (k, o) in [0.0, 0.25, 0.5, 0.75, 1.0].iter().enumerate() {
                rows.push(row(e, *o, 1.0 - o, 10.0 + k as f64 + e as f64, 0.9 - 0.1 * k as f64));
            }
        }
        let s = controllability_stats(&rows).unwrap();
        assert!((s.spearman_rate - 1.0).abs() < 1e-12);
        assert!((s.spearman_div - 1.0).abs() < 1e-12);
        assert_eq!(s.order_stability, 1.0);
        assert!(!s.degenerate);
    }

    #[test]
    fn constant_metrics_flag_degenerate() {
        let mut rows = Vec::new();
        for e in 0..2 {
            for p in grid_points() {
                rows.push(row(e, p.o_rate, p.o_div, 20.0, 0.4));
            }
        }
        let s = controllability_stats(&rows).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.spearman_rate, 0.0);
        assert_eq!(s.spearman_div, 0.0);
    }

    #[test]
    fn one_swapped_pair_of_three() {
        // points A, B, C; the A/B order flips between epochs in both metrics
        let rows = vec![
            row(0, 0.0, 0.0, 1.0, 0.1),
            row(0, 0.5, 0.5, 2.0, 0.2),
            row(0, 1.0, 1.0, 3.0, 0.3),
            row(1, 0.0, 0.0, 2.0, 0.2),
            row(1, 0.5, 0.5, 1.0, 0.1),
            row(1, 1.0, 1.0, 3.0, 0.3),
        ];
        let s = controllability_stats(&rows).unwrap();
        assert!((s.order_stability - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn stats_preconditions() {
        let one_epoch: Vec<_> = grid_points().iter().map(|p| row(0, p.o_rate, p.o_div, 1.0, 1.0)).collect();
        assert!(controllability_stats(&one_epoch).is_err());
        let two_points = vec![row(0, 0.0, 0.0, 1.0, 1.0), row(0, 1.0, 1.0, 2.0, 2.0), row(1, 0.0, 0.0, 1.0, 1.0), row(1, 1.0, 1.0, 2.0, 2.0)];
        assert!(controllability_stats(&two_points).is_err());
    }

    #[test]
    fn report_round_trip() {
        let rows = vec![
            row(0, 1.0, 0.0, 42.812345678901234, 1.0 / 3.0),
            ReportRow { std_rating: 0.0, ..row(7, 0.5, 0.5, 1e-300, 0.1 + 0.2) },
        ];
        let mut buf = Vec::new();
        write_report(&rows, &mut buf).unwrap();
        assert!(buf.starts_with(REPORT_HEADER.as_bytes()));
        assert_eq!(parse_report(buf.as_slice()).unwrap(), rows);
        assert!(parse_report("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert_eq!(s, 2.0);
    }

    #[test]
    fn ablation_table_layout() {
        let t = AblationTable {
            axis: "H".into(),
            rows: vec![AblationRow { value: 5, rating: 20.0, rating_per_h: 4.0, diversity: 0.5 }],
        };
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "H,Rating,Rating/H,Diversity\n5,20,4,0.5\n");
        assert!(t.to_markdown().starts_with("| H | Rating | Rating/H | Diversity |"));
    }
}
