//! End-to-end experiment on a synthetic benchmark: generate, split
//! temporally, augment the training part, train, and evaluate the last
//! checkpoints.

use serde::{Deserialize, Serialize};

use crate::augment::{augment_dataset, AugmentSpec};
use crate::corpus::{synth_dataset, Dataset, RatingOracle, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::{controllability_stats, evaluate_model, ControllabilityStats, EvalConfig, EvalReport};
use crate::model::{MocdtModel, ModelConfig};
use crate::train::{make_windows, train, TrainConfig};

/// Architecture settings that do not depend on the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_hist: usize,
    pub seed: u64,
    pub control_layer: Option<usize>,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            d_model: 32,
            layers: 1,
            heads: 2,
            max_hist: 50,
            seed: 0,
            control_layer: None,
        }
    }
}

impl ModelParams {
    pub fn resolve(&self, dataset: &Dataset, horizon: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            horizon,
            vocab: dataset.num_items(),
            num_users: dataset.num_users,
            max_hist: self.max_hist,
            seed: self.seed,
            control_layer: self.control_layer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthSpec,
    /// Each strategy augments the training split independently; all
    /// synthetic trajectories are pooled.
    pub augment: Vec<AugmentSpec>,
    pub horizon: usize,
    pub model: ModelParams,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// How many final epochs are evaluated.
    pub eval_last: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synth: SynthSpec::default(),
            augment: Vec::new(),
            horizon: 10,
            model: ModelParams::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            eval_last: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub dataset: Dataset,
    pub oracle: RatingOracle,
    pub train_set: Dataset,
    pub num_windows: usize,
    pub loss_curve: Vec<f64>,
    pub report: EvalReport,
    /// Present when at least two checkpoints were evaluated.
    pub stats: Option<ControllabilityStats>,
    pub model: MocdtModel,
}

/// The training split: every logged trajectory cut at `eval_fraction`,
/// plus the pooled synthetic trajectories of each augmentation.
pub fn training_split(dataset: &Dataset, eval_fraction: f64, augment: &[AugmentSpec], horizon: usize) -> Result<Dataset> {
    let prefix = dataset.temporal_prefix(eval_fraction);
    let mut out = prefix.clone();
    for spec in augment {
        let aug = augment_dataset(&prefix, spec, horizon)?;
        out.trajectories
            .extend(aug.trajectories.into_iter().skip(prefix.trajectories.len()));
    }
    Ok(out)
}

pub fn run_on(dataset: Dataset, oracle: RatingOracle, cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    if cfg.eval_last == 0 || cfg.eval_last > cfg.train.epochs {
        return Err(Error::Config {
            field: "eval_last".into(),
            message: format!("must be in 1..={}", cfg.train.epochs),
        });
    }
    let train_set = training_split(&dataset, cfg.eval.eval_fraction, &cfg.augment, cfg.horizon)?;
    let windows = make_windows(&train_set, cfg.horizon, cfg.model.max_hist)?;
    let mut model = MocdtModel::new(cfg.model.resolve(&dataset, cfg.horizon))?;
    let eval_cfg = EvalConfig {
        horizon: cfg.horizon,
        ..cfg.eval.clone()
    };
    let first_eval = cfg.train.epochs - cfg.eval_last;
    let mut report = EvalReport {
        rows: Vec::new(),
        scores: Vec::new(),
    };
    let loss_curve = train(&mut model, &windows, &cfg.train, |epoch, m, _| {
        if epoch >= first_eval {
            let (rows, scores) = evaluate_model(m, epoch, &dataset, &oracle, &eval_cfg)?;
            report.rows.extend(rows);
            report.scores.extend(scores);
        }
        Ok(())
    })?;
    let stats = if cfg.eval_last >= 2 && eval_cfg.points.len() >= 3 {
        Some(controllability_stats(&report.rows)?)
    } else {
        None
    };
    Ok(ExperimentOutcome {
        dataset,
        oracle,
        train_set,
        num_windows: windows.len(),
        loss_curve,
        report,
        stats,
        model,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let (dataset, oracle) = synth_dataset(&cfg.synth)?;
    run_on(dataset, oracle, cfg)
}
