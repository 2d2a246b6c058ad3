//! Command-line front end. Every invocation gets its own run directory
//! holding the resolved `config.toml`, the command outputs and a
//! `manifest.json` that hashes every file read or written.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment_dataset, AugmentSpec, Strategy};
use crate::corpus::{
    complete_matrix, ingest_readers, synth_dataset, write_csv_writers, Dataset, MfConfig, OracleFormat,
    RatingOracle, SynthSpec,
};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_sweep, controllability_stats, eval_contexts, evaluate_model, parse_report, write_report,
    AblationAxis, EvalConfig, ReportRow, UserSelection,
};
use crate::infer::{generate_batch, score_sequence, DecodeMode, GenRequest};
use crate::model::{read_checkpoint, write_checkpoint, MocdtModel, CHECKPOINT_VERSION};
use crate::objectives::ObjectivePoint;
use crate::pipeline::ModelParams;
use crate::train::{checkpoint_path, make_windows, train, write_loss_curve, TrainConfig};

const DEFAULT_HORIZON: usize = 10;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub dataset: Option<PathBuf>,
    pub oracle: Option<PathBuf>,
    pub interactions: Option<PathBuf>,
    pub categories: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Directory of `epoch_NNN.ckpt` files.
    pub checkpoints: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub r_min: f64,
    pub r_max: f64,
}

impl Default for IngestSection {
    fn default() -> Self {
        IngestSection { r_min: 1.0, r_max: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    /// External user ids; empty means every logged user.
    pub users: Vec<u64>,
    pub point: ObjectivePoint,
    /// `greedy` or `sample:T`.
    pub mode: String,
    pub seed: u64,
    pub forbid_repeats: bool,
    pub exclude_history: bool,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection {
            users: Vec::new(),
            point: ObjectivePoint { o_rate: 1.0, o_div: 1.0 },
            mode: "greedy".into(),
            seed: 0,
            forbid_repeats: true,
            exclude_history: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    /// `layers` or `horizon`.
    pub axis: String,
    /// Empty means the default sweep of the axis.
    pub values: Vec<usize>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            axis: "layers".into(),
            values: Vec::new(),
        }
    }
}

/// Every setting a command can use. Loaded from TOML, then overridden by
/// flags, then echoed into the run directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces the seed of every seeded stage.
    pub seed: Option<u64>,
    /// Window length H. Defaults to 10 for augment, train and ablate, and
    /// to the checkpoint's horizon for generate and evaluate.
    pub horizon: Option<usize>,
    pub inputs: Inputs,
    pub synth: SynthSpec,
    pub ingest: IngestSection,
    pub complete: MfConfig,
    pub augment: AugmentSpec,
    pub model: ModelParams,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub generate: GenerateSection,
    pub ablate: AblateSection,
}

impl RunConfig {
    pub fn from_toml(src: &str) -> Result<Self> {
        toml::from_str(src).map_err(|e| config_error(src, &e))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("cannot serialize config: {e}")))
    }

    fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.synth.seed = s;
            self.complete.seed = s;
            self.augment.seed = s;
            self.model.seed = s;
            self.train.seed = s;
            self.generate.seed = s;
        }
    }
}

/// Names the offending key as `section.key` from the error position.
fn config_error(src: &str, e: &toml::de::Error) -> Error {
    let message = e.message().trim().to_string();
    let from_span = e.span().and_then(|s| key_at(src, s.start));
    let from_message = message
        .split('`')
        .nth(1)
        .filter(|_| message.starts_with("unknown field"))
        .map(str::to_string);
    Error::Config {
        field: from_span.or(from_message).unwrap_or_else(|| "<config>".into()),
        message,
    }
}

fn key_at(src: &str, offset: usize) -> Option<String> {
    let before = src.get(..offset)?;
    let line_start = before.rfind('\n').map_or(0, |i| i + 1);
    let line = src[line_start..].lines().next()?;
    let key = line.split('=').next()?.trim();
    if key.is_empty() || key.starts_with('[') {
        return None;
    }
    let section = before[..line_start]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('['))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').to_string());
    Some(match section {
        Some(s) => format!("{s}.{key}"),
        None => key.to_string(),
    })
}

#[derive(Parser, Debug)]
#[command(name = "mocdt", version, about = "Controllable multi-objective sequence recommendation")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Run directory [default: runs/<command>-NNN].
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Seed for every seeded stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its ground-truth rating matrix.
    Synth(SynthArgs),
    /// Read interaction and category CSV files into a dataset.
    Ingest(IngestArgs),
    /// Fill the rating matrix by matrix factorization.
    Complete(CompleteArgs),
    /// Append objective-directed synthetic trajectories.
    Augment(AugmentArgs),
    /// Train the model, writing a checkpoint per epoch.
    Train(TrainArgs),
    /// Generate item sequences for users at an objective point.
    Generate(GenerateArgs),
    /// Evaluate checkpoints over the objective grid.
    Evaluate(EvaluateArgs),
    /// Sweep the layer count or the horizon.
    Ablate(AblateArgs),
    /// Summarize an evaluation report.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    categories: Option<usize>,
    #[arg(long)]
    traj_len: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// CSV with header `user,item,rating,timestamp`.
    #[arg(long)]
    interactions: Option<PathBuf>,
    /// CSV with header `item,categories`, categories separated by `|`.
    #[arg(long)]
    categories: Option<PathBuf>,
    #[arg(long)]
    r_min: Option<f64>,
    #[arg(long)]
    r_max: Option<f64>,
}

#[derive(Args, Debug)]
struct CompleteArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Share of each trajectory available to augmentation.
    #[arg(long)]
    eval_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    max_hist: Option<usize>,
    #[arg(long)]
    eval_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// External user id; repeatable. Default: every logged user.
    #[arg(long = "user")]
    users: Vec<u64>,
    /// Objective point `R,D` in [0, 1]².
    #[arg(long, value_parser = parse_point)]
    point: Option<ObjectivePoint>,
    #[arg(long)]
    horizon: Option<usize>,
    /// `greedy` or `sample:T`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    exclude_history: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Directory holding `epoch_NNN.ckpt` files.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// Epochs to evaluate, comma separated. Default: all found.
    #[arg(long, value_delimiter = ',')]
    epochs: Vec<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Evaluate a seeded sample of this many users.
    #[arg(long)]
    sample_users: Option<usize>,
    #[arg(long)]
    exclude_history: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// `layers` or `horizon`.
    #[arg(long)]
    axis: Option<String>,
    #[arg(long, value_delimiter = ',')]
    values: Vec<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Evaluation report CSV.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn parse_point(s: &str) -> std::result::Result<ObjectivePoint, String> {
    let (r, d) = s.split_once(',').ok_or_else(|| format!("expected R,D, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|_| format!("bad number {v:?}"));
    ObjectivePoint::new(parse(r)?, parse(d)?).map_err(|e| e.to_string())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Ingest(_) => "ingest",
            Command::Complete(_) => "complete",
            Command::Augment(_) => "augment",
            Command::Train(_) => "train",
            Command::Generate(_) => "generate",
            Command::Evaluate(_) => "evaluate",
            Command::Ablate(_) => "ablate",
            Command::Report(_) => "report",
        }
    }

    fn apply(&self, c: &mut RunConfig) {
        match self {
            Command::Synth(a) => {
                set(&mut c.synth.num_users, a.users);
                set(&mut c.synth.num_items, a.items);
                set(&mut c.synth.num_categories, a.categories);
                set(&mut c.synth.traj_len, a.traj_len);
                set(&mut c.synth.latent_rank, a.rank);
            }
            Command::Ingest(a) => {
                set_opt(&mut c.inputs.interactions, a.interactions.clone());
                set_opt(&mut c.inputs.categories, a.categories.clone());
                set(&mut c.ingest.r_min, a.r_min);
                set(&mut c.ingest.r_max, a.r_max);
            }
            Command::Complete(a) => {
                set_opt(&mut c.inputs.dataset, a.dataset.clone());
                set(&mut c.complete.rank, a.rank);
                set(&mut c.complete.epochs, a.epochs);
            }
            Command::Augment(a) => {
                set_opt(&mut c.inputs.dataset, a.dataset.clone());
                set(&mut c.augment.strategy, a.strategy);
                set(&mut c.augment.rate, a.rate);
                set_opt(&mut c.horizon, a.horizon);
                set(&mut c.eval.eval_fraction, a.eval_fraction);
            }
            Command::Train(a) => {
                set_opt(&mut c.inputs.dataset, a.dataset.clone());
                set_opt(&mut c.horizon, a.horizon);
                set(&mut c.train.epochs, a.epochs);
                set(&mut c.train.batch_size, a.batch_size);
                set(&mut c.train.lr, a.lr);
                set(&mut c.model.d_model, a.d_model);
                set(&mut c.model.layers, a.layers);
                set(&mut c.model.heads, a.heads);
                set(&mut c.model.max_hist, a.max_hist);
                set(&mut c.eval.eval_fraction, a.eval_fraction);
            }
            Command::Generate(a) => {
                set_opt(&mut c.inputs.checkpoint, a.checkpoint.clone());
                set_opt(&mut c.inputs.dataset, a.dataset.clone());
                set_opt(&mut c.inputs.oracle, a.oracle.clone());
                if !a.users.is_empty() {
                    c.generate.users = a.users.clone();
                }
                set(&mut c.generate.point, a.point);
                set_opt(&mut c.horizon, a.horizon);
                set(&mut c.generate.mode, a.mode.clone());
                c.generate.exclude_history |= a.exclude_history;
            }
            Command::Evaluate(a) => {
                set_opt(&mut c.inputs.checkpoints, a.checkpoints.clone());
                set_opt(&mut c.inputs.dataset, a.dataset.clone());
                set_opt(&mut c.inputs.oracle, a.oracle.clone());
                if !a.epochs.is_empty() {
                    c.eval.checkpoints = a.epochs.clone();
                }
                set_opt(&mut c.horizon, a.horizon);
                if let Some(n) = a.sample_users {
                    let seed = c.seed.unwrap_or(0);
                    c.eval.users = UserSelection::Sampled { n, seed };
                }
                c.eval.exclude_history |= a.exclude_history;
            }
            Command::Ablate(a) => {
                set_opt(&mut c.inputs.dataset, a.dataset.clone());
                set_opt(&mut c.inputs.oracle, a.oracle.clone());
                set(&mut c.ablate.axis, a.axis.clone());
                if !a.values.is_empty() {
                    c.ablate.values = a.values.clone();
                }
                set(&mut c.train.epochs, a.epochs);
                set_opt(&mut c.horizon, a.horizon);
            }
            Command::Report(a) => {
                set_opt(&mut c.inputs.report, a.report.clone());
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub checkpoint_format: u32,
    pub args: Vec<String>,
    /// Files read, in order of first access. The config file comes first
    /// when one was given.
    pub inputs: Vec<FileRecord>,
    /// Files written, relative to the run directory.
    pub outputs: Vec<FileRecord>,
    pub wall_seconds: f64,
}

fn record(path: String, bytes: &[u8]) -> FileRecord {
    FileRecord {
        path,
        sha256: hex::encode(Sha256::digest(bytes)),
        bytes: bytes.len() as u64,
    }
}

/// A run directory that tracks every file read or written through it.
struct Run {
    dir: PathBuf,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
}

impl Run {
    fn create(dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Run {
            dir,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        if !self.inputs.iter().any(|r| r.path == name) {
            self.inputs.push(record(name, &bytes));
        }
        Ok(bytes)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.outputs.retain(|r| r.path != name);
        self.outputs.push(record(name.to_string(), bytes));
        Ok(())
    }

    fn dataset(&mut self, path: &Path) -> Result<Dataset> {
        let bytes = self.read(path)?;
        let ds: Dataset = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("{}: not a dataset file: {e}", path.display())))?;
        ds.validate()?;
        Ok(ds)
    }

    fn write_dataset(&mut self, ds: &Dataset) -> Result<()> {
        let json = serde_json::to_vec(ds).map_err(|e| Error::Format(e.to_string()))?;
        self.write("dataset.json", &json)
    }

    fn oracle(&mut self, path: &Path, scale: (f64, f64)) -> Result<RatingOracle> {
        let bytes = self.read(path)?;
        RatingOracle::read(&bytes[..], scale)
    }

    fn write_oracle(&mut self, oracle: &RatingOracle) -> Result<()> {
        let mut buf = Vec::new();
        oracle
            .write(&mut buf, OracleFormat::Dense)
            .map_err(|e| Error::io("oracle.csv", e))?;
        self.write("oracle.csv", &buf)
    }

    fn checkpoint(&mut self, path: &Path) -> Result<MocdtModel> {
        let bytes = self.read(path)?;
        read_checkpoint(&bytes[..])
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
        json.push(b'\n');
        self.write(name, &json)
    }
}

fn required<'a>(slot: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    slot.as_deref().ok_or_else(|| Error::Config {
        field: format!("inputs.{name}"),
        message: format!("required; pass --{name} or set it in the config file"),
    })
}

/// First unused `runs/<command>-NNN`.
fn default_run_dir(command: &str) -> PathBuf {
    (1..)
        .map(|i| PathBuf::from("runs").join(format!("{command}-{i:03}")))
        .find(|p| !p.exists())
        .expect("unbounded range")
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            let text = e.render().to_string();
            return Err(Error::Usage(text.trim_start_matches("error: ").trim_end().to_string()));
        }
    };
    let start = Instant::now();
    let command = cli.command.name();
    let mut run = Run::create(cli.out.clone().unwrap_or_else(|| default_run_dir(command)))?;

    let mut cfg = match &cli.config {
        Some(path) => {
            let bytes = run.read(path)?;
            let src = String::from_utf8(bytes)
                .map_err(|_| Error::Format(format!("{}: config is not UTF-8", path.display())))?;
            RunConfig::from_toml(&src)?
        }
        None => RunConfig::default(),
    };
    set_opt(&mut cfg.seed, cli.seed);
    cli.command.apply(&mut cfg);
    cfg.apply_seed();
    run.write("config.toml", cfg.to_toml()?.as_bytes())?;

    let exec = |run: &mut Run| execute(&cli.command, &cfg, run);
    match cli.threads {
        Some(0) => {
            return Err(Error::Config {
                field: "threads".into(),
                message: "must be >= 1".into(),
            })
        }
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config {
                field: "threads".into(),
                message: e.to_string(),
            })?
            .install(|| exec(&mut run))?,
        None => exec(&mut run)?,
    }

    let manifest = Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        checkpoint_format: CHECKPOINT_VERSION,
        args: args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect(),
        inputs: std::mem::take(&mut run.inputs),
        outputs: std::mem::take(&mut run.outputs),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    let path = run.dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    log::info!("{command}: wrote {}", run.dir.display());
    Ok(())
}

/// Runs the process entry point and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match run(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            e.exit_code()
        }
    }
}

/// Logged prefixes at `eval_fraction` plus every synthetic trajectory.
fn train_split(dataset: &Dataset, eval_fraction: f64) -> Dataset {
    let mut out = dataset.temporal_prefix(eval_fraction);
    out.trajectories
        .extend(dataset.trajectories.iter().filter(|t| t.origin != crate::corpus::Origin::Logged).cloned());
    out
}

fn execute(cmd: &Command, cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let horizon = cfg.horizon.unwrap_or(DEFAULT_HORIZON);
    match cmd {
        Command::Synth(_) => {
            let (ds, oracle) = synth_dataset(&cfg.synth)?;
            run.write_dataset(&ds)?;
            let (mut inter, mut cats) = (Vec::new(), Vec::new());
            write_csv_writers(&ds, &mut inter, &mut cats)?;
            run.write("interactions.csv", &inter)?;
            run.write("categories.csv", &cats)?;
            run.write_oracle(&oracle)
        }
        Command::Ingest(_) => {
            let inter = run.read(required(&cfg.inputs.interactions, "interactions")?)?;
            let cats = run.read(required(&cfg.inputs.categories, "categories")?)?;
            let ds = ingest_readers(&inter[..], &cats[..], (cfg.ingest.r_min, cfg.ingest.r_max))?;
            run.write_dataset(&ds)
        }
        Command::Complete(_) => {
            let ds = run.dataset(required(&cfg.inputs.dataset, "dataset")?)?;
            let done = complete_matrix(&ds, &cfg.complete)?;
            run.write_oracle(&done.oracle)?;
            run.write_json("summary.json", &serde_json::json!({ "train_mae": done.train_mae }))
        }
        Command::Augment(_) => {
            let mut ds = run.dataset(required(&cfg.inputs.dataset, "dataset")?)?;
            let prefix = ds.temporal_prefix(cfg.eval.eval_fraction);
            let aug = augment_dataset(&prefix, &cfg.augment, horizon)?;
            let added = aug.trajectories.len() - prefix.trajectories.len();
            ds.trajectories
                .extend(aug.trajectories.into_iter().skip(prefix.trajectories.len()));
            ds.validate()?;
            run.write_dataset(&ds)?;
            run.write_json(
                "summary.json",
                &serde_json::json!({ "logged": ds.logged().count(), "added": added, "synthetic": ds.num_synthetic() }),
            )
        }
        Command::Train(_) => {
            let ds = run.dataset(required(&cfg.inputs.dataset, "dataset")?)?;
            let train_set = train_split(&ds, cfg.eval.eval_fraction);
            let windows = make_windows(&train_set, horizon, cfg.model.max_hist)?;
            log::info!("training on {} windows", windows.len());
            let mut model = MocdtModel::new(cfg.model.resolve(&ds, horizon))?;
            let curve = train(&mut model, &windows, &cfg.train, |epoch, m, _| {
                let mut buf = Vec::new();
                write_checkpoint(m, &mut buf).map_err(|e| Error::io("checkpoint", e))?;
                let name = checkpoint_path(Path::new("checkpoints"), epoch);
                run.write(&name.to_string_lossy(), &buf)
            })?;
            let mut buf = Vec::new();
            write_loss_curve(&curve, &mut buf).map_err(|e| Error::io("loss.csv", e))?;
            run.write("loss.csv", &buf)
        }
        Command::Generate(_) => generate_cmd(cfg, run),
        Command::Evaluate(_) => evaluate_cmd(cfg, run),
        Command::Ablate(_) => {
            let ds = run.dataset(required(&cfg.inputs.dataset, "dataset")?)?;
            let oracle = run.oracle(required(&cfg.inputs.oracle, "oracle")?, ds.scale())?;
            let values = cfg.ablate.values.clone();
            let axis = match cfg.ablate.axis.as_str() {
                "layers" if values.is_empty() => AblationAxis::default_layers(),
                "layers" => AblationAxis::Layers(values),
                "horizon" if values.is_empty() => AblationAxis::default_horizon(),
                "horizon" => AblationAxis::Horizon(values),
                other => {
                    return Err(Error::Config {
                        field: "ablate.axis".into(),
                        message: format!("expected layers or horizon, got {other:?}"),
                    })
                }
            };
            let train_set = train_split(&ds, cfg.eval.eval_fraction);
            let base = cfg.model.resolve(&ds, horizon);
            let table = ablation_sweep(&train_set, &ds, &oracle, &axis, &base, &cfg.train, &cfg.eval)?;
            let mut csv = Vec::new();
            table.write_csv(&mut csv)?;
            run.write("ablation.csv", &csv)?;
            run.write("ablation.md", table.to_markdown().as_bytes())
        }
        Command::Report(_) => {
            let bytes = run.read(required(&cfg.inputs.report, "report")?)?;
            let rows = parse_report(&bytes[..])?;
            let stats = controllability_stats(&rows)?;
            println!("{}", serde_json::to_string_pretty(&stats).map_err(|e| Error::Format(e.to_string()))?);
            run.write_json("stats.json", &stats)
        }
    }
}

fn generate_cmd(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let model = run.checkpoint(required(&cfg.inputs.checkpoint, "checkpoint")?)?;
    let ds = run.dataset(required(&cfg.inputs.dataset, "dataset")?)?;
    let oracle = run.oracle(required(&cfg.inputs.oracle, "oracle")?, ds.scale())?;
    let mode: DecodeMode = cfg.generate.mode.parse().map_err(|e: Error| Error::Config {
        field: "generate.mode".into(),
        message: e.to_string(),
    })?;
    let horizon = cfg.horizon.unwrap_or(model.config().horizon);
    let contexts = eval_contexts(&ds, &UserSelection::All, cfg.eval.eval_fraction, model.config().max_hist)?;
    let selected: Vec<(usize, Vec<usize>)> = if cfg.generate.users.is_empty() {
        contexts
    } else {
        cfg.generate
            .users
            .iter()
            .map(|&ext| {
                let u = ds
                    .user_ids
                    .to_internal(ext)
                    .ok_or_else(|| Error::Lookup(format!("unknown user {ext}")))?;
                contexts
                    .iter()
                    .find(|c| c.0 == u)
                    .cloned()
                    .ok_or_else(|| Error::Lookup(format!("user {ext} has no logged trajectory")))
            })
            .collect::<Result<_>>()?
    };
    let reqs: Vec<GenRequest> = selected
        .into_iter()
        .map(|(user, history)| GenRequest {
            user,
            history,
            point: cfg.generate.point,
            horizon,
            mode,
            seed: cfg.generate.seed,
            forbid_repeats: cfg.generate.forbid_repeats,
            exclude_history: cfg.generate.exclude_history,
        })
        .collect();
    let results = reqs
        .par_chunks(cfg.eval.batch_size.max(1))
        .map(|chunk| generate_batch(&model, chunk))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten();
    let mut out = String::new();
    for (req, res) in reqs.iter().zip(results) {
        let (rating, diversity) = if res.items.len() >= 2 {
            let (r, d) = score_sequence(&oracle, &ds.catalog, req.user, &res.items)?;
            (Some(r), Some(d))
        } else {
            let r = score_sequence(&oracle, &ds.catalog, req.user, &res.items).ok();
            (r.map(|s| s.0), None)
        };
        let external = |map: &crate::corpus::IdMap, id: usize| map.to_external(id).unwrap_or(id as u64);
        let line = serde_json::json!({
            "user": external(&ds.user_ids, req.user),
            "point": req.point.as_array(),
            "items": res.items.iter().map(|&i| external(&ds.item_ids, i)).collect::<Vec<_>>(),
            "rating": rating,
            "diversity": diversity,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    print!("{out}");
    run.write("generations.jsonl", out.as_bytes())
}

/// Epochs of the `epoch_NNN.ckpt` files in `dir`, ascending.
fn checkpoint_epochs(dir: &Path) -> Result<Vec<usize>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut epochs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(n) = name.strip_prefix("epoch_").and_then(|s| s.strip_suffix(".ckpt")) {
            if let Ok(e) = n.parse() {
                epochs.push(e);
            }
        }
    }
    epochs.sort_unstable();
    if epochs.is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no epoch_NNN.ckpt files"),
        ));
    }
    Ok(epochs)
}

fn evaluate_cmd(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let dir = required(&cfg.inputs.checkpoints, "checkpoints")?;
    let ds = run.dataset(required(&cfg.inputs.dataset, "dataset")?)?;
    let oracle = run.oracle(required(&cfg.inputs.oracle, "oracle")?, ds.scale())?;
    let epochs = if cfg.eval.checkpoints.is_empty() {
        checkpoint_epochs(dir)?
    } else {
        cfg.eval.checkpoints.clone()
    };
    let mut rows: Vec<ReportRow> = Vec::new();
    for epoch in epochs {
        let path = checkpoint_path(dir, epoch);
        if !path.exists() {
            return Err(Error::io(
                &path,
                std::io::Error::new(std::io::ErrorKind::NotFound, format!("checkpoint for epoch {epoch} not found")),
            ));
        }
        let model = run.checkpoint(&path)?;
        let ecfg = EvalConfig {
            horizon: cfg.horizon.unwrap_or(model.config().horizon),
            ..cfg.eval.clone()
        };
        let (r, _) = evaluate_model(&model, epoch, &ds, &oracle, &ecfg)?;
        log::info!("evaluated epoch {epoch}");
        rows.extend(r);
    }
    let mut csv = Vec::new();
    write_report(&rows, &mut csv)?;
    run.write("report.csv", &csv)?;
    let num_epochs = rows.iter().map(|r| r.epoch).collect::<std::collections::BTreeSet<_>>().len();
    if num_epochs >= 2 && cfg.eval.points.len() >= 3 {
        run.write_json("stats.json", &controllability_stats(&rows)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig {
            seed: Some(3),
            horizon: Some(5),
            ..RunConfig::default()
        };
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_names_the_field() {
        let err = RunConfig::from_toml("[train]\nepochs = 3\nlearning_rate = 0.1\n").unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "train.learning_rate"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_type_names_the_field() {
        let err = RunConfig::from_toml("[model]\nd_model = \"big\"\n").unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "model.d_model"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn global_seed_reaches_every_stage() {
        let mut cfg = RunConfig {
            seed: Some(9),
            ..RunConfig::default()
        };
        cfg.apply_seed();
        assert_eq!(
            [cfg.synth.seed, cfg.complete.seed, cfg.augment.seed, cfg.model.seed, cfg.train.seed, cfg.generate.seed],
            [9; 6]
        );
    }

    #[test]
    fn point_flag_parses_and_validates() {
        assert_eq!(parse_point("0.5, 1").unwrap(), ObjectivePoint { o_rate: 0.5, o_div: 1.0 });
        assert!(parse_point("1.5,0").is_err());
        assert!(parse_point("1").is_err());
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        let err = run(["mocdt", "synth", "--bogus", "1"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
