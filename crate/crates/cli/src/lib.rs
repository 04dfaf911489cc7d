//! Command-line surface: data generation, training, sampling, evaluation and
//! the ablation grids. Every command writes its outputs atomically and embeds
//! a run manifest so reruns and aggregations can be checked.

use adcs::baselines::{self, BaselineError};
use adcs::io::{self, Dataset, DatasetHeader, ExperimentConfig, IoError, RunManifest, DATASET_FORMAT, DATASET_VERSION};
use adcs::metrics::{self, CoverageBounds, MetricRow, MetricsError};
use adcs::models::{Checkpoint, WeightingKind};
use adcs::sample::{Replication, SampleBatch, SampleError, Sampler, SamplerConfig};
use adcs::tasks::TaskSpec;
use adcs::train::{TrainError, Trainer};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Parser)]
#[command(name = "adcs", version, about = "Constraint-satisfying configuration sampling with learned compositional energies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a training dataset with the optimisation oracle.
    GenData(GenDataArgs),
    /// Train an energy model on a dataset.
    Train(TrainArgs),
    /// Draw a batch of samples with one method.
    Sample(SampleArgs),
    /// Aggregate sample batches into the metric table.
    Eval(EvalArgs),
    /// Run one ablation grid.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Task id, 1-6.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=6))]
    pub task: u8,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; defaults to `$ADCS_OUT_DIR/data_task{T}_seed{S}.jsonl`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Store the wall time in the header (breaks byte-identical reruns).
    #[arg(long)]
    pub record_time: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides `train.steps`.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Overrides `train.model.weighting`.
    #[arg(long, value_enum)]
    pub weighting: Option<Weighting>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Weighting {
    Fixed,
    Mlp,
    Cwt,
}

impl From<Weighting> for WeightingKind {
    fn from(w: Weighting) -> Self {
        match w {
            Weighting::Fixed => WeightingKind::Fixed,
            Weighting::Mlp => WeightingKind::Mlp,
            Weighting::Cwt => WeightingKind::Cwt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Adcs,
    Ccsp,
    Gn,
    Nlp,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Adcs => "adcs",
            Method::Ccsp => "ccsp",
            Method::Gn => "gn",
            Method::Nlp => "nlp",
        }
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub method: Method,
    /// Trained checkpoint; required for `adcs` and `ccsp`.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the configured sample count.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub record_time: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BoundsArg {
    Workspace,
    Empirical,
}

impl From<BoundsArg> for CoverageBounds {
    fn from(b: BoundsArg) -> Self {
        match b {
            BoundsArg::Workspace => CoverageBounds::Workspace,
            BoundsArg::Empirical => CoverageBounds::Empirical,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Sample files written by `sample`.
    #[arg(long = "in", num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    /// Output CSV; a JSON summary is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Aggregate files from different experiments.
    #[arg(long)]
    pub force: bool,
    /// Overrides `eval.voxel_m`.
    #[arg(long)]
    pub voxel_m: Option<usize>,
    /// Overrides `eval.bounds`.
    #[arg(long, value_enum)]
    pub bounds: Option<BoundsArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grid {
    Weights,
    Kde,
    Sequential,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub which: Grid,
    /// Training data; models are trained per cell as needed.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Trained checkpoint reused by the `kde` and `sequential` grids instead of training.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Sample(a) => sample(&a),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate(&a),
    }
}

fn load_config(c: &Common) -> Result<(ExperimentConfig, TaskSpec), CliError> {
    let cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let task = cfg.task(c.task)?;
    Ok((cfg, task))
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, String), CliError> {
    let text = io::read_to_string(path)?;
    let ck = Checkpoint::from_json(&text).map_err(|msg| CliError::Checkpoint { path: path.to_path_buf(), msg })?;
    Ok((ck, io::file_hash(path)?))
}

fn load_dataset(path: &Path, task: &TaskSpec) -> Result<(Dataset, String), CliError> {
    let d = Dataset::load(path)?;
    if d.header.manifest.task != task.id {
        return Err(CliError::Invalid(format!("{}: holds task {} samples, expected task {}", path.display(), d.header.manifest.task, task.id)));
    }
    Ok((d, io::file_hash(path)?))
}

fn write_batch(path: &Path, generator: &str, manifest: RunManifest, batch: &SampleBatch, time: Option<f64>) -> Result<(), CliError> {
    let header = DatasetHeader { format: DATASET_FORMAT.into(), version: DATASET_VERSION, generator: generator.into(), manifest, wall_time_s: time };
    io::write_atomic(path, Dataset::from_batch(header, batch).to_jsonl().as_bytes())?;
    Ok(())
}

fn input(path: &Path, hash: String) -> (String, String) {
    (path.display().to_string(), hash)
}

pub fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let (mut cfg, task) = load_config(&a.common)?;
    cfg.n_samples = a.n;
    cfg.nlp.seed = a.seed;
    let start = Instant::now();
    let batch = baselines::generate(&task, &cfg.nlp, a.n)?;
    let time = a.record_time.then(|| start.elapsed().as_secs_f64());
    let generator = if baselines::nlp_supported(&task) { "nlp" } else { "rejection" };
    let manifest = RunManifest::new(&cfg, &task, generator, a.seed, vec![]);
    let out = io::output_path(a.out.as_deref(), &format!("data_task{}_seed{}.jsonl", task.id, a.seed));
    write_batch(&out, generator, manifest, &batch, time)
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let (mut cfg, task) = load_config(&a.common)?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(w) = a.weighting {
        cfg.train.model.weighting = w.into();
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let (data, _) = load_dataset(&a.data, &task)?;
    let poses = data.pose_tuples();
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(&task, poses, cfg.train.clone(), load_checkpoint(p)?.0)?,
        None => Trainer::new(&task, poses, cfg.train.clone())?,
    };
    let mut log = String::new();
    trainer.run(|r| {
        log.push_str(&serde_json::to_string(r).expect("log serialization"));
        log.push('\n');
    })?;
    let out = io::output_path(a.out.as_deref(), &format!("model_task{}.json", task.id));
    io::write_atomic(&out, trainer.checkpoint().to_json().as_bytes())?;
    io::write_atomic(&log_path(&out), log.as_bytes())?;
    Ok(())
}

/// `model.json` logs to `model.log.jsonl`.
pub fn log_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("log.jsonl")
}

/// Runs one sampling method with the configured sample count.
pub fn draw(method: Method, cfg: &ExperimentConfig, task: &TaskSpec, ck: Option<&Checkpoint>, seed: u64) -> Result<SampleBatch, CliError> {
    let n = cfg.n_samples;
    let model_of = |ck: Option<&Checkpoint>| ck.map(|c| c.model.clone()).ok_or_else(|| CliError::Invalid(format!("method {} needs --ckpt", method.name())));
    match method {
        Method::Adcs => {
            let model = model_of(ck)?;
            let sc = SamplerConfig { n_s: n, n_r: cfg.sampler.n_r.min(n), seed, ..cfg.sampler.clone() };
            Ok(Sampler::new(&model, task, sc)?.run()?.0)
        }
        Method::Ccsp => {
            let model = model_of(ck)?;
            if model.config.weighting != WeightingKind::Fixed {
                return Err(CliError::Invalid("ccsp needs a checkpoint trained with fixed weights".into()));
            }
            let sc = SamplerConfig { n_s: n, n_r: cfg.sampler.n_r.min(n), seed, ..cfg.sampler.plain_almc() };
            Ok(Sampler::new(&model, task, sc)?.run()?.0)
        }
        Method::Gn => Ok(baselines::gauss_newton_sample(task, n, cfg.sampler.budget, cfg.sampler.init_std, seed)?),
        Method::Nlp => {
            if !baselines::nlp_supported(task) {
                return Err(BaselineError::UnsupportedTask(task.id).into());
            }
            let nc = adcs::baselines::NlpConfig { seed, ..cfg.nlp.clone() };
            Ok(baselines::nlp_sample(task, &nc, n)?)
        }
    }
}

pub fn sample(a: &SampleArgs) -> Result<(), CliError> {
    let (mut cfg, task) = load_config(&a.common)?;
    if let Some(n) = a.n {
        cfg.n_samples = n;
    }
    cfg.sampler.seed = a.seed;
    cfg.nlp.seed = a.seed;
    let needs_model = matches!(a.method, Method::Adcs | Method::Ccsp);
    let (ck, inputs) = match (&a.ckpt, needs_model) {
        (Some(p), true) => {
            let (ck, h) = load_checkpoint(p)?;
            (Some(ck), vec![input(p, h)])
        }
        (None, true) => return Err(CliError::Invalid(format!("method {} needs --ckpt", a.method.name()))),
        _ => (None, vec![]),
    };
    let start = Instant::now();
    let batch = draw(a.method, &cfg, &task, ck.as_ref(), a.seed)?;
    let time = a.record_time.then(|| start.elapsed().as_secs_f64());
    let manifest = RunManifest::new(&cfg, &task, a.method.name(), a.seed, inputs);
    let out = io::output_path(a.out.as_deref(), &format!("{}_task{}_seed{}.jsonl", a.method.name(), task.id, a.seed));
    write_batch(&out, a.method.name(), manifest, &batch, time)
}

/// Sidecar of an `eval` CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub task: u8,
    pub experiment_hashes: Vec<String>,
    pub runs: Vec<EvalRun>,
    pub rows: Vec<MetricRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub path: String,
    pub method: String,
    pub seed: u64,
    pub run_hash: String,
    pub rows: Vec<MetricRow>,
}

/// Metric rows of one batch.
pub fn batch_rows(method: &str, task: &TaskSpec, batch: &SampleBatch, time: Option<f64>, voxel_m: usize, bounds: CoverageBounds) -> Result<Vec<MetricRow>, CliError> {
    let report = metrics::constraint_errors(batch, task, time);
    let vox = if batch.is_empty() { None } else { Some(metrics::batch_voxel_stats(batch, task, voxel_m, bounds)?) };
    Ok(metrics::report_rows(method, task.id, &report, vox.as_ref()))
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let (cfg, task) = load_config(&a.common)?;
    let voxel_m = a.voxel_m.unwrap_or(cfg.eval.voxel_m);
    let bounds = a.bounds.map(Into::into).unwrap_or(cfg.eval.bounds);
    let mut runs = Vec::new();
    let mut hashes: Vec<String> = Vec::new();
    for p in &a.inputs {
        let (d, _) = load_dataset(p, &task)?;
        let m = &d.header.manifest;
        if !hashes.contains(&m.experiment_hash) {
            hashes.push(m.experiment_hash.clone());
        }
        let batch = d.to_batch(&task)?;
        let rows = batch_rows(&m.method, &task, &batch, d.header.wall_time_s, voxel_m, bounds)?;
        runs.push(EvalRun { path: p.display().to_string(), method: m.method.clone(), seed: m.seed, run_hash: m.run_hash.clone(), rows });
    }
    if hashes.len() > 1 && !a.force {
        return Err(IoError::SchemaMismatch(format!("inputs come from {} different experiments; pass --force to aggregate anyway", hashes.len())).into());
    }
    let per_run: Vec<Vec<MetricRow>> = runs.iter().map(|r| r.rows.clone()).collect();
    let rows = metrics::average_rows(&per_run);
    let out = io::output_path(a.out.as_deref(), &format!("eval_task{}.csv", task.id));
    let mut csv = Vec::new();
    metrics::write_csv(&rows, &mut csv)?;
    io::write_atomic(&out, &csv)?;
    let summary = EvalSummary { task: task.id, experiment_hashes: hashes, runs, rows };
    io::write_atomic(&out.with_extension("json"), serde_json::to_string_pretty(&summary).expect("summary serialization").as_bytes())?;
    Ok(())
}

/// One cell of an ablation grid, averaged over the configured seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub grid: Grid,
    pub cell: String,
    pub config_hash: String,
    pub task: u8,
    pub metric: String,
    pub mean: f64,
    pub median: f64,
    pub q3: f64,
}

/// Cells of a grid as (name, full configuration).
fn cells(grid: Grid, cfg: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = cfg.clone();
        f(&mut c);
        c
    };
    match grid {
        Grid::Weights => [("fixed", WeightingKind::Fixed), ("mlp", WeightingKind::Mlp), ("cwt", WeightingKind::Cwt)]
            .into_iter()
            .map(|(n, w)| (n.to_string(), with(&|c| c.train.model.weighting = w)))
            .collect(),
        Grid::Kde => [("uniform", Replication::Uniform), ("kde", Replication::Kde)]
            .into_iter()
            .map(|(n, r)| (n.to_string(), with(&|c| c.sampler.replication = r)))
            .collect(),
        Grid::Sequential => [("off", false), ("on", true)]
            .into_iter()
            .map(|(n, s)| (n.to_string(), with(&|c| c.sampler.sequential = s)))
            .collect(),
    }
}

fn train_model(task: &TaskSpec, data: &Dataset, cfg: &ExperimentConfig) -> Result<Checkpoint, CliError> {
    let mut t = Trainer::new(task, data.pose_tuples(), cfg.train.clone())?;
    t.run(|_| {})?;
    Ok(t.checkpoint())
}

pub fn ablation_rows(grid: Grid, cfg: &ExperimentConfig, task: &TaskSpec, data: Option<&Dataset>, ckpt: Option<&Checkpoint>) -> Result<Vec<AblationRow>, CliError> {
    let mut out = Vec::new();
    let mut shared: Option<Checkpoint> = ckpt.cloned();
    for (name, c) in cells(grid, cfg) {
        let ck = match (grid, &shared) {
            (Grid::Weights, _) | (_, None) => {
                let d = data.ok_or_else(|| CliError::Invalid("this grid needs --data (or --ckpt for kde and sequential)".into()))?;
                let ck = train_model(task, d, &c)?;
                if grid != Grid::Weights {
                    shared = Some(ck.clone());
                }
                ck
            }
            (_, Some(ck)) => ck.clone(),
        };
        let mut per_seed = Vec::new();
        for &seed in &c.seeds {
            let batch = draw(Method::Adcs, &c, task, Some(&ck), seed)?;
            per_seed.push(batch_rows(&name, task, &batch, None, c.eval.voxel_m, c.eval.bounds)?);
        }
        let hash = c.hash();
        out.extend(metrics::average_rows(&per_seed).into_iter().map(|r| AblationRow {
            grid,
            cell: name.clone(),
            config_hash: hash.clone(),
            task: r.task,
            metric: r.metric,
            mean: r.mean,
            median: r.median,
            q3: r.q3,
        }));
    }
    Ok(out)
}

pub fn ablate(a: &AblateArgs) -> Result<(), CliError> {
    let (cfg, task) = load_config(&a.common)?;
    let data = a.data.as_deref().map(|p| load_dataset(p, &task)).transpose()?.map(|d| d.0);
    let ck = a.ckpt.as_deref().map(load_checkpoint).transpose()?.map(|c| c.0);
    let rows = ablation_rows(a.which, &cfg, &task, data.as_ref(), ck.as_ref())?;
    let which = match a.which {
        Grid::Weights => "weights",
        Grid::Kde => "kde",
        Grid::Sequential => "sequential",
    };
    let out = io::output_path(a.out.as_deref(), &format!("ablate_{which}_task{}.csv", task.id));
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(MetricsError::from)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Invalid(e.to_string()))?;
    io::write_atomic(&out, &bytes)?;
    Ok(())
}
