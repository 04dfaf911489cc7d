//! Experiment configuration, run manifests, the line-delimited sample format
//! and atomic file output.

use crate::baselines::NlpConfig;
use crate::lie::Pose;
use crate::metrics::CoverageBounds;
use crate::sample::{SampleBatch, SamplerConfig};
use crate::tasks::{TaskError, TaskSpec, Variant};
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;
pub const DATASET_FORMAT: &str = "adcs-samples";
pub const DATASET_VERSION: u32 = 1;
/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "ADCS_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("schema version {found} is not supported (expected {SCHEMA_VERSION})")]
    SchemaVersion { found: u32 },
    #[error("{0}")]
    SchemaMismatch(String),
    #[error(transparent)]
    Task(#[from] TaskError),
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

fn default_n() -> usize {
    500
}

fn default_voxel_m() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_voxel_m")]
    pub voxel_m: usize,
    #[serde(default)]
    pub bounds: CoverageBounds,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { voxel_m: default_voxel_m(), bounds: CoverageBounds::default() }
    }
}

/// Everything that parameterises a run besides the task id, method and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Samples per run (dataset size for generation, batch size for sampling).
    #[serde(default = "default_n")]
    pub n_samples: usize,
    /// Out-of-distribution modifications applied to the builtin task.
    #[serde(default)]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub nlp: NlpConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seeds: default_seeds(),
            n_samples: default_n(),
            variants: Vec::new(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            nlp: NlpConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self, String> {
        let c: ExperimentConfig = toml::from_str(s).map_err(|e| e.to_string())?;
        if c.schema_version != SCHEMA_VERSION {
            return Err(IoError::SchemaVersion { found: c.schema_version }.to_string());
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let s = read_to_string(path)?;
        Self::from_toml(&s).map_err(|msg| IoError::Parse { path: path.to_path_buf(), msg })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialization")
    }

    /// The builtin task with this config's variants applied and validated.
    pub fn task(&self, id: u8) -> Result<TaskSpec, IoError> {
        let mut t = TaskSpec::builtin(id)?;
        for v in &self.variants {
            t = t.with_variant(*v)?;
        }
        t.validate(self.train.model.n_max)?;
        Ok(t)
    }

    /// Hash over every field.
    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

/// SHA-256 of the canonical JSON encoding of `v`.
pub fn hash_json<T: Serialize>(v: &T) -> String {
    let s = serde_json::to_string(v).expect("hash serialization");
    hex::encode(Sha256::digest(s.as_bytes()))
}

/// Identity of one run. `experiment_hash` is shared by every method and seed of
/// an experiment; `run_hash` additionally covers method, seed and inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub experiment_hash: String,
    pub run_hash: String,
    pub task: u8,
    pub method: String,
    pub seed: u64,
    pub n_samples: usize,
    pub budget: usize,
    /// Input artifacts (checkpoint or dataset) with their content hashes.
    pub inputs: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig, task: &TaskSpec, method: &str, seed: u64, inputs: Vec<(String, String)>) -> Self {
        let mut shared = cfg.clone();
        shared.sampler.seed = 0;
        shared.nlp.seed = 0;
        let experiment_hash = hash_json(&(shared, task));
        let mut m = RunManifest {
            experiment_hash,
            run_hash: String::new(),
            task: task.id,
            method: method.to_string(),
            seed,
            n_samples: cfg.n_samples,
            budget: cfg.sampler.budget,
            inputs,
        };
        m.run_hash = hash_json(&m);
        m
    }
}

/// First line of every sample file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    /// Producing method, e.g. `nlp`, `rejection`, `adcs`.
    pub generator: String,
    pub manifest: RunManifest,
    /// Wall time of the producing call; only present when requested, since it
    /// breaks byte-identical reruns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

/// One sample as a flat record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub task: u8,
    pub seed: u64,
    pub q: Vec<f64>,
    /// Per end effector: quaternion (w, x, y, z) then translation.
    pub poses: Vec<[f64; 7]>,
    pub slack: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn from_batch(header: DatasetHeader, batch: &SampleBatch) -> Self {
        let (task, seed) = (header.manifest.task, header.manifest.seed);
        let records = (0..batch.len())
            .map(|i| SampleRecord {
                task,
                seed,
                q: batch.configs[i].clone(),
                poses: batch.poses[i].iter().map(|p| p.to_array7()).collect(),
                slack: batch.slack[i].clone(),
            })
            .collect();
        Dataset { header, records }
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = serde_json::to_string(&self.header).expect("header serialization");
        s.push('\n');
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serialization"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: DatasetHeader = serde_json::from_str(lines.next().ok_or("empty file")?).map_err(|e| format!("header: {e}"))?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(format!("unsupported sample file `{}` v{}", header.format, header.version));
        }
        let records = lines.enumerate().map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("record {}: {e}", i + 1))).collect::<Result<_, _>>()?;
        Ok(Dataset { header, records })
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::from_jsonl(&read_to_string(path)?).map_err(|msg| IoError::Parse { path: path.to_path_buf(), msg })
    }

    pub fn pose_tuples(&self) -> Vec<Vec<Pose>> {
        self.records.iter().map(|r| r.poses.iter().map(Pose::from_array7).collect()).collect()
    }

    /// Rebuilds a batch under `task`, recomputing poses and slacks from the stored configurations.
    pub fn to_batch(&self, task: &TaskSpec) -> Result<SampleBatch, crate::sample::SampleError> {
        let configs: Vec<Vec<f64>> = self.records.iter().map(|r| r.q.clone()).collect();
        let n = configs.len();
        SampleBatch::from_configs(task, configs, vec![0.0; n])
    }
}

pub fn read_to_string(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|source| IoError::File { path: path.to_path_buf(), source })
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String, IoError> {
    let bytes = std::fs::read(path).map_err(|source| IoError::File { path: path.to_path_buf(), source })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes `bytes` to a temporary sibling of `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let err = |source| IoError::File { path: path.to_path_buf(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(err)?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(err)?;
    f.write_all(bytes).map_err(err)?;
    f.sync_all().map_err(err)?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(err)
}

/// `path` if given, else `file` inside `$ADCS_OUT_DIR` (or the working directory).
pub fn output_path(path: Option<&Path>, file: &str) -> PathBuf {
    match path {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(".")).join(file),
    }
}
