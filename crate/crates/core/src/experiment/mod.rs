//! Experiment driver: configuration, per-seed runs of every method from a
//! shared initialization, aligned error metrics and result files.

pub mod bench;
pub mod export;
pub mod metrics;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{run_estimation, EstimationTrace, EstimatorConfig, Method, Termination};
use crate::model::{
    default_initialization, generate_ground_truth, sample_mixture_labeled, GroundTruthSpec, MixtureParams, RankMode, SampleSet,
};
use crate::rng::derive_seed;

pub use metrics::{align_components, aligned_error_metrics, error_metrics, ErrorMetrics, MatrixNorm};

const TRUTH_STREAM: u64 = 1;
const DATA_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;
const KERNEL_STREAM: u64 = 4;

/// Ground-truth recipe without a seed (seeds come from the experiment).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    pub k: usize,
    pub d: usize,
    pub r_max: usize,
    #[serde(default = "default_rank_mode")]
    pub rank_mode: RankMode,
    #[serde(default = "default_lambda_min")]
    pub lambda_min: f64,
    #[serde(default = "default_lambda_max")]
    pub lambda_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

fn default_rank_mode() -> RankMode {
    RankMode::Identical
}

fn default_lambda_min() -> f64 {
    25.0
}

fn default_lambda_max() -> f64 {
    100.0
}

impl TruthConfig {
    pub fn spec(&self, seed: u64) -> GroundTruthSpec {
        GroundTruthSpec {
            k: self.k,
            d: self.d,
            r_max: self.r_max,
            rank_mode: self.rank_mode.clone(),
            lambda_min: self.lambda_min,
            lambda_max: self.lambda_max,
            weights: self.weights.clone(),
            seed,
        }
    }
}

/// On-disk form: a base `[estimator]` table plus per-method `[overrides.<method>]` tables.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    #[serde(default = "default_name")]
    name: String,
    truth: TruthConfig,
    n: usize,
    methods: Vec<Method>,
    seeds: Vec<u64>,
    #[serde(default)]
    truth_seed: Option<u64>,
    #[serde(default = "default_repetitions")]
    repetitions: usize,
    #[serde(default = "default_workers")]
    workers: usize,
    #[serde(default)]
    norm: MatrixNorm,
    #[serde(default)]
    estimator: toml::Table,
    #[serde(default)]
    overrides: toml::Table,
    #[serde(default)]
    out_dir: Option<PathBuf>,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_repetitions() -> usize {
    3
}

fn default_workers() -> usize {
    1
}

/// Resolved experiment: one estimator configuration per method, in run order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub truth: TruthConfig,
    pub n: usize,
    pub seeds: Vec<u64>,
    /// Fixes the ground truth across seeds; only data, initialization and
    /// kernel landmarks then vary with the seed.
    pub truth_seed: Option<u64>,
    /// Timed runs per cell; estimates come from the first.
    pub repetitions: usize,
    /// Cells of one seed that may run concurrently.
    pub workers: usize,
    pub norm: MatrixNorm,
    pub estimators: Vec<EstimatorConfig>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ExperimentFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut estimators = Vec::with_capacity(file.methods.len());
        for key in file.overrides.keys() {
            let m: Method = key.parse()?;
            if !file.methods.contains(&m) {
                return Err(Error::Config(format!("override for `{m}`, which is not in `methods`")));
            }
        }
        for &method in &file.methods {
            let mut table = file.estimator.clone();
            if let Some(over) = file.overrides.get(method.name()) {
                let over = over.as_table().ok_or_else(|| Error::Config(format!("overrides.{method} must be a table")))?;
                for (k, v) in over {
                    table.insert(k.clone(), v.clone());
                }
            }
            table.insert("method".into(), toml::Value::String(method.name().into()));
            let cfg: EstimatorConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{method}: {e}")))?;
            estimators.push(cfg);
        }
        let config = Self {
            name: file.name,
            truth: file.truth,
            n: file.n,
            seeds: file.seeds,
            truth_seed: file.truth_seed,
            repetitions: file.repetitions,
            workers: file.workers,
            norm: file.norm,
            estimators,
            out_dir: file.out_dir,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.estimators.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        if self.repetitions == 0 || self.workers == 0 {
            return Err(Error::Config("repetitions and workers must be positive".into()));
        }
        for (i, e) in self.estimators.iter().enumerate() {
            if self.estimators[..i].iter().any(|p| p.method == e.method) {
                return Err(Error::Config(format!("method `{}` listed twice", e.method)));
            }
            e.validate()?;
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        self.truth.spec(0).validate()
    }

    /// Keeps only `method`.
    pub fn restrict_to(&mut self, method: Method) -> Result<()> {
        let base = self.estimators.first().cloned().unwrap_or_default();
        let cfg = self.estimators.iter().find(|e| e.method == method).cloned().unwrap_or(EstimatorConfig { method, ..base });
        self.estimators = vec![cfg];
        self.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// One (method, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub seed: u64,
    pub status: CellStatus,
    pub error: Option<String>,
    pub metrics: Option<ErrorMetrics>,
    /// Inner-solver iterations summed over steps.
    pub iterations: usize,
    pub steps: usize,
    pub termination: Option<Termination>,
    pub wall_times_s: Vec<f64>,
    pub wall_time_mean_s: f64,
    pub wall_time_std_s: f64,
    /// Relative to the output directory.
    pub trace_file: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self { median: median_sorted(&v), min: v[0], max: v[v.len() - 1] })
    }
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median of `values` (`None` if empty).
pub fn median(values: &[f64]) -> Option<f64> {
    Spread::of(values).map(|s| s.median)
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub completed: usize,
    pub failed: usize,
    pub err_pi: Option<Spread>,
    pub err_mu: Option<Spread>,
    pub err_sigma: Option<Spread>,
    pub iterations: Option<Spread>,
    pub wall_time_mean_s: f64,
    pub wall_time_std_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
    pub summaries: Vec<MethodSummary>,
}

impl ExperimentResult {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn cell(&self, method: Method, seed: u64) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.method == method && c.seed == seed)
    }

    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }
}

/// Everything about one (method, seed) run, written to `traces/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub truth: MixtureParams,
    pub init: MixtureParams,
    /// Aligned to the truth.
    pub estimate: Option<MixtureParams>,
    pub trace: Option<EstimationTrace>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub result: ExperimentResult,
    pub runs: Vec<RunRecord>,
}

/// Seeded inputs of one experiment seed.
#[derive(Debug, Clone)]
pub struct SeedInputs {
    pub truth: MixtureParams,
    pub data: SampleSet,
    pub labels: Vec<usize>,
    pub init: MixtureParams,
}

pub fn seed_inputs(config: &ExperimentConfig, seed: u64) -> Result<SeedInputs> {
    let truth_seed = config.truth_seed.unwrap_or_else(|| derive_seed(seed, TRUTH_STREAM));
    let truth = generate_ground_truth(&config.truth.spec(truth_seed))?;
    let (data, labels) = sample_mixture_labeled(&truth, config.n, derive_seed(seed, DATA_STREAM))?;
    let init = initialization(config.truth.k, config.truth.d, config.truth.r_max, seed)?;
    Ok(SeedInputs { truth, data, labels, init })
}

/// The shared random initialization of experiment seed `seed`.
pub fn initialization(k: usize, d: usize, r_max: usize, seed: u64) -> Result<MixtureParams> {
    default_initialization(k, d, r_max, derive_seed(seed, INIT_STREAM))
}

/// `est` with its landmark seed tied to experiment seed `seed`.
pub fn seeded_estimator(est: &EstimatorConfig, seed: u64) -> EstimatorConfig {
    let mut est = est.clone();
    est.kernel_seed = derive_seed(seed, KERNEL_STREAM).wrapping_add(est.kernel_seed);
    est
}

fn run_cell(config: &ExperimentConfig, est: &EstimatorConfig, seed: u64, inputs: &SeedInputs) -> (CellResult, RunRecord) {
    let est = seeded_estimator(est, seed);
    let mut times = Vec::with_capacity(config.repetitions);
    let mut first = None;
    for _ in 0..config.repetitions {
        match run_estimation(&inputs.data, &est, &inputs.init) {
            Ok((params, trace)) => {
                times.push(trace.wall_time_s);
                first.get_or_insert((params, trace));
            }
            Err(e) => return failed_cell(est.method, seed, inputs, e.to_string()),
        }
    }
    let (params, trace) = first.expect("at least one repetition");
    let (estimate, metrics) = match aligned_error_metrics(&params, &inputs.truth, config.norm) {
        Ok(v) => v,
        Err(e) => return failed_cell(est.method, seed, inputs, e.to_string()),
    };
    let (mean, std) = mean_std(&times);
    let cell = CellResult {
        method: est.method,
        seed,
        status: CellStatus::Ok,
        error: None,
        metrics: Some(metrics),
        iterations: trace.total_iterations,
        steps: trace.steps.len(),
        termination: Some(trace.termination),
        wall_times_s: times,
        wall_time_mean_s: mean,
        wall_time_std_s: std,
        trace_file: None,
    };
    let record = RunRecord {
        method: est.method,
        seed,
        truth: inputs.truth.clone(),
        init: inputs.init.clone(),
        estimate: Some(estimate),
        trace: Some(trace),
    };
    (cell, record)
}

fn failed_cell(method: Method, seed: u64, inputs: &SeedInputs, error: String) -> (CellResult, RunRecord) {
    let cell = CellResult {
        method,
        seed,
        status: CellStatus::Failed,
        error: Some(error),
        metrics: None,
        iterations: 0,
        steps: 0,
        termination: None,
        wall_times_s: Vec::new(),
        wall_time_mean_s: 0.0,
        wall_time_std_s: 0.0,
        trace_file: None,
    };
    let record = RunRecord { method, seed, truth: inputs.truth.clone(), init: inputs.init.clone(), estimate: None, trace: None };
    (cell, record)
}

fn run_seed(config: &ExperimentConfig, seed: u64, inputs: &SeedInputs) -> Vec<(CellResult, RunRecord)> {
    let cell = |est: &EstimatorConfig| run_cell(config, est, seed, inputs);
    #[cfg(feature = "parallel")]
    if config.workers > 1 && config.estimators.len() > 1 {
        use rayon::prelude::*;
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(config.workers).build() {
            return pool.install(|| config.estimators.par_iter().map(cell).collect());
        }
    }
    config.estimators.iter().map(cell).collect()
}

pub fn summarize(config: &ExperimentConfig, cells: &[CellResult]) -> Vec<MethodSummary> {
    config
        .estimators
        .iter()
        .map(|e| {
            let ok: Vec<&CellResult> = cells.iter().filter(|c| c.method == e.method && c.status == CellStatus::Ok).collect();
            let metric = |f: fn(&ErrorMetrics) -> f64| Spread::of(&ok.iter().filter_map(|c| c.metrics.as_ref().map(f)).collect::<Vec<_>>());
            let times: Vec<f64> = ok.iter().flat_map(|c| c.wall_times_s.iter().copied()).collect();
            let (mean, std) = mean_std(&times);
            MethodSummary {
                method: e.method,
                completed: ok.len(),
                failed: cells.iter().filter(|c| c.method == e.method && c.status == CellStatus::Failed).count(),
                err_pi: metric(|m| m.err_pi),
                err_mu: metric(|m| m.err_mu),
                err_sigma: metric(|m| m.err_sigma),
                iterations: Spread::of(&ok.iter().map(|c| c.iterations as f64).collect::<Vec<_>>()),
                wall_time_mean_s: mean,
                wall_time_std_s: std,
            }
        })
        .collect()
}

/// Runs every method on every seed. With `out_dir`, writes `result.json`,
/// `summary.csv` and one `traces/<method>-seed<seed>.json` per cell.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutput> {
    config.validate()?;
    let mut cells = Vec::new();
    let mut runs = Vec::new();
    for &seed in &config.seeds {
        let inputs = seed_inputs(config, seed)?;
        for (cell, record) in run_seed(config, seed, &inputs) {
            cells.push(cell);
            runs.push(record);
        }
    }
    if let Some(dir) = out_dir {
        let traces = dir.join("traces");
        fs::create_dir_all(&traces).map_err(|e| Error::Io(format!("{}: {e}", traces.display())))?;
        for (cell, record) in cells.iter_mut().zip(&runs) {
            let name = format!("traces/{}-seed{}.json", cell.method, cell.seed);
            write_json(&dir.join(&name), record)?;
            cell.trace_file = Some(name);
        }
    }
    let summaries = summarize(config, &cells);
    let result = ExperimentResult { config: config.clone(), cells, summaries };
    if let Some(dir) = out_dir {
        write_json(&dir.join("result.json"), &result)?;
        write_summary_csv(&dir.join("summary.csv"), &result.summaries)?;
    }
    Ok(ExperimentOutput { result, runs })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

/// Table with one row per method: completed/failed cells, median errors,
/// median iterations and wall time mean and standard deviation.
pub fn write_summary_csv(path: &Path, summaries: &[MethodSummary]) -> Result<()> {
    let io = |e: csv::Error| Error::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["method", "completed", "failed", "err_pi", "err_mu", "err_sigma", "iterations", "wall_time_mean_s", "wall_time_std_s"])
        .map_err(io)?;
    let med = |s: &Option<Spread>| s.map(|s| s.median.to_string()).unwrap_or_default();
    for s in summaries {
        w.write_record([
            s.method.to_string(),
            s.completed.to_string(),
            s.failed.to_string(),
            med(&s.err_pi),
            med(&s.err_mu),
            med(&s.err_sigma),
            med(&s.iterations),
            s.wall_time_mean_s.to_string(),
            s.wall_time_std_s.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}
