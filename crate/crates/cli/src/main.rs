//! `dgmm`: generate data, fit one method, run experiments, time the objective
//! paths and export scatter data.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dgmm_core::estimator::{run_estimation, EstimationTrace, Method};
use dgmm_core::experiment::bench::{benchmark_scaling, parse_bench_config, write_bench_csv, BenchConfig};
use dgmm_core::experiment::export::{export_scatter, read_labels, read_samples, write_labels, write_samples};
use dgmm_core::experiment::{
    aligned_error_metrics, initialization, read_json, run_experiment, seed_inputs, seeded_estimator, write_json, CellStatus, ErrorMetrics,
    ExperimentConfig, MethodSummary,
};
use dgmm_core::model::MixtureParams;

const DEFAULT_CONFIG: &str = include_str!("../../../configs/table2.toml");

#[derive(Parser)]
#[command(name = "dgmm", version, about = "Moment-based estimation of low-rank Gaussian mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML); `bench` takes a bench configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed; overrides the configured seed list.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for per-sample work.
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a ground truth and samples; writes truth.json, init.json, samples.csv and labels.csv.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Fit one method to a sample file; writes fit.json.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Sample file (header `y1,...,yd`, one sample per row).
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        #[arg(long, value_name = "NAME", default_value = "dgmm", value_parser = parse_method)]
        method: Method,
        /// Ground truth (truth.json) for error metrics.
        #[arg(long, value_name = "PATH")]
        truth: Option<PathBuf>,
    },
    /// Run every configured method on every seed; writes result.json, summary.csv and traces/.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Run only this method.
        #[arg(long, value_name = "NAME", value_parser = parse_method)]
        method: Option<Method>,
        /// Also export scatter files per seed under scatter/.
        #[arg(long)]
        scatter: bool,
    },
    /// Time one objective evaluation on the implicit and explicit paths across d; writes bench.csv.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Write scatter.csv and scatter.svg for a sample file and parameter sets.
    ExportScatter {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Parameter files (truth.json, init.json, fit.json or traces/*.json); repeatable.
        #[arg(long, value_name = "PATH")]
        params: Vec<PathBuf>,
        /// Component labels (labels.csv).
        #[arg(long, value_name = "PATH")]
        labels: Option<PathBuf>,
    },
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: dgmm_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Generate { common }
        | Command::Fit { common, .. }
        | Command::Experiment { common, .. }
        | Command::Bench { common }
        | Command::ExportScatter { common, .. } => common,
    };
    if let Some(n) = common.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Generate { common } => generate(common),
        Command::Fit { common, data, method, truth } => fit(common, data, *method, truth.as_deref()),
        Command::Experiment { common, method, scatter } => experiment(common, *method, *scatter),
        Command::Bench { common } => bench(common),
        Command::ExportScatter { common, data, params, labels } => scatter(common, data, params, labels.as_deref()),
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::from_toml_str(DEFAULT_CONFIG)?,
    };
    if let Some(seed) = common.seed {
        config.seeds = vec![seed];
    }
    Ok(config)
}

fn out_dir(common: &Common, fallback: impl FnOnce() -> PathBuf) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(fallback);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn generate(common: &Common) -> Result<()> {
    let config = load_config(common)?;
    let seed = config.seeds[0];
    let dir = out_dir(common, || PathBuf::from("data"))?;
    let inputs = seed_inputs(&config, seed)?;
    write_json(&dir.join("truth.json"), &inputs.truth)?;
    write_json(&dir.join("init.json"), &inputs.init)?;
    let comment =
        format!("dgmm samples: n={} d={} k={} seed={seed}\none sample per row; columns y1..yd", config.n, config.truth.d, config.truth.k);
    write_samples(&dir.join("samples.csv"), &inputs.data, &comment)?;
    write_labels(&dir.join("labels.csv"), &inputs.labels)?;
    println!("wrote {} samples (d = {}) to {}", inputs.data.len(), inputs.data.dim(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct FitRecord {
    method: Method,
    seed: u64,
    data: PathBuf,
    init: MixtureParams,
    /// Aligned to the truth when one was given.
    estimate: MixtureParams,
    metrics: Option<ErrorMetrics>,
    trace: EstimationTrace,
}

fn fit(common: &Common, data_path: &Path, method: Method, truth_path: Option<&Path>) -> Result<()> {
    let mut config = load_config(common)?;
    config.restrict_to(method)?;
    let seed = config.seeds[0];
    let data = read_samples(data_path)?;
    let (k, r_max) = (config.truth.k, config.truth.r_max);
    if r_max > data.dim() {
        bail!("configured r_max = {r_max} exceeds the data dimension {}", data.dim());
    }
    let init = initialization(k, data.dim(), r_max, seed)?;
    let est = seeded_estimator(&config.estimators[0], seed);
    let (params, trace) = run_estimation(&data, &est, &init)?;
    let (estimate, metrics) = match truth_path {
        Some(path) => {
            let truth: MixtureParams = read_json(path)?;
            let (aligned, m) = aligned_error_metrics(&params, &truth, config.norm)?;
            (aligned, Some(m))
        }
        None => (params, None),
    };
    let dir = out_dir(common, || PathBuf::from("fit"))?;
    println!(
        "{method}: {} steps, {} iterations, Q = {:.6e}, {:.2}s ({:?})",
        trace.steps.len(),
        trace.total_iterations,
        trace.steps.last().map_or(f64::NAN, |s| s.objective),
        trace.wall_time_s,
        trace.termination
    );
    if let Some(m) = &metrics {
        println!("err_pi = {:.6}  err_mu = {:.6}  err_sigma = {:.6}", m.err_pi, m.err_mu, m.err_sigma);
    }
    let record = FitRecord { method, seed, data: data_path.to_path_buf(), init, estimate, metrics, trace };
    write_json(&dir.join("fit.json"), &record)?;
    println!("wrote {}", dir.join("fit.json").display());
    Ok(())
}

fn experiment(common: &Common, method: Option<Method>, scatter: bool) -> Result<()> {
    let mut config = load_config(common)?;
    if let Some(m) = method {
        config.restrict_to(m)?;
    }
    let fallback = config.out_dir.clone().unwrap_or_else(|| PathBuf::from("results").join(&config.name));
    let dir = out_dir(common, || fallback)?;
    let out = run_experiment(&config, Some(&dir))?;
    for cell in out.result.cells.iter().filter(|c| c.status == CellStatus::Failed) {
        eprintln!("warning: {} seed {} failed: {}", cell.method, cell.seed, cell.error.as_deref().unwrap_or("unknown error"));
    }
    print_summary(&out.result.summaries);
    if scatter {
        for &seed in &config.seeds {
            let inputs = seed_inputs(&config, seed)?;
            let mut sets = vec![("truth".to_string(), inputs.truth.clone()), ("init".to_string(), inputs.init.clone())];
            for run in out.runs.iter().filter(|r| r.seed == seed) {
                if let Some(est) = &run.estimate {
                    sets.push((run.method.to_string(), est.clone()));
                }
            }
            export_scatter(&inputs.data, &sets, Some(&inputs.labels), &dir.join("scatter").join(format!("seed{seed}")))?;
        }
    }
    println!("wrote {}", dir.join("result.json").display());
    Ok(())
}

fn print_summary(summaries: &[MethodSummary]) {
    println!(
        "{:<14}{:>4}{:>8}{:>13}{:>13}{:>13}{:>8}{:>22}",
        "method", "ok", "failed", "err_pi", "err_mu", "err_sigma", "iters", "time (s)"
    );
    let med = |s: &Option<dgmm_core::experiment::Spread>| s.map_or("-".to_string(), |s| format!("{:.6}", s.median));
    for s in summaries {
        println!(
            "{:<14}{:>4}{:>8}{:>13}{:>13}{:>13}{:>8}{:>22}",
            s.method.to_string(),
            s.completed,
            s.failed,
            med(&s.err_pi),
            med(&s.err_mu),
            med(&s.err_sigma),
            s.iterations.map_or("-".to_string(), |i| format!("{:.0}", i.median)),
            format!("{:.3} ± {:.3}", s.wall_time_mean_s, s.wall_time_std_s)
        );
    }
}

fn bench(common: &Common) -> Result<()> {
    let mut config: BenchConfig = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            parse_bench_config(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => BenchConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let dir = out_dir(common, || PathBuf::from("bench"))?;
    let rows = benchmark_scaling(&config)?;
    println!("{:>5}{:>8}{:>16}{:>16}{:>12}", "d", "n", "implicit (s)", "explicit (s)", "ratio");
    for r in &rows {
        let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |v| format!("{v:.p$e}"));
        println!("{:>5}{:>8}{:>16.3e}{:>16}{:>12}", r.d, r.n, r.implicit_eval_s, opt(r.explicit_eval_s, 3), opt(r.ratio, 2));
    }
    write_bench_csv(&dir.join("bench.csv"), &rows)?;
    println!("wrote {}", dir.join("bench.csv").display());
    Ok(())
}

fn load_params(path: &Path) -> Result<MixtureParams> {
    let value: serde_json::Value = read_json(path)?;
    let params = match value.get("estimate") {
        Some(est) if !est.is_null() => serde_json::from_value(est.clone()),
        Some(_) => bail!("{}: run has no estimate", path.display()),
        None => serde_json::from_value(value),
    };
    params.with_context(|| format!("{}: not a parameter file", path.display()))
}

fn scatter(common: &Common, data_path: &Path, params: &[PathBuf], labels: Option<&Path>) -> Result<()> {
    let data = read_samples(data_path)?;
    let labels = labels.map(read_labels).transpose()?;
    let mut sets = Vec::with_capacity(params.len());
    for path in params {
        let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        sets.push((name, load_params(path)?));
    }
    let dir = out_dir(common, || PathBuf::from("scatter"))?;
    let rows = export_scatter(&data, &sets, labels.as_deref(), &dir)?;
    println!("wrote {} rows to {}", rows.len(), dir.join("scatter.csv").display());
    Ok(())
}
