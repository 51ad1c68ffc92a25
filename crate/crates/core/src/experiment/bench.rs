//! Per-evaluation timing of the implicit and explicit objective paths.

use std::path::Path;

use serde::{Deserialize, Serialize};
use web_time::Instant;

use crate::error::{Error, Result};
use crate::estimator::{explicit_objective_gradient, implicit_objective, ExplicitMoments, ExplicitWeighting, WeightVector};
use crate::kernel::{default_landmarks, nystrom_kernel_sums, NystromOptions};
use crate::model::{default_initialization, generate_ground_truth, sample_mixture, GroundTruthSpec, MixtureParams, RankMode, SampleSet};
use crate::tensor::MAX_ENTRIES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub dims: Vec<usize>,
    pub n: usize,
    pub k: usize,
    pub r_max: usize,
    pub max_order: usize,
    pub seed: u64,
    /// Lower bound on the measured time per batch.
    pub min_batch_s: f64,
    /// Also time the explicit path where the tensor guard admits it.
    pub explicit: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { dims: vec![4, 8, 16, 32], n: 5000, k: 2, r_max: 2, max_order: 3, seed: 0, min_batch_s: 0.05, explicit: true }
    }
}

pub fn parse_bench_config(text: &str) -> Result<BenchConfig> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub d: usize,
    pub n: usize,
    /// Seconds per implicit objective-and-gradient evaluation.
    pub implicit_eval_s: f64,
    /// Seconds per explicit evaluation (sample moments precomputed).
    pub explicit_eval_s: Option<f64>,
    /// One-time sample-moment tensor construction.
    pub explicit_setup_s: Option<f64>,
    /// `explicit_eval_s / implicit_eval_s`
    pub ratio: Option<f64>,
}

/// Seconds per call: the fastest of three batches, each long enough to exceed `min_batch_s`.
pub fn time_per_call<F: FnMut()>(mut f: F, min_batch_s: f64) -> f64 {
    f();
    let mut reps = 1usize;
    loop {
        let start = Instant::now();
        for _ in 0..reps {
            f();
        }
        let elapsed = start.elapsed().as_secs_f64();
        if elapsed >= min_batch_s || reps >= 1 << 20 {
            let mut best = elapsed / reps as f64;
            for _ in 0..2 {
                let start = Instant::now();
                for _ in 0..reps {
                    f();
                }
                best = best.min(start.elapsed().as_secs_f64() / reps as f64);
            }
            return best;
        }
        reps *= 2;
    }
}

/// Data and a parameter point for timing at dimension `d`.
pub fn bench_instance(cfg: &BenchConfig, d: usize, n: usize) -> Result<(SampleSet, MixtureParams)> {
    let truth = generate_ground_truth(&GroundTruthSpec {
        k: cfg.k,
        d,
        r_max: cfg.r_max,
        rank_mode: RankMode::Identical,
        lambda_min: 25.0,
        lambda_max: 100.0,
        weights: None,
        seed: cfg.seed,
    })?;
    let data = sample_mixture(&truth, n, cfg.seed.wrapping_add(1))?;
    let theta = default_initialization(cfg.k, d, cfg.r_max, cfg.seed.wrapping_add(2))?;
    Ok((data, theta))
}

/// Seconds per implicit evaluation at `(d, n)`.
pub fn time_implicit(cfg: &BenchConfig, d: usize, n: usize) -> Result<f64> {
    let (data, theta) = bench_instance(cfg, d, n)?;
    let m = default_landmarks(n, cfg.k, cfg.r_max, cfg.max_order);
    let cache = nystrom_kernel_sums(&data, cfg.max_order, &NystromOptions::new(m, cfg.seed))?;
    let w = WeightVector::ones(cfg.max_order);
    implicit_objective(&theta, &w, &data, &cache)?;
    Ok(time_per_call(
        || {
            let _ = std::hint::black_box(implicit_objective(&theta, &w, &data, &cache));
        },
        cfg.min_batch_s,
    ))
}

pub fn benchmark_scaling(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.dims.is_empty() || cfg.n == 0 || cfg.k == 0 || cfg.max_order == 0 {
        return Err(Error::Config("bench needs dims, n, k and max_order".into()));
    }
    let mut rows = Vec::with_capacity(cfg.dims.len());
    for &d in &cfg.dims {
        if cfg.r_max > d {
            return Err(Error::Config(format!("r_max = {} exceeds d = {d}", cfg.r_max)));
        }
        let implicit_eval_s = time_implicit(cfg, d, cfg.n)?;
        let admits = d.checked_pow(cfg.max_order as u32).is_some_and(|e| e <= MAX_ENTRIES);
        let (explicit_eval_s, explicit_setup_s) = if cfg.explicit && admits {
            let (data, theta) = bench_instance(cfg, d, cfg.n)?;
            let start = Instant::now();
            let moments = ExplicitMoments::new(&data, cfg.max_order)?;
            let setup = start.elapsed().as_secs_f64();
            let w = vec![1.0; cfg.max_order];
            explicit_objective_gradient(&theta, &moments, ExplicitWeighting::PerOrder(&w))?;
            let t = time_per_call(
                || {
                    let _ = std::hint::black_box(explicit_objective_gradient(&theta, &moments, ExplicitWeighting::PerOrder(&w)));
                },
                cfg.min_batch_s,
            );
            (Some(t), Some(setup))
        } else {
            (None, None)
        };
        rows.push(BenchRow {
            d,
            n: cfg.n,
            implicit_eval_s,
            explicit_eval_s,
            explicit_setup_s,
            ratio: explicit_eval_s.map(|e| e / implicit_eval_s),
        });
    }
    Ok(rows)
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let io = |e: csv::Error| Error::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn read_bench_csv(path: &Path) -> Result<Vec<BenchRow>> {
    let io = |e: csv::Error| Error::Io(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(io)?;
    r.deserialize().map(|row| row.map_err(io)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_dimension_gives_one_row() {
        let cfg = BenchConfig { dims: vec![3], n: 200, min_batch_s: 0.001, ..Default::default() };
        let rows = benchmark_scaling(&cfg).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].implicit_eval_s > 0.0 && rows[0].explicit_eval_s.unwrap() > 0.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.csv");
        write_bench_csv(&path, &rows).unwrap();
        assert_eq!(read_bench_csv(&path).unwrap(), rows);
    }

    #[test]
    fn explicit_path_can_be_disabled() {
        let cfg = BenchConfig { dims: vec![3], n: 50, max_order: 2, explicit: false, min_batch_s: 0.001, ..Default::default() };
        let rows = benchmark_scaling(&cfg).unwrap();
        assert!(rows[0].explicit_eval_s.is_none() && rows[0].ratio.is_none());
    }

    #[test]
    fn rejects_empty_dims() {
        assert!(benchmark_scaling(&BenchConfig { dims: vec![], ..Default::default() }).is_err());
    }
}
