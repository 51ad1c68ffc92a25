//! WebAssembly entry points for the static demo page in `www/`.
//!
//! Each export takes plain numbers and returns an SVG or JSON string. The
//! same functions without the `js_` prefix are usable from Rust.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use dgmm_core::estimator::{run_estimation, EstimatorConfig, Method};
use dgmm_core::experiment::export::{scatter_rows, scatter_svg};
use dgmm_core::experiment::{aligned_error_metrics, initialization, median, ErrorMetrics, MatrixNorm};
use dgmm_core::kernel::{exact_kernel_sums, nystrom_kernel_sums, relative_error, NystromOptions};
use dgmm_core::model::{generate_ground_truth, sample_mixture_labeled, GroundTruthSpec, MixtureParams, RankMode, SampleSet};
use dgmm_core::rng::derive_seed;

const MAX_POINTS: usize = 2000;
/// Exact kernel sums are `O(N^2)`; the curve is capped well below that guard.
const MAX_CURVE_N: usize = 3000;

/// Mixture size and seed shared by all demo operations.
#[derive(Debug, Clone, Copy)]
pub struct Setup {
    pub k: usize,
    pub d: usize,
    pub r_max: usize,
    pub n: usize,
    pub seed: u64,
}

struct Instance {
    truth: MixtureParams,
    data: SampleSet,
    labels: Vec<usize>,
}

fn instance(s: Setup) -> Result<Instance, String> {
    let truth = generate_ground_truth(&GroundTruthSpec {
        k: s.k,
        d: s.d,
        r_max: s.r_max,
        rank_mode: RankMode::Identical,
        lambda_min: 25.0,
        lambda_max: 100.0,
        weights: None,
        seed: derive_seed(s.seed, 1),
    })
    .map_err(|e| e.to_string())?;
    let (data, labels) = sample_mixture_labeled(&truth, s.n, derive_seed(s.seed, 2)).map_err(|e| e.to_string())?;
    Ok(Instance { truth, data, labels })
}

fn svg(data: &SampleSet, sets: &[(String, MixtureParams)], labels: &[usize]) -> Result<String, String> {
    let rows = scatter_rows(data, sets, Some(labels)).map_err(|e| e.to_string())?;
    Ok(scatter_svg(&rows, MAX_POINTS))
}

/// Samples projected on the first two coordinates with the true 2-sigma ellipses.
pub fn scatter(s: Setup) -> Result<String, String> {
    let inst = instance(s)?;
    svg(&inst.data, &[("truth".into(), inst.truth)], &inst.labels)
}

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub method: String,
    pub metrics: ErrorMetrics,
    pub steps: usize,
    pub iterations: usize,
    pub objective: f64,
    pub weights: Option<Vec<f64>>,
    pub wall_time_s: f64,
    pub svg: String,
}

/// Fits `method` from the shared random initialization and overlays the
/// aligned estimate on the truth.
pub fn fit(s: Setup, method: &str, max_steps: usize, max_iters: usize) -> Result<FitReport, String> {
    let method: Method = method.parse().map_err(|e: dgmm_core::Error| e.to_string())?;
    let inst = instance(s)?;
    let init = initialization(s.k, s.d, s.r_max, s.seed).map_err(|e| e.to_string())?;
    let config = EstimatorConfig { method, max_steps, max_iters, kernel_seed: derive_seed(s.seed, 4), ..Default::default() };
    config.validate().map_err(|e| e.to_string())?;
    let (est, trace) = run_estimation(&inst.data, &config, &init).map_err(|e| e.to_string())?;
    let (aligned, metrics) = aligned_error_metrics(&est, &inst.truth, MatrixNorm::Spectral).map_err(|e| e.to_string())?;
    let last = trace.steps.last();
    let sets = [("truth".to_string(), inst.truth), ("init".to_string(), init), (method.to_string(), aligned)];
    Ok(FitReport {
        method: method.to_string(),
        metrics,
        steps: trace.steps.len(),
        iterations: trace.total_iterations,
        objective: last.map_or(f64::NAN, |l| l.objective),
        weights: last.and_then(|l| l.weights.clone()),
        wall_time_s: trace.wall_time_s,
        svg: svg(&inst.data, &sets, &inst.labels)?,
    })
}

#[derive(Debug, Serialize)]
pub struct CurvePoint {
    pub landmarks: usize,
    /// Median relative error of the order-`k` row sums, one entry per order.
    pub median_error: Vec<f64>,
}

/// Median Nyström row-sum error against exact sums for each landmark count,
/// over `repeats` landmark seeds, for orders `1..=2 * max_order`.
pub fn nystrom_curve(s: Setup, max_order: usize, landmarks: &[usize], repeats: usize) -> Result<Vec<CurvePoint>, String> {
    if s.n > MAX_CURVE_N {
        return Err(format!("the error curve needs exact sums; use n <= {MAX_CURVE_N}"));
    }
    if repeats == 0 || landmarks.is_empty() {
        return Err("need at least one landmark count and one repeat".into());
    }
    let inst = instance(s)?;
    let exact = exact_kernel_sums(&inst.data, max_order).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(landmarks.len());
    for &m in landmarks {
        if m == 0 || m > s.n {
            return Err(format!("landmark count {m} must lie in 1..={}", s.n));
        }
        let mut errs = vec![Vec::with_capacity(repeats); 2 * max_order];
        for rep in 0..repeats {
            let opts = NystromOptions::new(m, derive_seed(s.seed, 100 + rep as u64));
            let approx = nystrom_kernel_sums(&inst.data, max_order, &opts).map_err(|e| e.to_string())?;
            for (k, e) in errs.iter_mut().enumerate() {
                e.push(relative_error(approx.sums(k + 1), exact.sums(k + 1)));
            }
        }
        out.push(CurvePoint { landmarks: m, median_error: errs.iter().map(|e| median(e).unwrap_or(f64::NAN)).collect() });
    }
    Ok(out)
}

fn js<T>(r: Result<T, String>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

fn setup(k: u32, d: u32, r_max: u32, n: u32, seed: u32) -> Setup {
    Setup { k: k as usize, d: d as usize, r_max: r_max as usize, n: n as usize, seed: seed as u64 }
}

#[wasm_bindgen(js_name = scatter)]
pub fn js_scatter(k: u32, d: u32, r_max: u32, n: u32, seed: u32) -> Result<String, JsError> {
    js(scatter(setup(k, d, r_max, n, seed)))
}

/// JSON-encoded [`FitReport`].
#[allow(clippy::too_many_arguments)]
#[wasm_bindgen(js_name = fit)]
pub fn js_fit(k: u32, d: u32, r_max: u32, n: u32, seed: u32, method: &str, max_steps: u32, max_iters: u32) -> Result<String, JsError> {
    js(fit(setup(k, d, r_max, n, seed), method, max_steps as usize, max_iters as usize).and_then(|r| to_json(&r)))
}

/// JSON-encoded list of [`CurvePoint`].
#[allow(clippy::too_many_arguments)]
#[wasm_bindgen(js_name = nystromCurve)]
pub fn js_nystrom_curve(
    k: u32,
    d: u32,
    r_max: u32,
    n: u32,
    seed: u32,
    max_order: u32,
    landmarks: Vec<u32>,
    repeats: u32,
) -> Result<String, JsError> {
    let m: Vec<usize> = landmarks.into_iter().map(|v| v as usize).collect();
    js(nystrom_curve(setup(k, d, r_max, n, seed), max_order as usize, &m, repeats as usize).and_then(|r| to_json(&r)))
}
