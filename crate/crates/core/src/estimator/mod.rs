//! Multi-step MM / GMM / DGMM estimation.
//!
//! Each step recomputes the weighting at the previous iterate (constant for
//! MM, per-order scalars for DGMM, a full inverse covariance for GMM) and then
//! minimizes the weighted objective with L-BFGS, warm-started from the
//! previous iterate. The loop stops when the packed parameter vector moves by
//! less than `tol_theta` or after `max_steps` steps. The MM variants keep a
//! constant weighting, so their later steps are warm restarts of the solver.

pub mod explicit;
pub mod lbfgs;
pub mod objective;
pub mod weights;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use web_time::Instant;

use crate::error::{Error, Result};
use crate::kernel::{default_landmarks, exact_kernel_sums, nystrom_kernel_sums, KernelMode, KernelSumCache, NystromOptions};
use crate::model::{pack, unpack_slice, Layout, MixtureParams, SampleSet};

pub use explicit::{explicit_objective_gradient, gmm_full_weights, ExplicitMoments, ExplicitWeighting, GmmCache, GmmWeighting};
pub use lbfgs::{lbfgs_minimize, LbfgsOptions, LbfgsResult, LbfgsStatus};
pub use objective::{dgmm_objective_gradient, implicit_objective};
pub use weights::{dgmm_weights, direct_diag_weights_from_s, WeightVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    MmExplicit,
    MmImplicit,
    GmmExplicit,
    Dgmm,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::MmExplicit, Method::MmImplicit, Method::GmmExplicit, Method::Dgmm];

    pub fn name(self) -> &'static str {
        match self {
            Method::MmExplicit => "mm-explicit",
            Method::MmImplicit => "mm-implicit",
            Method::GmmExplicit => "gmm-explicit",
            Method::Dgmm => "dgmm",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (expected mm-explicit, mm-implicit, gmm-explicit or dgmm)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub method: Method,
    /// Highest moment order `L`.
    pub max_order: usize,
    /// Maximum number of estimation steps `T`.
    pub max_steps: usize,
    /// Stop when `|theta_t - theta_{t-1}| < tol_theta`.
    pub tol_theta: f64,
    /// Inner solver iteration cap `I`.
    pub max_iters: usize,
    /// Softmax temperature.
    pub tau: f64,
    pub kernel: KernelMode,
    /// Nyström landmarks; defaults to `min(N, 4 K C(R_max + L - 1, L))`.
    pub landmarks: Option<usize>,
    pub kernel_seed: u64,
    pub nystrom_jitter: f64,
    pub nystrom_tol: f64,
    pub memory: usize,
    pub c1: f64,
    pub c2: f64,
    pub grad_tol: f64,
    pub ftol: f64,
    /// Relative ridge added to the moment covariance before inversion (GMM).
    pub gmm_regularization: f64,
    /// Forces the DGMM weights instead of estimating them.
    pub fixed_weights: Option<Vec<f64>>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        let ls = LbfgsOptions::default();
        Self {
            method: Method::Dgmm,
            max_order: 3,
            max_steps: 10,
            tol_theta: 1e-4,
            max_iters: 200,
            tau: 1.0,
            kernel: KernelMode::Nystrom,
            landmarks: None,
            kernel_seed: 0,
            nystrom_jitter: 1e-10,
            nystrom_tol: 1e-10,
            memory: ls.memory,
            c1: ls.c1,
            c2: ls.c2,
            grad_tol: ls.grad_tol,
            ftol: ls.ftol,
            gmm_regularization: 1e-10,
            fixed_weights: None,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_order == 0 {
            return Err(Error::Config("max_order must be at least 1".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if !(self.tol_theta > 0.0) {
            return Err(Error::Config("tol_theta must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.memory == 0 {
            return Err(Error::Config("memory must be at least 1".into()));
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::Config("line search needs 0 < c1 < c2 < 1".into()));
        }
        if let Some(w) = &self.fixed_weights {
            if w.len() != self.max_order {
                return Err(Error::Config(format!("fixed_weights has {} entries, expected {}", w.len(), self.max_order)));
            }
            WeightVector::new(w.clone())?;
        }
        Ok(())
    }

    pub fn lbfgs_options(&self) -> LbfgsOptions {
        LbfgsOptions {
            memory: self.memory,
            c1: self.c1,
            c2: self.c2,
            max_iters: self.max_iters,
            grad_tol: self.grad_tol,
            ftol: self.ftol,
            ..LbfgsOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Per-order weights (MM and DGMM).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    /// Condition number of the regularized moment covariance (GMM).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition_number: Option<f64>,
    #[serde(default)]
    pub degenerate_weighting: bool,
    pub theta: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub solver_status: LbfgsStatus,
    pub step_norm: f64,
    pub wall_time_s: f64,
    /// Objective after each accepted inner step.
    pub objective_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Converged,
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationTrace {
    pub method: Method,
    pub steps: Vec<StepRecord>,
    pub termination: Termination,
    pub total_iterations: usize,
    /// Time spent on data-only precomputation (kernel sums or sample moments).
    pub setup_time_s: f64,
    pub wall_time_s: f64,
}

/// Data-only state needed by each method.
enum Backend {
    Implicit(KernelSumCache),
    Explicit(ExplicitMoments),
    Gmm(GmmCache),
}

/// Kernel sums as configured (exact or Nyström with the default landmark count).
pub fn build_kernel_cache(data: &SampleSet, config: &EstimatorConfig, components: usize, r_max: usize) -> Result<KernelSumCache> {
    match config.kernel {
        KernelMode::Exact => exact_kernel_sums(data, config.max_order),
        KernelMode::Nystrom => {
            let m =
                config.landmarks.unwrap_or_else(|| default_landmarks(data.len(), components, r_max, config.max_order)).clamp(1, data.len());
            let opts = NystromOptions { landmarks: m, seed: config.kernel_seed, jitter: config.nystrom_jitter, tol: config.nystrom_tol };
            nystrom_kernel_sums(data, config.max_order, &opts)
        }
    }
}

enum Weighting {
    PerOrder(WeightVector),
    Full(GmmWeighting),
}

/// Runs the configured method from `init`.
pub fn run_estimation(data: &SampleSet, config: &EstimatorConfig, init: &MixtureParams) -> Result<(MixtureParams, EstimationTrace)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptySample);
    }
    if data.dim() != init.dim() {
        return Err(Error::ShapeMismatch(format!("data dimension {} vs initialization dimension {}", data.dim(), init.dim())));
    }
    let start = Instant::now();
    let backend = match config.method {
        Method::MmImplicit | Method::Dgmm => Backend::Implicit(build_kernel_cache(data, config, init.components(), init.max_rank())?),
        Method::MmExplicit => Backend::Explicit(ExplicitMoments::new(data, config.max_order)?),
        Method::GmmExplicit => Backend::Gmm(GmmCache::new(data, config.max_order)?),
    };
    let setup_time_s = start.elapsed().as_secs_f64();
    let layout = Layout::of(init);
    let tau = config.tau;
    let opts = config.lbfgs_options();
    let mut theta = pack(init, tau)?.values;
    let mut current = init.clone();
    let mut steps = Vec::new();
    let mut termination = Termination::MaxSteps;

    for step in 1..=config.max_steps {
        let step_start = Instant::now();
        let weighting = match (&backend, config.method) {
            (Backend::Gmm(cache), _) => Weighting::Full(gmm_full_weights(&current, cache, config.gmm_regularization)?),
            (Backend::Implicit(cache), Method::Dgmm) => Weighting::PerOrder(match &config.fixed_weights {
                Some(w) => WeightVector::new(w.clone())?,
                None => dgmm_weights(&current, data, cache, config.max_order)?,
            }),
            _ => Weighting::PerOrder(WeightVector::ones(config.max_order)),
        };
        let evaluate = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let params = unpack_slice(x, layout, tau)?;
            let (value, grad) = match (&backend, &weighting) {
                (Backend::Implicit(cache), Weighting::PerOrder(w)) => implicit_objective(&params, w, data, cache)?,
                (Backend::Explicit(m), Weighting::PerOrder(w)) => {
                    explicit_objective_gradient(&params, m, ExplicitWeighting::PerOrder(w.as_slice()))?
                }
                (Backend::Gmm(c), Weighting::Full(w)) => {
                    explicit_objective_gradient(&params, &c.moments, ExplicitWeighting::Full(&w.matrix))?
                }
                _ => unreachable!("weighting always matches backend"),
            };
            Ok((value, grad.to_packed(params.weights(), tau)))
        };
        let (f0, _) = evaluate(&theta)?;
        if !f0.is_finite() {
            return Err(Error::NonFinite(format!("objective at the start of step {step}")));
        }
        let result = lbfgs_minimize(|x| evaluate(x).unwrap_or_else(|_| (f64::INFINITY, vec![f64::NAN; x.len()])), theta.clone(), &opts);
        let step_norm = result.x.iter().zip(&theta).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        theta = result.x;
        current = unpack_slice(&theta, layout, tau)?;
        let (weights, condition_number, degenerate_weighting) = match &weighting {
            Weighting::PerOrder(w) => (Some(w.as_slice().to_vec()), None, false),
            Weighting::Full(g) => (None, Some(g.condition_number), g.degenerate),
        };
        steps.push(StepRecord {
            step,
            weights,
            condition_number,
            degenerate_weighting,
            theta: theta.clone(),
            objective: result.f,
            iterations: result.iterations,
            evaluations: result.evaluations,
            solver_status: result.status,
            step_norm,
            wall_time_s: step_start.elapsed().as_secs_f64(),
            objective_history: result.history,
        });
        if step_norm < config.tol_theta {
            termination = Termination::Converged;
            break;
        }
    }
    let trace = EstimationTrace {
        method: config.method,
        total_iterations: steps.iter().map(|s| s.iterations).sum(),
        steps,
        termination,
        setup_time_s,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((current, trace))
}
