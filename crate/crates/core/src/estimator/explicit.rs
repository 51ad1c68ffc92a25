//! Explicit-tensor baselines: MM with dense moment tensors and full-matrix GMM.
//!
//! The objective is `r^T W r` with `r` the stacked residual `M(theta) - M_hat`.
//! For symmetric `R`, `<R, Sym X> = <R, X>`, so each population moment term
//! `<R, Sym(mu^{⊗a} ⊗ Sigma^{⊗l})>` can be differentiated by contracting `R`
//! against `mu` and `Sigma` without ever symmetrizing the derivative.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::{MixtureParams, ParamGradient, SampleSet};
use crate::par;
use crate::tensor::{moment_coefficient, moment_function_g_with, population_moments, sample_moment_tensor, stacked_len, sym, DenseTensor};

/// Largest stacked moment dimension `q` for the full-matrix GMM (`q^2` storage).
pub const GMM_GUARD: usize = 1500;

/// Sample moment tensors `(1/N) sum_n y_n^{⊗k}`, `k = 1..=L`.
#[derive(Debug, Clone)]
pub struct ExplicitMoments {
    pub sample: Vec<DenseTensor>,
}

impl ExplicitMoments {
    pub fn new(data: &SampleSet, max_order: usize) -> Result<Self> {
        if max_order == 0 {
            return Err(Error::Domain("moment order must be at least 1".into()));
        }
        let sample = (1..=max_order).map(|k| sample_moment_tensor(data, k)).collect::<Result<_>>()?;
        Ok(Self { sample })
    }

    pub fn max_order(&self) -> usize {
        self.sample.len()
    }

    pub fn dim(&self) -> usize {
        self.sample[0].dim()
    }

    /// Stacked `[vec(M_hat_1); ...; vec(M_hat_L)]`.
    pub fn stacked(&self) -> Vec<f64> {
        self.sample.iter().flat_map(|t| t.as_slice().iter().copied()).collect()
    }
}

/// How residual blocks are weighted.
#[derive(Debug, Clone, Copy)]
pub enum ExplicitWeighting<'a> {
    /// `sum_k w_k |r_k|^2`
    PerOrder(&'a [f64]),
    /// `r^T W r`
    Full(&'a DMatrix<f64>),
}

/// Objective value and gradient of the explicit moment-matching objective.
pub fn explicit_objective_gradient(
    params: &MixtureParams,
    moments: &ExplicitMoments,
    weighting: ExplicitWeighting<'_>,
) -> Result<(f64, ParamGradient)> {
    let max_order = moments.max_order();
    if params.dim() != moments.dim() {
        return Err(Error::ShapeMismatch("parameter and data dimensions differ".into()));
    }
    let pop = population_moments(params, max_order)?;
    let resid: Vec<Vec<f64>> =
        pop.iter().zip(&moments.sample).map(|(m, s)| m.as_slice().iter().zip(s.as_slice()).map(|(a, b)| a - b).collect()).collect();
    let d = params.dim();
    let (value, weighted): (f64, Vec<DenseTensor>) = match weighting {
        ExplicitWeighting::PerOrder(w) => {
            if w.len() != max_order {
                return Err(Error::ShapeMismatch(format!("{} weights for L={max_order}", w.len())));
            }
            let value = resid.iter().zip(w).map(|(r, wk)| wk * r.iter().map(|v| v * v).sum::<f64>()).sum();
            let weighted = resid
                .iter()
                .zip(w)
                .enumerate()
                .map(|(i, (r, wk))| DenseTensor::from_vec(i + 1, d, r.iter().map(|v| wk * v).collect()))
                .collect::<Result<_>>()?;
            (value, weighted)
        }
        ExplicitWeighting::Full(wm) => {
            let stacked: Vec<f64> = resid.concat();
            if wm.shape() != (stacked.len(), stacked.len()) {
                return Err(Error::ShapeMismatch("weighting matrix does not match q".into()));
            }
            let r = DVector::from_vec(stacked);
            let wr = wm * &r;
            let value = r.dot(&wr);
            let mut weighted = Vec::with_capacity(max_order);
            let mut start = 0;
            for k in 1..=max_order {
                let len = d.pow(k as u32);
                let block = DenseTensor::from_vec(k, d, wr.as_slice()[start..start + len].to_vec())?;
                weighted.push(sym(&block)?);
                start += len;
            }
            (value, weighted)
        }
    };
    let mut grad = ParamGradient::zeros_like(params);
    for (i, rk) in weighted.iter().enumerate() {
        accumulate_moment_gradient(params, rk, i + 1, 2.0, &mut grad);
    }
    Ok((value, grad))
}

/// Adds `scale * grad <R, M_k(theta)>` for symmetric `R` of order `k`.
fn accumulate_moment_gradient(params: &MixtureParams, r: &DenseTensor, k: usize, scale: f64, grad: &mut ParamGradient) {
    for j in 0..params.components() {
        let mu = params.centers()[j].as_slice();
        let sigma = params.covariance(j);
        let pij = params.weights()[j];
        // by_sigma[l] = R contracted with Sigma l times from the tail
        let mut by_sigma = vec![r.clone()];
        for l in 1..=k / 2 {
            by_sigma.push(by_sigma[l - 1].contract_matrix_tail(&sigma));
        }
        for l in 0..=k / 2 {
            let a = k - 2 * l;
            let c = moment_coefficient(k, l);
            // contract mu (a - 1) times, keep one index for the center gradient
            let mut t = by_sigma[l].clone();
            for _ in 0..a.saturating_sub(1) {
                t = t.contract_vector_tail(mu);
            }
            if a >= 1 {
                let full = t.contract_vector_tail(mu).as_slice()[0];
                grad.weights[j] += scale * c * full;
                let g_mu = DVector::from_column_slice(t.as_slice());
                grad.centers[j].axpy(scale * pij * c * a as f64, &g_mu, 1.0);
            } else {
                grad.weights[j] += scale * c * t.as_slice()[0];
            }
            if l >= 1 {
                let mut u = by_sigma[l - 1].clone();
                for _ in 0..a {
                    u = u.contract_vector_tail(mu);
                }
                let g_sigma = u.to_matrix();
                let g_v = (&g_sigma + g_sigma.transpose()) * &params.factors()[j];
                grad.factors[j].zip_apply(&g_v, |x, y| *x += scale * pij * c * l as f64 * y);
            }
        }
    }
}

/// `(1/N) sum_n g_n g_n^T` built sample by sample from the moment function.
pub fn moment_covariance_naive(params: &MixtureParams, data: &SampleSet, max_order: usize) -> Result<DMatrix<f64>> {
    let q = stacked_len(params.dim(), max_order);
    if q > GMM_GUARD {
        return Err(Error::GuardExceeded(format!("q = {q} exceeds {GMM_GUARD}")));
    }
    let moments = population_moments(params, max_order)?;
    let mut s = DMatrix::zeros(q, q);
    for y in data.rows() {
        let g = DVector::from_vec(moment_function_g_with(&moments, y)?);
        s.ger(1.0, &g, &g, 1.0);
    }
    Ok(s / data.len() as f64)
}

/// Data-only pieces of `S = M M^T - M Ybar^T - Ybar M^T + (1/N) sum_n Y_n Y_n^T`,
/// with `Y_n` the stacked `y_n^{⊗k}`. The second-moment matrix is assembled
/// once over distinct monomials and expanded by index lookup.
#[derive(Debug, Clone)]
pub struct GmmCache {
    pub moments: ExplicitMoments,
    mean: DVector<f64>,
    second: DMatrix<f64>,
}

impl GmmCache {
    pub fn new(data: &SampleSet, max_order: usize) -> Result<Self> {
        let d = data.dim();
        let q = stacked_len(d, max_order);
        if q > GMM_GUARD {
            return Err(Error::GuardExceeded(format!("full weighting matrix needs q <= {GMM_GUARD}, got q = {q}")));
        }
        let moments = ExplicitMoments::new(data, max_order)?;
        let (monomials, index) = monomial_index(d, max_order);
        let u = monomials.len();
        let parts = par::map_chunks(data.len(), par::CHUNK, |range| {
            let feats = DMatrix::from_fn(range.len(), u, |r, c| monomials[c].iter().map(|&i| data.row(range.start + r)[i]).product());
            feats.tr_mul(&feats)
        });
        let mut compact = DMatrix::zeros(u, u);
        for p in parts {
            compact += p;
        }
        compact /= data.len() as f64;
        let second = DMatrix::from_fn(q, q, |a, b| compact[(index[a], index[b])]);
        Ok(Self { mean: DVector::from_vec(moments.stacked()), moments, second })
    }

    pub fn q(&self) -> usize {
        self.mean.len()
    }

    /// Moment covariance at `params`.
    pub fn covariance(&self, params: &MixtureParams) -> Result<DMatrix<f64>> {
        let pop = population_moments(params, self.moments.max_order())?;
        let m = DVector::from_vec(pop.iter().flat_map(|t| t.as_slice().iter().copied()).collect());
        let mut s = self.second.clone();
        s.ger(1.0, &m, &m, 1.0);
        s.ger(-1.0, &m, &self.mean, 1.0);
        s.ger(-1.0, &self.mean, &m, 1.0);
        Ok((&s + s.transpose()) * 0.5)
    }
}

/// Distinct monomials (sorted multi-indices) of degrees `1..=L`, and for each
/// stacked flat index the position of its monomial.
fn monomial_index(d: usize, max_order: usize) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut monomials: Vec<Vec<usize>> = Vec::new();
    let mut lookup = std::collections::HashMap::new();
    let mut index = Vec::with_capacity(stacked_len(d, max_order));
    for k in 1..=max_order {
        let total = d.pow(k as u32);
        for flat in 0..total {
            let mut key = Vec::with_capacity(k);
            let mut rem = flat;
            for _ in 0..k {
                key.push(rem % d);
                rem /= d;
            }
            key.sort_unstable();
            let id = *lookup.entry(key.clone()).or_insert_with(|| {
                monomials.push(key);
                monomials.len() - 1
            });
            index.push(id);
        }
    }
    (monomials, index)
}

/// Full GMM weighting matrix and diagnostics.
#[derive(Debug, Clone)]
pub struct GmmWeighting {
    pub matrix: DMatrix<f64>,
    pub condition_number: f64,
    /// `S` had zero trace, so the regularized inverse is a scaled identity.
    pub degenerate: bool,
}

/// `(S + reg * tr(S)/q * I)^{-1}` at `params`.
pub fn gmm_full_weights(params: &MixtureParams, cache: &GmmCache, regularization: f64) -> Result<GmmWeighting> {
    let s = cache.covariance(params)?;
    regularized_inverse(s, regularization, cache.second.trace())
}

/// `reference` is the scale below which the trace of `s` counts as zero
/// (relative to `1e-14 * reference`).
fn regularized_inverse(mut s: DMatrix<f64>, regularization: f64, reference: f64) -> Result<GmmWeighting> {
    let q = s.nrows();
    let trace = s.trace();
    let degenerate = !(trace > 1e-14 * reference);
    let shift = if degenerate { regularization } else { regularization * trace / q as f64 };
    for i in 0..q {
        s[(i, i)] += shift;
    }
    let eig = SymmetricEigen::new(s.clone());
    let (lo, hi) = eig.eigenvalues.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v.abs())));
    let condition_number = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    let chol = s.cholesky().ok_or_else(|| {
        Error::Factorization(format!("regularized moment covariance is not positive definite (cond {condition_number:e})"))
    })?;
    Ok(GmmWeighting { matrix: chol.inverse(), condition_number, degenerate })
}
