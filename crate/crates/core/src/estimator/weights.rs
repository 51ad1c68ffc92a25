//! Per-order diagonal weights.
//!
//! The optimal-within-diagonal weight of order `k` pools the moment covariance
//! `S = (1/N) sum_n g_n g_n^T` over the order-`k` index block `I_k`:
//!
//! `w_k = sum_{i in I_k} S_ii / sum_{i in I_k} sum_j S_ij^2`.
//!
//! With `<g_k(y_n), g_k(y_n')> = alpha_k - beta_{k,n} - beta_{k,n'} + gamma_{k,n,n'}`
//! and `gamma_{k,n,n'} = <y_n, y_n'>^k`, both sums become scalar expressions in
//! `alpha`, `beta` and kernel row sums; see [`dgmm_weights`].

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::implicit::{alpha, beta_table};
use crate::kernel::KernelSumCache;
use crate::model::{MixtureParams, SampleSet};

/// `[w_1, ..., w_L]`, all strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidParams("weight vector is empty".into()));
        }
        if let Some(bad) = w.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidParams(format!("weights must be positive and finite, got {bad}")));
        }
        Ok(Self(w))
    }

    pub fn ones(max_order: usize) -> Self {
        Self(vec![1.0; max_order])
    }

    pub fn max_order(&self) -> usize {
        self.0.len()
    }

    /// Weight of order `k` (1-based).
    pub fn get(&self, k: usize) -> f64 {
        self.0[k - 1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

/// Weights straight from an assembled `q x q` moment covariance.
pub fn direct_diag_weights_from_s(s: &DMatrix<f64>, d: usize, max_order: usize) -> Result<WeightVector> {
    let q = crate::tensor::stacked_len(d, max_order);
    if s.shape() != (q, q) {
        return Err(Error::ShapeMismatch(format!("expected {q}x{q}, got {:?}", s.shape())));
    }
    let mut out = Vec::with_capacity(max_order);
    let mut start = 0;
    for k in 1..=max_order {
        let len = d.pow(k as u32);
        let block = start..start + len;
        let diag: f64 = block.clone().map(|i| s[(i, i)]).sum();
        let rows: f64 = block.map(|i| s.row(i).iter().map(|v| v * v).sum::<f64>()).sum();
        if !(rows > 0.0) {
            return Err(Error::DegenerateData(format!("order-{k} block of S is zero")));
        }
        out.push(diag / rows);
        start += len;
    }
    WeightVector::new(out)
}

/// DGMM weights at `params` without forming `S`.
///
/// Numerator: `N sum_n (alpha_k - 2 beta_{k,n} + |y_n|^{2k})`.
///
/// Denominator: `sum_{k'} sum_{n,n'} A_{nn'} B_{nn'}` with
/// `A = alpha_k - b_n - b_n' + gamma_k` and `B = alpha_k' - c_n - c_n' + gamma_k'`
/// (`b = beta_k`, `c = beta_k'`). Multiplying out, with `s_k` the kernel row
/// sums, `t_k` their totals and `Sb = sum_n b_n`, `Sc = sum_n c_n`:
///
/// ```text
///   alpha_k alpha_k' N^2           (alpha alpha)
/// - 2 N alpha_k Sc                 (alpha, -c_n - c_n')
/// + alpha_k t_k'                   (alpha, gamma')
/// - 2 N alpha_k' Sb                (-b_n - b_n', alpha')
/// + 2 N <b, c> + 2 Sb Sc           (-b_n - b_n', -c_n - c_n')
/// - 2 <b, s_k'>                    (-b_n - b_n', gamma')
/// + alpha_k' t_k                   (gamma, alpha')
/// - 2 <c, s_k>                     (gamma, -c_n - c_n')
/// + t_{k+k'}                       (gamma gamma' = <y_n, y_n'>^{k+k'})
/// ```
///
/// so the cache must reach order `2L`. Cost `O(N K d R L + N L^2)`.
pub fn dgmm_weights(params: &MixtureParams, data: &SampleSet, cache: &KernelSumCache, max_order: usize) -> Result<WeightVector> {
    if cache.max_order() < max_order {
        return Err(Error::Domain(format!("kernel cache covers L={}, need {max_order}", cache.max_order())));
    }
    if cache.len() != data.len() {
        return Err(Error::ShapeMismatch("kernel cache and data sizes differ".into()));
    }
    let n = data.len() as f64;
    let a = alpha(params, max_order)?;
    let table = beta_table(params, data, max_order)?;
    let b: Vec<Vec<f64>> = (0..=max_order).map(|k| table.column(k)).collect();
    let sb = table.column_sums();
    let inner = |x: &[f64], y: &[f64]| -> f64 { x.iter().zip(y).map(|(u, v)| u * v).sum() };
    let mut out = Vec::with_capacity(max_order);
    for k in 1..=max_order {
        let diag_sum: f64 = cache.diag(k).iter().sum();
        let num = n * (n * a[k] - 2.0 * sb[k] + diag_sum);
        let mut den = 0.0;
        for kp in 1..=max_order {
            den += n * n * a[k] * a[kp] - 2.0 * n * a[k] * sb[kp] + a[k] * cache.total(kp) - 2.0 * n * a[kp] * sb[k]
                + a[kp] * cache.total(k)
                + 2.0 * n * inner(&b[k], &b[kp])
                + 2.0 * sb[k] * sb[kp]
                - 2.0 * inner(&b[k], cache.sums(kp))
                - 2.0 * inner(&b[kp], cache.sums(k))
                + cache.total(k + kp);
        }
        if !(den > 0.0 && den.is_finite()) {
            return Err(Error::DegenerateData(format!("order-{k} weight denominator is {den}")));
        }
        if !(num > 0.0 && num.is_finite()) {
            return Err(Error::DegenerateData(format!("order-{k} weight numerator is {num}")));
        }
        out.push(num / den);
    }
    WeightVector::new(out)
}
