//! Relative estimation errors and component alignment.

use std::fmt;
use std::str::FromStr;

use itertools::Itertools;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MixtureParams;

/// Matrix norm used for `err_Sigma`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixNorm {
    #[default]
    Spectral,
    Frobenius,
}

impl MatrixNorm {
    pub fn of(self, m: &DMatrix<f64>) -> f64 {
        match self {
            MatrixNorm::Frobenius => m.norm(),
            // Arguments are symmetric, so the spectral norm is the largest |eigenvalue|.
            MatrixNorm::Spectral => m.clone().symmetric_eigenvalues().amax(),
        }
    }
}

impl fmt::Display for MatrixNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatrixNorm::Spectral => "spectral",
            MatrixNorm::Frobenius => "frobenius",
        })
    }
}

impl FromStr for MatrixNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectral" => Ok(MatrixNorm::Spectral),
            "frobenius" => Ok(MatrixNorm::Frobenius),
            _ => Err(Error::Config(format!("unknown matrix norm `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub err_pi: f64,
    pub err_mu: f64,
    pub err_sigma: f64,
}

fn check_shapes(est: &MixtureParams, truth: &MixtureParams) -> Result<()> {
    if est.components() != truth.components() || est.dim() != truth.dim() {
        return Err(Error::ShapeMismatch(format!(
            "estimate has K={}, d={}; truth has K={}, d={}",
            est.components(),
            est.dim(),
            truth.components(),
            truth.dim()
        )));
    }
    Ok(())
}

/// Averaged relative errors of already aligned components:
/// `|pi_j - pi*_j| / pi*_j`, `|mu_j - mu*_j| / |mu*_j|` and
/// `|Sigma_j - Sigma*_j| / |Sigma*_j|`, each averaged over `j`.
pub fn error_metrics(est: &MixtureParams, truth: &MixtureParams, norm: MatrixNorm) -> Result<ErrorMetrics> {
    check_shapes(est, truth)?;
    let k = truth.components() as f64;
    let (mut err_pi, mut err_mu, mut err_sigma) = (0.0, 0.0, 0.0);
    for j in 0..truth.components() {
        let pi = truth.weights()[j];
        let mu = truth.centers()[j].norm();
        let sigma_true = truth.covariance(j);
        let sigma = norm.of(&sigma_true);
        if !(pi > 0.0 && mu > 0.0 && sigma > 0.0) {
            return Err(Error::Domain(format!("ground-truth component {j} has a zero-norm parameter")));
        }
        err_pi += (est.weights()[j] - pi).abs() / pi;
        err_mu += (&est.centers()[j] - &truth.centers()[j]).norm() / mu;
        err_sigma += norm.of(&(est.covariance(j) - sigma_true)) / sigma;
    }
    Ok(ErrorMetrics { err_pi: err_pi / k, err_mu: err_mu / k, err_sigma: err_sigma / k })
}

/// `perm[j]` is the estimated component matched to true component `j`.
///
/// Minimizes the summed relative center error over all `K!` matchings; ties
/// go to the smaller summed covariance error, then to the lexicographically
/// first permutation.
pub fn align_components(est: &MixtureParams, truth: &MixtureParams) -> Result<Vec<usize>> {
    check_shapes(est, truth)?;
    let k = truth.components();
    if k > 10 {
        return Err(Error::GuardExceeded(format!("exhaustive alignment supports K <= 10, got {k}")));
    }
    let tiny = f64::MIN_POSITIVE;
    let center_cost = DMatrix::from_fn(k, k, |j, i| (&est.centers()[i] - &truth.centers()[j]).norm() / truth.centers()[j].norm().max(tiny));
    let truth_cov: Vec<_> = (0..k).map(|j| truth.covariance(j)).collect();
    let cov_cost =
        DMatrix::from_fn(k, k, |j, i| MatrixNorm::Frobenius.of(&(est.covariance(i) - &truth_cov[j])) / truth_cov[j].norm().max(tiny));
    let tied = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs());
    let mut best: Option<(f64, f64, Vec<usize>)> = None;
    for perm in (0..k).permutations(k) {
        let c: f64 = perm.iter().enumerate().map(|(j, &i)| center_cost[(j, i)]).sum();
        let s: f64 = perm.iter().enumerate().map(|(j, &i)| cov_cost[(j, i)]).sum();
        let better = match &best {
            None => true,
            Some((bc, bs, _)) => (c < *bc && !tied(c, *bc)) || (tied(c, *bc) && s < *bs && !tied(s, *bs)),
        };
        if better {
            best = Some((c, s, perm));
        }
    }
    Ok(best.map(|b| b.2).unwrap_or_default())
}

/// Aligns `est` to `truth` and returns the aligned estimate with its errors.
pub fn aligned_error_metrics(est: &MixtureParams, truth: &MixtureParams, norm: MatrixNorm) -> Result<(MixtureParams, ErrorMetrics)> {
    let perm = align_components(est, truth)?;
    let aligned = est.permuted(&perm);
    let metrics = error_metrics(&aligned, truth, norm)?;
    Ok((aligned, metrics))
}
