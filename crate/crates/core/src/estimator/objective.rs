//! Tensor-free weighted moment-matching objective.
//!
//! `Q = sum_k w_k |M^(k)(theta) - (1/N) sum_n y_n^{⊗k}|^2
//!    = sum_k w_k (alpha_k - (2/N) sum_n beta_{k,n} + t_k / N^2)`.

use crate::error::{Error, Result};
use crate::implicit::{alpha_with_gradients, weighted_beta_sum};
use crate::kernel::KernelSumCache;
use crate::model::{unpack, MixtureParams, PackedTheta, ParamGradient, SampleSet};

use super::weights::WeightVector;

/// `Q` and its gradient with respect to `(pi, mu, V)`.
pub fn implicit_objective(
    params: &MixtureParams,
    weights: &WeightVector,
    data: &SampleSet,
    cache: &KernelSumCache,
) -> Result<(f64, ParamGradient)> {
    let max_order = weights.max_order();
    if cache.max_order() < max_order || cache.len() != data.len() {
        return Err(Error::ShapeMismatch("kernel cache does not cover the data or moment order".into()));
    }
    let n = data.len() as f64;
    let ag = alpha_with_gradients(params, max_order)?;
    let mut coeffs = vec![0.0; max_order + 1];
    for k in 1..=max_order {
        coeffs[k] = weights.get(k);
    }
    let bs = weighted_beta_sum(params, data, &coeffs)?;
    let mut value = 0.0;
    let mut grad = ParamGradient::zeros_like(params);
    for k in 1..=max_order {
        let w = weights.get(k);
        value += w * (ag.values[k] - 2.0 / n * bs.sums[k] + cache.total(k) / (n * n));
        grad.add_scaled(&ag.gradients[k], w);
    }
    grad.add_scaled(&bs.gradient, -2.0 / n);
    if !value.is_finite() {
        return Err(Error::NonFinite("objective".into()));
    }
    Ok((value, grad))
}

/// `Q` and its gradient with respect to the packed vector (weights through the softmax).
pub fn dgmm_objective_gradient(
    theta: &PackedTheta,
    weights: &WeightVector,
    data: &SampleSet,
    cache: &KernelSumCache,
) -> Result<(f64, Vec<f64>)> {
    let params = unpack(theta)?;
    let (value, grad) = implicit_objective(&params, weights, data, cache)?;
    Ok((value, grad.to_packed(params.weights(), theta.tau)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::explicit::{explicit_objective_gradient, ExplicitMoments, ExplicitWeighting};
    use crate::kernel::exact_kernel_sums;
    use crate::model::{default_initialization, pack, sample_mixture, unpack_slice};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn exact_point_mass_fit() {
        let y = [0.3, -0.7];
        let p = MixtureParams::new(vec![1.0], vec![DVector::from_column_slice(&y)], vec![DMatrix::zeros(2, 1)]).unwrap();
        let data = SampleSet::from_rows(3, 2, [y, y, y].concat()).unwrap();
        let cache = exact_kernel_sums(&data, 3).unwrap();
        let (q, g) = implicit_objective(&p, &WeightVector::ones(3), &data, &cache).unwrap();
        assert!(q.abs() < 1e-14);
        assert!(g.centers[0].amax() < 1e-13);
    }

    #[test]
    fn unit_weights_match_explicit_objective() {
        let truth = default_initialization(2, 4, 2, 1).unwrap();
        let data = sample_mixture(&truth, 150, 3).unwrap();
        let p = default_initialization(2, 4, 2, 8).unwrap();
        let cache = exact_kernel_sums(&data, 3).unwrap();
        let (q, g) = implicit_objective(&p, &WeightVector::ones(3), &data, &cache).unwrap();
        let moments = ExplicitMoments::new(&data, 3).unwrap();
        let (qe, ge) = explicit_objective_gradient(&p, &moments, ExplicitWeighting::PerOrder(&[1.0; 3])).unwrap();
        assert_relative_eq!(q, qe, max_relative = 1e-10);
        for j in 0..2 {
            assert_relative_eq!(g.weights[j], ge.weights[j], max_relative = 1e-9);
            assert!((&g.centers[j] - &ge.centers[j]).amax() <= 1e-9 * ge.centers[j].amax().max(1.0));
            assert!((&g.factors[j] - &ge.factors[j]).amax() <= 1e-9 * ge.factors[j].amax().max(1.0));
        }
    }

    #[test]
    fn packed_gradient_matches_finite_differences() {
        let truth = default_initialization(2, 3, 2, 2).unwrap();
        let data = sample_mixture(&truth, 80, 4).unwrap();
        let cache = exact_kernel_sums(&data, 3).unwrap();
        let w = WeightVector::new(vec![1.0, 0.4, 0.1]).unwrap();
        let theta = pack(&default_initialization(2, 3, 2, 9).unwrap(), 1.0).unwrap();
        let (_, g) = dgmm_objective_gradient(&theta, &w, &data, &cache).unwrap();
        let layout = theta.layout();
        let scale = g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..layout.len() {
            let h = 1e-5;
            let mut x = theta.values.clone();
            x[i] += h;
            let up = implicit_objective(&unpack_slice(&x, layout, 1.0).unwrap(), &w, &data, &cache).unwrap().0;
            x[i] -= 2.0 * h;
            let dn = implicit_objective(&unpack_slice(&x, layout, 1.0).unwrap(), &w, &data, &cache).unwrap().0;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * scale, "coordinate {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn objective_is_label_invariant() {
        let truth = default_initialization(3, 3, 1, 2).unwrap();
        let data = sample_mixture(&truth, 60, 4).unwrap();
        let cache = exact_kernel_sums(&data, 2).unwrap();
        let p = default_initialization(3, 3, 1, 5).unwrap();
        let w = WeightVector::ones(2);
        let a = implicit_objective(&p, &w, &data, &cache).unwrap().0;
        let b = implicit_objective(&p.permuted(&[2, 0, 1]), &w, &data, &cache).unwrap().0;
        assert_relative_eq!(a, b, max_relative = 1e-12);
    }
}
