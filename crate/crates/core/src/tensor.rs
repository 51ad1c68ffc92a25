//! Explicit dense tensors.
//!
//! This is the brute-force route: it stores all `d^k` entries of an order-`k`
//! tensor and is used both as the oracle for the implicit computations and as
//! the backend of the explicit MM/GMM baselines. Entries are laid out row-major,
//! `index(i_1..i_k) = sum_j i_j d^(k-j)`, and `vec()` of a tensor is that flat
//! storage.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{MixtureParams, SampleSet};
use crate::par;

/// Highest order accepted by [`sym`] (permutation enumeration is `k!`).
pub const MAX_ORDER: usize = 6;
/// Largest number of entries a dense tensor may hold.
pub const MAX_ENTRIES: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    order: usize,
    dim: usize,
    data: Vec<f64>,
}

fn entries(order: usize, dim: usize) -> Result<usize> {
    let mut n: usize = 1;
    for _ in 0..order {
        n = n
            .checked_mul(dim)
            .filter(|&n| n <= MAX_ENTRIES)
            .ok_or_else(|| Error::GuardExceeded(format!("{dim}^{order} entries exceed {MAX_ENTRIES}")))?;
    }
    Ok(n)
}

impl DenseTensor {
    pub fn zeros(order: usize, dim: usize) -> Result<Self> {
        let n = entries(order, dim)?;
        Ok(Self { order, dim, data: vec![0.0; n] })
    }

    pub fn from_vec(order: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        let n = entries(order, dim)?;
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!("expected {n} entries, got {}", data.len())));
        }
        Ok(Self { order, dim, data })
    }

    /// Order-2 tensor holding the entries of a square matrix.
    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::ShapeMismatch("matrix must be square".into()));
        }
        let d = m.nrows();
        Self::from_vec(2, d, (0..d * d).map(|i| m[(i / d, i % d)]).collect())
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.order);
        idx.iter().fold(0, |acc, &i| acc * self.dim + i)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.order != other.order || self.dim != other.dim {
            return Err(Error::ShapeMismatch(format!("order/dim ({}, {}) vs ({}, {})", self.order, self.dim, other.order, other.dim)));
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, other: &Self, c: f64) -> Result<()> {
        self.check_same_shape(other)?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += c * b);
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|a| *a *= c);
    }

    /// Tensor product `self ⊗ other`.
    pub fn outer(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::ShapeMismatch("outer product of different dimensions".into()));
        }
        let n = entries(self.order + other.order, self.dim)?;
        let mut data = Vec::with_capacity(n);
        for &a in &self.data {
            data.extend(other.data.iter().map(|b| a * b));
        }
        Ok(Self { order: self.order + other.order, dim: self.dim, data })
    }

    /// Contracts the last index with `v`.
    pub fn contract_vector_tail(&self, v: &[f64]) -> Self {
        assert!(self.order >= 1 && v.len() == self.dim);
        let data = self.data.chunks_exact(self.dim).map(|c| c.iter().zip(v).map(|(a, b)| a * b).sum()).collect();
        Self { order: self.order - 1, dim: self.dim, data }
    }

    /// Contracts the last two indices with `m`: `out[p] = sum_ab t[p, a, b] m[a, b]`.
    pub fn contract_matrix_tail(&self, m: &DMatrix<f64>) -> Self {
        let d = self.dim;
        assert!(self.order >= 2 && m.shape() == (d, d));
        let flat: Vec<f64> = (0..d * d).map(|i| m[(i / d, i % d)]).collect();
        let data = self.data.chunks_exact(d * d).map(|c| c.iter().zip(&flat).map(|(a, b)| a * b).sum()).collect();
        Self { order: self.order - 2, dim: d, data }
    }

    /// Order-2 tensor as a matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        assert_eq!(self.order, 2);
        let d = self.dim;
        DMatrix::from_row_slice(d, d, &self.data)
    }
}

/// `(Sym X)_{i_1..i_k} = (1/k!) sum_sigma X_{i_sigma(1)..i_sigma(k)}`.
pub fn sym(t: &DenseTensor) -> Result<DenseTensor> {
    let k = t.order;
    if k > MAX_ORDER {
        return Err(Error::UnsupportedOrder { order: k, max: MAX_ORDER });
    }
    if k <= 1 {
        return Ok(t.clone());
    }
    let d = t.dim;
    let strides: Vec<usize> = (0..k).map(|j| d.pow((k - 1 - j) as u32)).collect();
    let perms = permutations(k);
    let mut out = vec![0.0; t.data.len()];
    let mut idx = vec![0usize; k];
    for perm in &perms {
        // Position m of the source multi-index takes index i_perm[m].
        // Writing source = sum_m i_perm[m] * strides[m] = sum_j i_j * pstride[j].
        let mut pstride = vec![0usize; k];
        for (m, &p) in perm.iter().enumerate() {
            pstride[p] = strides[m];
        }
        idx.iter_mut().for_each(|i| *i = 0);
        let mut src = 0usize;
        for o in out.iter_mut() {
            *o += t.data[src];
            // odometer increment on idx, tracking src incrementally
            let mut pos = k;
            while pos > 0 {
                pos -= 1;
                idx[pos] += 1;
                src += pstride[pos];
                if idx[pos] < d {
                    break;
                }
                src -= d * pstride[pos];
                idx[pos] = 0;
            }
        }
    }
    let inv = 1.0 / perms.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(DenseTensor { order: k, dim: d, data: out })
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    use itertools::Itertools;
    (0..k).permutations(k).collect()
}

pub fn tensor_inner(a: &DenseTensor, b: &DenseTensor) -> Result<f64> {
    a.check_same_shape(b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
}

pub fn tensor_norm(a: &DenseTensor) -> f64 {
    a.data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `y^{⊗k}`.
pub fn outer_power(y: &[f64], k: usize) -> Result<DenseTensor> {
    let d = y.len();
    let mut t = DenseTensor { order: 0, dim: d, data: vec![1.0] };
    let base = DenseTensor { order: 1, dim: d, data: y.to_vec() };
    for _ in 0..k {
        t = t.outer(&base)?;
    }
    Ok(t)
}

fn accumulate_outer_power(acc: &mut [f64], y: &[f64], k: usize, scratch: &mut Vec<f64>) {
    // Builds y^{⊗k} into scratch by repeated expansion, then adds to acc.
    scratch.clear();
    scratch.push(1.0);
    for _ in 0..k {
        let prev = std::mem::take(scratch);
        scratch.reserve(prev.len() * y.len());
        for a in prev {
            scratch.extend(y.iter().map(|b| a * b));
        }
    }
    acc.iter_mut().zip(scratch.iter()).for_each(|(a, b)| *a += b);
}

/// `(1/N) sum_n y_n^{⊗k}`.
pub fn sample_moment_tensor(data: &SampleSet, k: usize) -> Result<DenseTensor> {
    if data.is_empty() {
        return Err(Error::EmptySample);
    }
    if k == 0 {
        return Err(Error::Domain("moment order must be at least 1".into()));
    }
    let d = data.dim();
    let n_entries = entries(k, d)?;
    let parts = par::map_chunks(data.len(), par::CHUNK, |range| {
        let mut acc = vec![0.0; n_entries];
        let mut scratch = Vec::with_capacity(n_entries);
        for i in range {
            accumulate_outer_power(&mut acc, data.row(i), k, &mut scratch);
        }
        acc
    });
    let mut total = vec![0.0; n_entries];
    for p in parts {
        total.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    let inv = 1.0 / data.len() as f64;
    total.iter_mut().for_each(|a| *a *= inv);
    DenseTensor::from_vec(k, d, total)
}

/// `C_{k,l} = k! / ((k-2l)! l! 2^l)`.
pub fn moment_coefficient(k: usize, l: usize) -> f64 {
    let fact = |n: usize| (1..=n).map(|x| x as f64).product::<f64>();
    fact(k) / (fact(k - 2 * l) * fact(l) * 2f64.powi(l as i32))
}

/// `mu^{⊗a} ⊗ Sigma^{⊗l}` (unsymmetrized).
pub fn center_covariance_product(mu: &DVector<f64>, sigma: &DMatrix<f64>, a: usize, l: usize) -> Result<DenseTensor> {
    let mut t = outer_power(mu.as_slice(), a)?;
    let s = DenseTensor::from_matrix(sigma)?;
    for _ in 0..l {
        t = t.outer(&s)?;
    }
    Ok(t)
}

/// The order-`k` population moment of the mixture,
/// `sum_j pi_j sum_l C_{k,l} Sym(mu_j^{⊗(k-2l)} ⊗ Sigma_j^{⊗l})`.
pub fn population_moment_tensor(params: &MixtureParams, k: usize) -> Result<DenseTensor> {
    if k > MAX_ORDER {
        return Err(Error::UnsupportedOrder { order: k, max: MAX_ORDER });
    }
    let d = params.dim();
    let mut unsym = DenseTensor::zeros(k, d)?;
    for j in 0..params.components() {
        let sigma = params.covariance(j);
        for l in 0..=k / 2 {
            let term = center_covariance_product(&params.centers()[j], &sigma, k - 2 * l, l)?;
            unsym.add_scaled(&term, params.weights()[j] * moment_coefficient(k, l))?;
        }
    }
    // Sym is linear, so one symmetrization of the sum suffices.
    sym(&unsym)
}

/// Population moments of orders `1..=max_order`.
pub fn population_moments(params: &MixtureParams, max_order: usize) -> Result<Vec<DenseTensor>> {
    (1..=max_order).map(|k| population_moment_tensor(params, k)).collect()
}

/// Highest order accepted by [`moment_function_g`].
pub const MAX_G_ORDER: usize = 4;

/// `q = d + d^2 + ... + d^L`.
pub fn stacked_len(d: usize, max_order: usize) -> usize {
    (1..=max_order).map(|k| d.pow(k as u32)).sum()
}

/// Moment function `g(theta, y) = [vec(M^(1) - y); ...; vec(M^(L) - y^{⊗L})]`.
pub fn moment_function_g(params: &MixtureParams, y: &[f64], max_order: usize) -> Result<Vec<f64>> {
    if max_order > MAX_G_ORDER {
        return Err(Error::GuardExceeded(format!("explicit moment function limited to L <= {MAX_G_ORDER}")));
    }
    let moments = population_moments(params, max_order)?;
    moment_function_g_with(&moments, y)
}

/// [`moment_function_g`] with precomputed population moments.
pub fn moment_function_g_with(moments: &[DenseTensor], y: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(moments.iter().map(|m| m.data.len()).sum());
    let mut scratch = Vec::new();
    for (i, m) in moments.iter().enumerate() {
        if m.dim != y.len() {
            return Err(Error::ShapeMismatch("sample dimension".into()));
        }
        let mut block = vec![0.0; m.data.len()];
        accumulate_outer_power(&mut block, y, i + 1, &mut scratch);
        out.extend(m.data.iter().zip(&block).map(|(a, b)| a - b));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::Rng;

    use crate::rng::stream_rng;

    fn random_tensor(order: usize, dim: usize, seed: u64) -> DenseTensor {
        let mut rng = stream_rng(seed, 0);
        let n = dim.pow(order as u32);
        DenseTensor::from_vec(order, dim, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sym_two_permutation_average() {
        let t = DenseTensor::from_vec(2, 2, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(sym(&t).unwrap().as_slice(), &[0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn sym_is_idempotent() {
        let t = random_tensor(3, 2, 1);
        let s = sym(&t).unwrap();
        let ss = sym(&s).unwrap();
        for (a, b) in s.as_slice().iter().zip(ss.as_slice()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn sym_symmetric_under_index_permutation() {
        let s = sym(&random_tensor(4, 3, 2)).unwrap();
        assert_relative_eq!(s.get(&[0, 1, 2, 2]), s.get(&[2, 0, 2, 1]), epsilon = 1e-15);
        assert_relative_eq!(s.get(&[1, 0, 0, 2]), s.get(&[0, 2, 1, 0]), epsilon = 1e-15);
    }

    #[test]
    fn sym_is_a_projection() {
        let t = random_tensor(3, 3, 3);
        let s = sym(&random_tensor(3, 3, 4)).unwrap();
        let lhs = tensor_inner(&sym(&t).unwrap(), &s).unwrap();
        let rhs = tensor_inner(&t, &s).unwrap();
        assert_relative_eq!(lhs, rhs, max_relative = 1e-13);
    }

    #[test]
    fn sym_rejects_high_order() {
        let t = DenseTensor::zeros(7, 2).unwrap();
        assert!(matches!(sym(&t), Err(Error::UnsupportedOrder { order: 7, .. })));
    }

    #[test]
    fn guard_on_entry_count() {
        assert!(matches!(DenseTensor::zeros(5, 100), Err(Error::GuardExceeded(_))));
    }

    #[test]
    fn inner_and_norm_basics() {
        let ones = DenseTensor::from_vec(2, 3, vec![1.0; 9]).unwrap();
        assert_eq!(tensor_inner(&ones, &ones).unwrap(), 9.0);
        assert_eq!(tensor_norm(&DenseTensor::zeros(3, 2).unwrap()), 0.0);
        let other = DenseTensor::zeros(3, 3).unwrap();
        assert!(tensor_inner(&ones, &other).is_err());
    }

    #[test]
    fn outer_power_inner_is_power_of_inner() {
        let y = [0.3, -1.2, 0.7, 2.0];
        let z = [1.1, 0.4, -0.5, 0.9];
        let ip: f64 = y.iter().zip(&z).map(|(a, b)| a * b).sum();
        let lhs = tensor_inner(&outer_power(&y, 3).unwrap(), &outer_power(&z, 3).unwrap()).unwrap();
        assert_relative_eq!(lhs, ip.powi(3), max_relative = 1e-12);
    }

    #[test]
    fn outer_power_examples() {
        assert_eq!(outer_power(&[1.0, 2.0], 2).unwrap().as_slice(), &[1.0, 2.0, 2.0, 4.0]);
        let e1 = outer_power(&[1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(e1.get(&[0, 0, 0]), 1.0);
        assert_eq!(e1.as_slice().iter().sum::<f64>(), 1.0);
        let y = [0.5, -1.5, 2.0];
        let norm = (0.25f64 + 2.25 + 4.0).sqrt();
        assert_relative_eq!(tensor_norm(&outer_power(&y, 4).unwrap()), norm.powi(4), max_relative = 1e-13);
    }

    #[test]
    fn sample_moment_basics() {
        let s = SampleSet::from_rows(1, 2, vec![1.5, -2.0]).unwrap();
        assert_eq!(sample_moment_tensor(&s, 3).unwrap(), outer_power(&[1.5, -2.0], 3).unwrap());
        let s = SampleSet::from_rows(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(sample_moment_tensor(&s, 1).unwrap().as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn sample_second_moment_of_standard_normal() {
        let p = MixtureParams::new(vec![1.0], vec![DVector::zeros(2)], vec![DMatrix::identity(2, 2)]).unwrap();
        let s = crate::model::sample_mixture(&p, 100_000, 8).unwrap();
        let m = sample_moment_tensor(&s, 2).unwrap();
        for (a, b) in m.as_slice().iter().zip([1.0, 0.0, 0.0, 1.0]) {
            assert!((a - b).abs() < 0.05);
        }
    }

    #[test]
    fn population_moment_low_orders() {
        let p = MixtureParams::new(
            vec![0.3, 0.7],
            vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![-1.0, 0.5])],
            vec![DMatrix::from_vec(2, 1, vec![1.0, 1.0]), DMatrix::from_vec(2, 1, vec![0.0, 2.0])],
        )
        .unwrap();
        let m1 = population_moment_tensor(&p, 1).unwrap();
        assert_relative_eq!(m1.as_slice()[0], 0.3 - 0.7, epsilon = 1e-15);
        assert_relative_eq!(m1.as_slice()[1], 0.6 + 0.35, epsilon = 1e-15);

        let single =
            MixtureParams::new(vec![1.0], vec![DVector::from_vec(vec![1.0, 2.0])], vec![DMatrix::from_vec(2, 1, vec![1.0, -1.0])]).unwrap();
        let m2 = population_moment_tensor(&single, 2).unwrap().to_matrix();
        let mu = &single.centers()[0];
        let expected = mu * mu.transpose() + single.covariance(0);
        assert!((m2 - expected).amax() < 1e-14);
    }

    #[test]
    fn population_moment_univariate_closed_forms() {
        let p = MixtureParams::new(vec![1.0], vec![DVector::from_vec(vec![1.0])], vec![DMatrix::from_element(1, 1, 2.0)]).unwrap();
        let got: Vec<f64> = (1..=4).map(|k| population_moment_tensor(&p, k).unwrap().as_slice()[0]).collect();
        assert_eq!(got, vec![1.0, 5.0, 13.0, 73.0]);
    }

    #[test]
    fn population_moment_is_symmetric() {
        let p = crate::model::default_initialization(2, 3, 2, 5).unwrap();
        let m = population_moment_tensor(&p, 4).unwrap();
        let s = sym(&m).unwrap();
        for (a, b) in m.as_slice().iter().zip(s.as_slice()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn moment_function_examples() {
        let y = [0.5, -1.0];
        let point = MixtureParams::new(vec![1.0], vec![DVector::from_column_slice(&y)], vec![DMatrix::zeros(2, 1)]).unwrap();
        let g = moment_function_g(&point, &y, 3).unwrap();
        assert_eq!(g.len(), stacked_len(2, 3));
        assert!(g.iter().all(|x| x.abs() < 1e-15));

        let p = crate::model::default_initialization(1, 2, 1, 1).unwrap();
        let g1 = moment_function_g(&p, &y, 1).unwrap();
        assert_relative_eq!(g1[0], p.centers()[0][0] - 0.5, epsilon = 1e-15);
        assert!(moment_function_g(&p, &y, 5).is_err());
    }

    #[test]
    fn averaged_moment_function_matches_sample_moments() {
        let p = crate::model::default_initialization(2, 3, 2, 2).unwrap();
        let data = crate::model::sample_mixture(&p, 50, 3).unwrap();
        let truth = crate::model::default_initialization(2, 3, 2, 9).unwrap();
        let moments = population_moments(&truth, 3).unwrap();
        let q = stacked_len(3, 3);
        let mut gbar = vec![0.0; q];
        for y in data.rows() {
            let g = moment_function_g_with(&moments, y).unwrap();
            gbar.iter_mut().zip(g).for_each(|(a, b)| *a += b / data.len() as f64);
        }
        let lhs: f64 = gbar.iter().map(|x| x * x).sum();
        let rhs: f64 = (1..=3)
            .map(|k| {
                let mut diff = moments[k - 1].clone();
                diff.add_scaled(&sample_moment_tensor(&data, k).unwrap(), -1.0).unwrap();
                tensor_norm(&diff).powi(2)
            })
            .sum();
        assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
    }

    #[test]
    fn contractions_match_inner_products() {
        let t = sym(&random_tensor(3, 3, 7)).unwrap();
        let v = [0.2, -0.4, 1.0];
        let m = DMatrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64 * 0.1 - 0.3);
        let full = tensor_inner(&t, &outer_power(&v, 1).unwrap().outer(&DenseTensor::from_matrix(&m).unwrap()).unwrap()).unwrap();
        let via = t.contract_matrix_tail(&m).contract_vector_tail(&v).as_slice()[0];
        assert_relative_eq!(full, via, max_relative = 1e-13);
    }
}
