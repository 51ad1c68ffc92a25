//! Moment quantities evaluated without forming tensors.
//!
//! With `X_j ~ N(mu_j, V_j V_j^T)`:
//!
//! * `alpha_k = <M^(k), M^(k)> = sum_ij pi_i pi_j E<X_i, X_j>^k`, and the raw
//!   moments of `<X_i, X_j>` are Bell polynomials of its cumulants, which depend
//!   only on `mu_i . mu_j`, `V_i^T V_j`, `V_i^T mu_j` and `V_j^T mu_i`.
//! * `beta_{k,n} = <M^(k), y_n^{⊗k}> = sum_j pi_j E<X_j, y_n>^k`, a Gaussian
//!   moment with mean `y^T mu_j` and variance `|V_j^T y|^2`.
//!
//! Index 0 of every returned vector is the order-0 term (`B_0 = 1`).

use nalgebra::{DMatrix, DVector};

use crate::bell::{bell_complete, bell_two_arg_into, binomial_table};
use crate::error::{Error, Result};
use crate::model::{MixtureParams, ParamGradient, SampleSet};
use crate::par;

fn factorial(n: usize) -> f64 {
    (1..=n).map(|x| x as f64).product()
}

/// Gram-level quantities of a component pair `(i, j)`.
struct PairGram {
    a_dot_b: f64,
    /// `P = V_i^T V_j`
    p: DMatrix<f64>,
    /// `G^s u` with `G = P P^T`, `u = V_i^T mu_j`
    gu: Vec<DVector<f64>>,
    /// `G^s z` with `z = P w`
    gz: Vec<DVector<f64>>,
    /// `H^s w` with `H = P^T P`, `w = V_j^T mu_i`
    hw: Vec<DVector<f64>>,
    /// `tr(G^s)`
    trace_g: Vec<f64>,
    /// `G^s`, only when gradients are requested
    g_pow: Vec<DMatrix<f64>>,
}

impl PairGram {
    fn new(mu_i: &DVector<f64>, v_i: &DMatrix<f64>, mu_j: &DVector<f64>, v_j: &DMatrix<f64>, max_order: usize, with_powers: bool) -> Self {
        let pmax = max_order / 2;
        let p = v_i.tr_mul(v_j);
        let g = &p * p.transpose();
        let h = p.tr_mul(&p);
        let u = v_i.tr_mul(mu_j);
        let w = v_j.tr_mul(mu_i);
        let z = &p * &w;
        let mut gu = vec![u];
        let mut gz = vec![z];
        let mut hw = vec![w];
        for s in 1..=pmax {
            gu.push(&g * &gu[s - 1]);
            gz.push(&g * &gz[s - 1]);
            hw.push(&h * &hw[s - 1]);
        }
        let mut trace_g = vec![g.nrows() as f64];
        let mut g_pow = Vec::new();
        let mut cur = DMatrix::identity(g.nrows(), g.nrows());
        if with_powers {
            g_pow.push(cur.clone());
        }
        for _ in 1..=pmax {
            cur = &cur * &g;
            trace_g.push(cur.trace());
            if with_powers {
                g_pow.push(cur.clone());
            }
        }
        Self { a_dot_b: mu_i.dot(mu_j), p, gu, gz, hw, trace_g, g_pow }
    }

    /// `[kappa_1, ..., kappa_L]` of `<X_i, X_j>`.
    fn cumulants(&self, max_order: usize) -> Vec<f64> {
        (1..=max_order)
            .map(|l| {
                if l == 1 {
                    self.a_dot_b
                } else if l % 2 == 0 {
                    let p = l / 2;
                    factorial(l - 1) * self.trace_g[p]
                        + 0.5 * factorial(l) * (self.hw[0].dot(&self.hw[p - 1]) + self.gu[0].dot(&self.gu[p - 1]))
                } else {
                    let p = l / 2;
                    factorial(l) * self.gu[0].dot(&self.gz[p - 1])
                }
            })
            .collect()
    }
}

/// Cumulants `[kappa_1, ..., kappa_L]` of `<X_i, X_j>` for independent
/// `X_i ~ N(mu_i, V_i V_i^T)`, `X_j ~ N(mu_j, V_j V_j^T)`.
pub fn pair_cumulants(mu_i: &DVector<f64>, v_i: &DMatrix<f64>, mu_j: &DVector<f64>, v_j: &DMatrix<f64>, max_order: usize) -> Vec<f64> {
    PairGram::new(mu_i, v_i, mu_j, v_j, max_order, false).cumulants(max_order)
}

/// Derivatives of each cumulant `kappa_l` (`l = 1..=L`) with respect to the
/// first slot `(mu_i, V_i)`.
pub fn pair_cumulant_gradients(
    mu_i: &DVector<f64>,
    v_i: &DMatrix<f64>,
    mu_j: &DVector<f64>,
    v_j: &DMatrix<f64>,
    max_order: usize,
) -> Vec<(DVector<f64>, DMatrix<f64>)> {
    let pg = PairGram::new(mu_i, v_i, mu_j, v_j, max_order, true);
    let (d, ri) = v_i.shape();
    let b = mu_j;
    let vj_pt = v_j * pg.p.transpose();
    let c = v_j * &pg.hw[0];
    let mut out = Vec::with_capacity(max_order);
    for l in 1..=max_order {
        if l == 1 {
            out.push((b.clone(), DMatrix::zeros(d, ri)));
            continue;
        }
        let f = factorial(l);
        let p = l / 2;
        let mut dv = DMatrix::zeros(d, ri);
        let dmu;
        if l % 2 == 0 {
            dmu = v_j * &pg.hw[p - 1] * f;
            dv += &vj_pt * &pg.g_pow[p - 1];
            dv.ger(1.0, b, &pg.gu[p - 1], 1.0);
            for s in 0..p - 1 {
                let left = v_j * &pg.hw[p - 2 - s];
                let right = &pg.p * &pg.hw[s];
                dv.ger(1.0, &left, &right, 1.0);
                let left = &vj_pt * &pg.gu[s];
                dv.ger(1.0, &left, &pg.gu[p - 2 - s], 1.0);
            }
        } else {
            dmu = &vj_pt * &pg.gu[p - 1] * f;
            dv.ger(1.0, b, &pg.gz[p - 1], 1.0);
            dv.ger(1.0, &c, &pg.gu[p - 1], 1.0);
            for s in 0..p - 1 {
                let t = p - 2 - s;
                dv.ger(1.0, &(&vj_pt * &pg.gz[t]), &pg.gu[s], 1.0);
                dv.ger(1.0, &(&vj_pt * &pg.gu[s]), &pg.gz[t], 1.0);
            }
        }
        dv *= f;
        out.push((dmu, dv));
    }
    out
}

/// `kappa[l - 1][i][j]`: the `l`-th cumulant of `<X_i, X_j>`.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulantTable {
    pub kappa: Vec<Vec<Vec<f64>>>,
}

impl CumulantTable {
    pub fn max_order(&self) -> usize {
        self.kappa.len()
    }

    /// `[kappa_1, ..., kappa_L]` of the pair `(i, j)`.
    pub fn pair(&self, i: usize, j: usize) -> Vec<f64> {
        self.kappa.iter().map(|by_l| by_l[i][j]).collect()
    }
}

pub fn pairwise_cumulants(params: &MixtureParams, max_order: usize) -> Result<CumulantTable> {
    check_order(max_order)?;
    let k = params.components();
    let mut kappa = vec![vec![vec![0.0; k]; k]; max_order];
    for i in 0..k {
        for j in i..k {
            let c = pair_cumulants(&params.centers()[i], &params.factors()[i], &params.centers()[j], &params.factors()[j], max_order);
            for (l, v) in c.into_iter().enumerate() {
                kappa[l][i][j] = v;
                kappa[l][j][i] = v;
            }
        }
    }
    Ok(CumulantTable { kappa })
}

/// `alpha_k = sum_ij pi_i pi_j B_k(kappa_ij)` from a precomputed table.
pub fn alpha_from_table(weights: &[f64], table: &CumulantTable, k: usize) -> Result<f64> {
    if k > table.max_order() {
        return Err(Error::UnsupportedOrder { order: k, max: table.max_order() });
    }
    let mut total = 0.0;
    for (i, pi) in weights.iter().enumerate() {
        for (j, pj) in weights.iter().enumerate() {
            let x: Vec<f64> = table.kappa[..k].iter().map(|by_l| by_l[i][j]).collect();
            total += pi * pj * bell_complete(&x)[k];
        }
    }
    Ok(total)
}

fn check_order(max_order: usize) -> Result<()> {
    if max_order == 0 {
        return Err(Error::Domain("moment order must be at least 1".into()));
    }
    Ok(())
}

/// `[alpha_0, ..., alpha_L]`.
pub fn alpha(params: &MixtureParams, max_order: usize) -> Result<Vec<f64>> {
    check_order(max_order)?;
    let k = params.components();
    let pi = params.weights();
    let mut out = vec![0.0; max_order + 1];
    for i in 0..k {
        for j in i..k {
            let kappa = pair_cumulants(&params.centers()[i], &params.factors()[i], &params.centers()[j], &params.factors()[j], max_order);
            let b = bell_complete(&kappa);
            let mult = if i == j { 1.0 } else { 2.0 };
            out.iter_mut().zip(&b).for_each(|(o, bk)| *o += mult * pi[i] * pi[j] * bk);
        }
    }
    Ok(out)
}

/// `alpha_k` together with its gradient, for `k = 0..=L`.
#[derive(Debug, Clone)]
pub struct AlphaWithGradients {
    pub values: Vec<f64>,
    pub gradients: Vec<ParamGradient>,
}

/// `alpha_k` and `grad alpha_k`. Uses symmetry of the pair cumulants:
/// `d alpha_k / d pi_c = 2 sum_j pi_j B_k(kappa_cj)` and
/// `d alpha_k / d theta_c = 2 pi_c sum_j pi_j sum_l C(k,l) B_{k-l}(kappa_cj) d_1 kappa^(l)_cj`.
pub fn alpha_with_gradients(params: &MixtureParams, max_order: usize) -> Result<AlphaWithGradients> {
    check_order(max_order)?;
    let kc = params.components();
    let pi = params.weights();
    let binom = binomial_table(max_order);
    let mut values = vec![0.0; max_order + 1];
    let mut gradients = vec![ParamGradient::zeros_like(params); max_order + 1];
    let mu = params.centers();
    let v = params.factors();
    for c in 0..kc {
        for j in 0..kc {
            let kappa = pair_cumulants(&mu[c], &v[c], &mu[j], &v[j], max_order);
            let b = bell_complete(&kappa);
            let dk = pair_cumulant_gradients(&mu[c], &v[c], &mu[j], &v[j], max_order);
            for k in 0..=max_order {
                values[k] += pi[c] * pi[j] * b[k];
                let g = &mut gradients[k];
                g.weights[c] += 2.0 * pi[j] * b[k];
                let scale = 2.0 * pi[c] * pi[j];
                for l in 1..=k {
                    let coef = scale * binom[k][l] * b[k - l];
                    g.centers[c].axpy(coef, &dk[l - 1].0, 1.0);
                    g.factors[c].zip_apply(&dk[l - 1].1, |x, y| *x += coef * y);
                }
            }
        }
    }
    Ok(AlphaWithGradients { values, gradients })
}

/// Column-major copies of the parameters for the per-sample hot loop.
struct FlatParams<'a> {
    pi: &'a [f64],
    centers: Vec<&'a [f64]>,
    factors: Vec<(&'a [f64], usize)>,
    d: usize,
}

impl<'a> FlatParams<'a> {
    fn new(params: &'a MixtureParams) -> Self {
        Self {
            pi: params.weights(),
            centers: params.centers().iter().map(|c| c.as_slice()).collect(),
            factors: params.factors().iter().map(|v| (v.as_slice(), v.ncols())).collect(),
            d: params.dim(),
        }
    }

    /// Writes `B_0..B_L` of `<X_j, y>` into `bell`, and `V_j^T y` into `proj`.
    #[inline]
    fn component_moments(&self, j: usize, y: &[f64], bell: &mut [f64], proj: &mut Vec<f64>) {
        let d = self.d;
        let mean = dot(self.centers[j], y);
        let (vj, r) = self.factors[j];
        proj.clear();
        proj.extend((0..r).map(|c| dot(&vj[c * d..(c + 1) * d], y)));
        let var = proj.iter().map(|x| x * x).sum();
        bell_two_arg_into(mean, var, bell);
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `[beta_0(y), ..., beta_L(y)]`.
pub fn beta(params: &MixtureParams, y: &[f64], max_order: usize) -> Result<Vec<f64>> {
    check_order(max_order)?;
    if y.len() != params.dim() {
        return Err(Error::ShapeMismatch(format!("sample of length {} for dimension {}", y.len(), params.dim())));
    }
    let flat = FlatParams::new(params);
    let mut bell = vec![0.0; max_order + 1];
    let mut proj = Vec::new();
    let mut out = vec![0.0; max_order + 1];
    for j in 0..params.components() {
        flat.component_moments(j, y, &mut bell, &mut proj);
        out.iter_mut().zip(&bell).for_each(|(o, b)| *o += flat.pi[j] * b);
    }
    Ok(out)
}

/// `beta_k(y)` gradients, `k = 0..=L`:
/// `d/d pi_j = B_k`, `d/d mu_j = k pi_j B_{k-1} y`, `d/d V_j = k(k-1) pi_j B_{k-2} y y^T V_j`.
pub fn beta_gradients(params: &MixtureParams, y: &[f64], max_order: usize) -> Result<Vec<ParamGradient>> {
    check_order(max_order)?;
    let flat = FlatParams::new(params);
    let yv = DVector::from_column_slice(y);
    let mut bell = vec![0.0; max_order + 1];
    let mut proj = Vec::new();
    let mut out = vec![ParamGradient::zeros_like(params); max_order + 1];
    for j in 0..params.components() {
        flat.component_moments(j, y, &mut bell, &mut proj);
        let projv = DVector::from_column_slice(&proj);
        let pij = flat.pi[j];
        for k in 0..=max_order {
            let g = &mut out[k];
            g.weights[j] = bell[k];
            if k >= 1 {
                g.centers[j].axpy(k as f64 * pij * bell[k - 1], &yv, 0.0);
            }
            if k >= 2 {
                g.factors[j].ger((k * (k - 1)) as f64 * pij * bell[k - 2], &yv, &projv, 0.0);
            }
        }
    }
    Ok(out)
}

/// `beta_{k,n}` for every sample, stored row-major with `L + 1` entries per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaTable {
    n: usize,
    width: usize,
    values: Vec<f64>,
}

impl BetaTable {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn max_order(&self) -> usize {
        self.width - 1
    }

    pub fn get(&self, n: usize, k: usize) -> f64 {
        self.values[n * self.width + k]
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.width..(n + 1) * self.width]
    }

    /// `[beta_{k,1}, ..., beta_{k,N}]`.
    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.n).map(|n| self.get(n, k)).collect()
    }

    /// `sum_n beta_{k,n}` for each `k`.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.width];
        for row in self.values.chunks_exact(self.width) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out
    }
}

pub fn beta_table(params: &MixtureParams, data: &SampleSet, max_order: usize) -> Result<BetaTable> {
    check_order(max_order)?;
    check_data(params, data)?;
    let flat = FlatParams::new(params);
    let width = max_order + 1;
    let parts = par::map_chunks(data.len(), par::CHUNK, |range| {
        let mut bell = vec![0.0; width];
        let mut proj = Vec::new();
        let mut out = vec![0.0; range.len() * width];
        for (row, n) in out.chunks_exact_mut(width).zip(range) {
            let y = data.row(n);
            for j in 0..params.components() {
                flat.component_moments(j, y, &mut bell, &mut proj);
                row.iter_mut().zip(&bell).for_each(|(o, b)| *o += flat.pi[j] * b);
            }
        }
        out
    });
    Ok(BetaTable { n: data.len(), width, values: parts.concat() })
}

fn check_data(params: &MixtureParams, data: &SampleSet) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptySample);
    }
    if data.dim() != params.dim() {
        return Err(Error::ShapeMismatch(format!("data dimension {} vs parameter dimension {}", data.dim(), params.dim())));
    }
    Ok(())
}

/// Result of [`weighted_beta_sum`].
#[derive(Debug, Clone)]
pub struct BetaSums {
    /// `sum_n beta_{k,n}` for `k = 0..=L`.
    pub sums: Vec<f64>,
    /// Gradient of `sum_k coeffs[k] sum_n beta_{k,n}`.
    pub gradient: ParamGradient,
}

/// One pass over the data computing `sum_n beta_{k,n}` and the gradient of
/// the weighted sum `sum_k coeffs[k] sum_n beta_{k,n}`. Cost `O(N K d R_max L)`.
pub fn weighted_beta_sum(params: &MixtureParams, data: &SampleSet, coeffs: &[f64]) -> Result<BetaSums> {
    if coeffs.is_empty() {
        return Err(Error::Domain("coefficient vector must include order 0".into()));
    }
    let max_order = coeffs.len() - 1;
    check_order(max_order)?;
    check_data(params, data)?;
    let flat = FlatParams::new(params);
    let kc = params.components();
    let d = params.dim();
    let width = max_order + 1;
    // Derivative coefficients of B_k in its mean and variance arguments.
    let c_mu: Vec<f64> = (0..width).map(|k| k as f64 * coeffs[k]).collect();
    let c_var: Vec<f64> = (0..width).map(|k| (k * k.saturating_sub(1)) as f64 * coeffs[k]).collect();

    struct Acc {
        sums: Vec<f64>,
        pi: Vec<f64>,
        mu: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    }
    let parts = par::map_chunks(data.len(), par::CHUNK, |range| {
        let mut acc = Acc {
            sums: vec![0.0; width],
            pi: vec![0.0; kc],
            mu: vec![vec![0.0; d]; kc],
            v: flat.factors.iter().map(|(s, _)| vec![0.0; s.len()]).collect(),
        };
        let mut bell = vec![0.0; width];
        let mut proj = Vec::new();
        for n in range {
            let y = data.row(n);
            for j in 0..kc {
                flat.component_moments(j, y, &mut bell, &mut proj);
                let pij = flat.pi[j];
                let mut cp = 0.0;
                let mut cm = 0.0;
                let mut cv = 0.0;
                for k in 0..width {
                    acc.sums[k] += pij * bell[k];
                    cp += coeffs[k] * bell[k];
                    if k >= 1 {
                        cm += c_mu[k] * bell[k - 1];
                    }
                    if k >= 2 {
                        cv += c_var[k] * bell[k - 2];
                    }
                }
                acc.pi[j] += cp;
                let cm = cm * pij;
                acc.mu[j].iter_mut().zip(y).for_each(|(a, yi)| *a += cm * yi);
                let cv = cv * pij;
                if cv != 0.0 {
                    for (col, p) in acc.v[j].chunks_exact_mut(d).zip(&proj) {
                        let s = cv * p;
                        col.iter_mut().zip(y).for_each(|(a, yi)| *a += s * yi);
                    }
                }
            }
        }
        acc
    });
    let mut sums = vec![0.0; width];
    let mut gradient = ParamGradient::zeros_like(params);
    for part in parts {
        sums.iter_mut().zip(&part.sums).for_each(|(a, b)| *a += b);
        gradient.weights.iter_mut().zip(&part.pi).for_each(|(a, b)| *a += b);
        for j in 0..kc {
            gradient.centers[j].iter_mut().zip(&part.mu[j]).for_each(|(a, b)| *a += b);
            gradient.factors[j].iter_mut().zip(&part.v[j]).for_each(|(a, b)| *a += b);
        }
    }
    Ok(BetaSums { sums, gradient })
}
