//! Row sums of the polynomial kernel `h_k(y, y') = <y, y'>^k`.
//!
//! Since `<y^{⊗k}, y'^{⊗k}> = <y, y'>^k`, the data-only part of the
//! moment-matching objective and of the weight formula reduces to
//! `s_k[n] = sum_{n'} <y_n, y_n'>^k` for `k = 0..=2L`. These are computed either
//! exactly (`O(N^2)`) or with a per-order Nyström approximation built from
//! kernel k-means++ landmarks and a randomly pivoted Cholesky factorization.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SampleSet;
use crate::par;
use crate::rng::{derive_seed, stream_rng};

/// Default upper bound on `N` for exact `O(N^2)` kernel sums.
pub const EXACT_GUARD: usize = 20_000;
/// Upper bound on `N` for [`gram_rank`], which forms the full Gram matrix.
pub const GRAM_RANK_GUARD: usize = 5_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelMode {
    Exact,
    Nystrom,
}

impl std::str::FromStr for KernelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "nystrom" => Ok(Self::Nystrom),
            other => Err(Error::Config(format!("unknown kernel mode `{other}` (expected exact or nystrom)"))),
        }
    }
}

/// Kernel row sums for orders `0..=2L`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSumCache {
    max_order: usize,
    mode: KernelMode,
    /// `s[k][n]`
    sums: Vec<Vec<f64>>,
    /// `t[k] = sum_n s[k][n]`
    totals: Vec<f64>,
    /// `diag[k][n] = |y_n|^{2k}`
    diag: Vec<Vec<f64>>,
}

impl KernelSumCache {
    fn assemble(max_order: usize, mode: KernelMode, sums: Vec<Vec<f64>>, data: &SampleSet) -> Self {
        let totals = sums.iter().map(|s| s.iter().sum()).collect();
        let norms: Vec<f64> = data.rows().map(|y| y.iter().map(|v| v * v).sum()).collect();
        let diag = (0..=2 * max_order).map(|k| norms.iter().map(|q| q.powi(k as i32)).collect()).collect();
        Self { max_order, mode, sums, totals, diag }
    }

    /// `L`; the cache covers orders up to `2L`.
    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn mode(&self) -> KernelMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.sums[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sums(&self, k: usize) -> &[f64] {
        &self.sums[k]
    }

    pub fn total(&self, k: usize) -> f64 {
        self.totals[k]
    }

    pub fn diag(&self, k: usize) -> &[f64] {
        &self.diag[k]
    }
}

fn check_inputs(data: &SampleSet, max_order: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptySample);
    }
    if max_order == 0 {
        return Err(Error::Domain("moment order must be at least 1".into()));
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exact sums with the default guard `N <= 20000`.
pub fn exact_kernel_sums(data: &SampleSet, max_order: usize) -> Result<KernelSumCache> {
    exact_kernel_sums_with_guard(data, max_order, EXACT_GUARD)
}

pub fn exact_kernel_sums_with_guard(data: &SampleSet, max_order: usize, guard: usize) -> Result<KernelSumCache> {
    check_inputs(data, max_order)?;
    let n = data.len();
    if n > guard {
        return Err(Error::GuardExceeded(format!("exact kernel sums need N <= {guard}, got {n}")));
    }
    let top = 2 * max_order;
    // Each chunk of rows produces its rows' sums for every order.
    let parts = par::map_chunks(n, 256, |range| {
        let mut out = vec![vec![0.0; range.len()]; top + 1];
        for (r, i) in range.enumerate() {
            let yi = data.row(i);
            let mut acc = vec![0.0; top + 1];
            for yj in data.rows() {
                let g = dot(yi, yj);
                let mut p = 1.0;
                for a in acc.iter_mut().skip(1) {
                    p *= g;
                    *a += p;
                }
            }
            acc[0] = n as f64;
            for k in 0..=top {
                out[k][r] = acc[k];
            }
        }
        out
    });
    let mut sums = vec![Vec::with_capacity(n); top + 1];
    for part in parts {
        for (s, p) in sums.iter_mut().zip(part) {
            s.extend(p);
        }
    }
    Ok(KernelSumCache::assemble(max_order, KernelMode::Exact, sums, data))
}

/// Kernel k-means++ seeding for `h(x, y) = <x, y>^k`: the first landmark is
/// uniform, each next one is drawn with probability proportional to the
/// squared feature-space distance to the nearest chosen landmark.
pub fn kmeanspp_landmarks(data: &SampleSet, k: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    let n = data.len();
    if m == 0 || m > n {
        return Err(Error::Domain(format!("landmark count must be in 1..={n}, got {m}")));
    }
    let mut rng = stream_rng(seed, 0);
    let self_kernel: Vec<f64> = data.rows().map(|y| dot(y, y).powi(k as i32)).collect();
    let mut chosen = vec![false; n];
    let mut dist = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(m);
    let mut next = rng.random_range(0..n);
    loop {
        out.push(next);
        chosen[next] = true;
        if out.len() == m {
            break;
        }
        let c = data.row(next);
        let hc = self_kernel[next];
        let updates = par::map_chunks(n, par::CHUNK, |range| {
            range.map(|i| (self_kernel[i] - 2.0 * dot(data.row(i), c).powi(k as i32) + hc).max(0.0)).collect::<Vec<_>>()
        });
        for (i, d2) in updates.into_iter().flatten().enumerate() {
            dist[i] = if chosen[i] { 0.0 } else { dist[i].min(d2) };
        }
        let total: f64 = dist.iter().sum();
        next = if total > 0.0 && total.is_finite() {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in dist.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Round-off can leave `target` past the final partial sum.
            pick.unwrap_or_else(|| dist.iter().rposition(|&w| w > 0.0).expect("positive total"))
        } else {
            // Every remaining point coincides with a landmark in feature space.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
    }
    Ok(out)
}

/// Low-rank factor `W ≈ F F^T` with pivot order.
#[derive(Debug, Clone, PartialEq)]
pub struct RpCholesky {
    /// `m x r`
    pub factor: DMatrix<f64>,
    /// Pivot rows in selection order; `factor.select_rows(pivots)` is lower triangular.
    pub pivots: Vec<usize>,
}

impl RpCholesky {
    pub fn rank(&self) -> usize {
        self.pivots.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose()
    }
}

/// Randomly pivoted Cholesky: pivots are sampled proportionally to the
/// residual diagonal; stops once the residual trace is at most `tol * tr(W)`
/// or the rank reaches `max_rank`.
pub fn rp_cholesky<R: Rng>(w: &DMatrix<f64>, tol: f64, max_rank: usize, rng: &mut R) -> Result<RpCholesky> {
    let m = w.nrows();
    if !w.is_square() {
        return Err(Error::ShapeMismatch("matrix must be square".into()));
    }
    let scale = w.amax();
    for i in 0..m {
        for j in 0..i {
            if (w[(i, j)] - w[(j, i)]).abs() > 1e-12 * scale.max(f64::MIN_POSITIVE) {
                return Err(Error::NotSymmetric);
            }
        }
    }
    let trace: f64 = w.diagonal().iter().map(|x| x.max(0.0)).sum();
    let mut resid: Vec<f64> = w.diagonal().iter().map(|x| x.max(0.0)).collect();
    let max_rank = max_rank.min(m);
    let mut factor = DMatrix::zeros(m, max_rank);
    let mut pivots = Vec::with_capacity(max_rank);
    while pivots.len() < max_rank {
        let remaining: f64 = resid.iter().sum();
        if remaining <= tol * trace || remaining <= 0.0 {
            break;
        }
        let target = rng.random::<f64>() * remaining;
        let mut acc = 0.0;
        let mut s = resid.iter().rposition(|&r| r > 0.0).expect("positive residual");
        for (i, &r) in resid.iter().enumerate() {
            acc += r;
            if r > 0.0 && acc > target {
                s = i;
                break;
            }
        }
        let i = pivots.len();
        let mut g: DVector<f64> = w.column(s).into_owned();
        if i > 0 {
            let prev = factor.columns(0, i);
            let row_s = prev.row(s).transpose();
            g -= prev * row_s;
        }
        let gs = g[s];
        if gs <= 0.0 {
            break;
        }
        let col = g / gs.sqrt();
        for (r, c) in resid.iter_mut().zip(col.iter()) {
            *r = (*r - c * c).max(0.0);
        }
        resid[s] = 0.0;
        factor.set_column(i, &col);
        pivots.push(s);
    }
    let r = pivots.len();
    Ok(RpCholesky { factor: factor.columns(0, r).into_owned(), pivots })
}

/// Settings of the per-order Nyström approximation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NystromOptions {
    pub landmarks: usize,
    pub seed: u64,
    /// Added as `jitter * tr(W) / m` to the landmark Gram diagonal.
    pub jitter: f64,
    /// Relative trace tolerance of the pivoted Cholesky.
    pub tol: f64,
}

impl NystromOptions {
    pub fn new(landmarks: usize, seed: u64) -> Self {
        Self { landmarks, seed, jitter: 1e-10, tol: 1e-10 }
    }
}

/// `min(N, 4 K C(R_max + L - 1, L))`.
pub fn default_landmarks(n: usize, k: usize, r_max: usize, max_order: usize) -> usize {
    let bound = crate::bell::binomial(r_max + max_order - 1, max_order);
    (4.0 * k as f64 * bound).min(n as f64) as usize
}

/// Nyström approximation of the order-`k` Gram `H`, `H ≈ C_S W_SS^{-1} C_S^T`
/// where `S` are the landmarks retained by the pivoted Cholesky.
#[derive(Debug, Clone)]
pub struct NystromFactor {
    pub order: usize,
    pub landmarks: Vec<usize>,
    /// `N x m` kernel values against all landmarks.
    pub cross: DMatrix<f64>,
    pub cholesky: RpCholesky,
    pub jitter: f64,
}

impl NystromFactor {
    pub fn build(data: &SampleSet, order: usize, opts: &NystromOptions) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptySample);
        }
        let n = data.len();
        let m = opts.landmarks;
        let landmarks = kmeanspp_landmarks(data, order, m, derive_seed(opts.seed, 1))?;
        let lm: Vec<&[f64]> = landmarks.iter().map(|&i| data.row(i)).collect();
        let rows = par::map_chunks(n, par::CHUNK, |range| {
            let mut out = Vec::with_capacity(range.len() * m);
            for i in range {
                let y = data.row(i);
                out.extend(lm.iter().map(|c| dot(y, c).powi(order as i32)));
            }
            out
        });
        let cross = DMatrix::from_row_slice(n, m, &rows.concat());
        let mut w = DMatrix::from_fn(m, m, |a, b| dot(lm[a], lm[b]).powi(order as i32));
        // Symmetrize exactly before the symmetry check.
        w = (&w + w.transpose()) * 0.5;
        let jitter = opts.jitter * w.trace() / m as f64;
        for a in 0..m {
            w[(a, a)] += jitter;
        }
        let mut rng = stream_rng(derive_seed(opts.seed, 2), 0);
        let cholesky = rp_cholesky(&w, opts.tol, m, &mut rng)?;
        Ok(Self { order, landmarks, cross, cholesky, jitter })
    }

    /// `s ≈ C_S W_SS^{-1} C_S^T 1` via forward and back substitution.
    pub fn row_sums(&self) -> Result<Vec<f64>> {
        let r = self.cholesky.rank();
        if r == 0 {
            return Err(Error::DegenerateKernel(format!("order-{} landmark Gram has rank 0", self.order)));
        }
        let piv = &self.cholesky.pivots;
        let l_s = self.cholesky.factor.select_rows(piv.iter());
        let c_s = self.cross.select_columns(piv.iter());
        let ones_t_c: DVector<f64> = c_s.row_sum().transpose();
        let y = l_s.solve_lower_triangular(&ones_t_c).ok_or_else(|| Error::DegenerateKernel("forward substitution failed".into()))?;
        let x = l_s.tr_solve_lower_triangular(&y).ok_or_else(|| Error::DegenerateKernel("back substitution failed".into()))?;
        let s = c_s * x;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateKernel(format!("non-finite order-{} sums", self.order)));
        }
        Ok(s.as_slice().to_vec())
    }
}

/// Nyström sums for orders `1..=2L`, one landmark set per order drawn with an
/// order-specific sub-seed. Order 0 and the diagonal powers are exact.
pub fn nystrom_kernel_sums(data: &SampleSet, max_order: usize, opts: &NystromOptions) -> Result<KernelSumCache> {
    check_inputs(data, max_order)?;
    let n = data.len();
    let mut sums = vec![vec![n as f64; n]];
    for k in 1..=2 * max_order {
        let order_opts = NystromOptions { seed: derive_seed(opts.seed, k as u64), ..opts.clone() };
        sums.push(NystromFactor::build(data, k, &order_opts)?.row_sums()?);
    }
    Ok(KernelSumCache::assemble(max_order, KernelMode::Nystrom, sums, data))
}

/// Number of eigenvalues of the order-`k` Gram `H_{nn'} = <y_n, y_n'>^k`
/// whose magnitude exceeds `threshold * sigma_max`.
pub fn gram_rank(data: &SampleSet, k: usize, threshold: f64) -> Result<usize> {
    let n = data.len();
    if n > GRAM_RANK_GUARD {
        return Err(Error::GuardExceeded(format!("gram rank needs N <= {GRAM_RANK_GUARD}, got {n}")));
    }
    if n == 0 {
        return Err(Error::EmptySample);
    }
    let h = DMatrix::from_fn(n, n, |a, b| dot(data.row(a), data.row(b)).powi(k as i32));
    let eig = SymmetricEigen::new(h);
    let sigma_max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(eig.eigenvalues.iter().filter(|v| v.abs() > threshold * sigma_max).count())
}

/// `|s_approx - s_exact| / |s_exact|` in the Euclidean norm.
pub fn relative_error(approx: &[f64], exact: &[f64]) -> f64 {
    let num: f64 = approx.iter().zip(exact).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = exact.iter().map(|b| b * b).sum();
    (num / den).sqrt()
}
