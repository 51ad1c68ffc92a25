//! Mixture parameters, the packed optimization vector, synthetic sampling and
//! the ground-truth / initialization generators.
//!
//! A component `j` is `N(mu_j, V_j V_j^T)` where the factor `V_j` is `d x R_max`.
//! Components whose true rank is below `R_max` carry zero columns.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::stream_rng;

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Structured mixture parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRepr", into = "ParamsRepr")]
pub struct MixtureParams {
    weights: Vec<f64>,
    centers: Vec<DVector<f64>>,
    factors: Vec<DMatrix<f64>>,
}

impl MixtureParams {
    pub fn new(weights: Vec<f64>, centers: Vec<DVector<f64>>, factors: Vec<DMatrix<f64>>) -> Result<Self> {
        let params = Self { weights, centers, factors };
        params.validate()?;
        Ok(params)
    }

    fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 {
            return Err(Error::InvalidParams("no components".into()));
        }
        if self.centers.len() != k || self.factors.len() != k {
            return Err(Error::InvalidParams(format!("{} weights, {} centers, {} factors", k, self.centers.len(), self.factors.len())));
        }
        if self.weights.iter().any(|&w| !(w > 0.0 && w <= 1.0)) {
            return Err(Error::InvalidParams("weights must lie in (0, 1]".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidParams(format!("weights sum to {sum}")));
        }
        let d = self.centers[0].len();
        let r = self.factors[0].ncols();
        if d == 0 || r == 0 || r > d {
            return Err(Error::InvalidParams(format!("need 1 <= R_max <= d, got d={d}, R_max={r}")));
        }
        for j in 0..k {
            if self.centers[j].len() != d {
                return Err(Error::InvalidParams(format!("center {j} has wrong length")));
            }
            if self.factors[j].shape() != (d, r) {
                return Err(Error::InvalidParams(format!("factor {j} is not {d}x{r}")));
            }
        }
        let finite =
            self.centers.iter().all(|c| c.iter().all(|x| x.is_finite())) && self.factors.iter().all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::InvalidParams("non-finite entries".into()));
        }
        Ok(())
    }

    /// Skips validation; for perturbation-based derivative checks.
    #[cfg(test)]
    pub(crate) fn unchecked(weights: Vec<f64>, centers: Vec<DVector<f64>>, factors: Vec<DMatrix<f64>>) -> Self {
        Self { weights, centers, factors }
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn max_rank(&self) -> usize {
        self.factors[0].ncols()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn centers(&self) -> &[DVector<f64>] {
        &self.centers
    }

    pub fn factors(&self) -> &[DMatrix<f64>] {
        &self.factors
    }

    /// `Sigma_j = V_j V_j^T`.
    pub fn covariance(&self, j: usize) -> DMatrix<f64> {
        &self.factors[j] * self.factors[j].transpose()
    }

    /// Reorders components: output component `j` is input component `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            weights: perm.iter().map(|&p| self.weights[p]).collect(),
            centers: perm.iter().map(|&p| self.centers[p].clone()).collect(),
            factors: perm.iter().map(|&p| self.factors[p].clone()).collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsRepr {
    weights: Vec<f64>,
    centers: Vec<Vec<f64>>,
    /// Each factor as a list of rows.
    factors: Vec<Vec<Vec<f64>>>,
}

impl From<MixtureParams> for ParamsRepr {
    fn from(p: MixtureParams) -> Self {
        ParamsRepr {
            centers: p.centers.iter().map(|c| c.iter().copied().collect()).collect(),
            factors: p.factors.iter().map(|v| v.row_iter().map(|r| r.iter().copied().collect()).collect()).collect(),
            weights: p.weights,
        }
    }
}

impl TryFrom<ParamsRepr> for MixtureParams {
    type Error = Error;

    fn try_from(r: ParamsRepr) -> Result<Self> {
        let centers = r.centers.into_iter().map(DVector::from_vec).collect();
        let mut factors = Vec::with_capacity(r.factors.len());
        for rows in r.factors {
            let nrows = rows.len();
            let ncols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|row| row.len() != ncols) {
                return Err(Error::InvalidParams("ragged factor rows".into()));
            }
            factors.push(DMatrix::from_row_iterator(nrows, ncols, rows.into_iter().flatten()));
        }
        MixtureParams::new(r.weights, centers, factors)
    }
}

/// Observations, one row per sample, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    n: usize,
    d: usize,
    data: Vec<f64>,
    seed: Option<u64>,
}

impl SampleSet {
    pub fn from_rows(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptySample);
        }
        if d == 0 || data.len() != n * d {
            return Err(Error::ShapeMismatch(format!("expected {n}x{d} values, got {}", data.len())));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParams("non-finite sample entry".into()));
        }
        Ok(Self { n, d, data, seed: None })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Multiplies every entry by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self { data: self.data.iter().map(|x| x * c).collect(), ..self.clone() }
    }

    /// Rows reordered so output row `i` is input row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let data = perm.iter().flat_map(|&p| self.row(p).iter().copied()).collect();
        Self { data, ..self.clone() }
    }
}

/// How ground-truth component ranks are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankMode {
    /// Every component has rank `R_max`.
    Identical,
    /// `R_j ~ Unif{1..R_max}`.
    UniformRandom,
    /// Fixed ranks, one per component.
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSpec {
    pub k: usize,
    pub d: usize,
    pub r_max: usize,
    pub rank_mode: RankMode,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Fixed mixing weights; drawn at random when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    pub seed: u64,
}

impl GroundTruthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidParams("K must be positive".into()));
        }
        if self.r_max == 0 || self.r_max > self.d {
            return Err(Error::InvalidParams(format!("need 1 <= R_max <= d, got {}", self.r_max)));
        }
        if !(self.lambda_min > 0.0 && self.lambda_min <= self.lambda_max) {
            return Err(Error::InvalidParams("need 0 < lambda_min <= lambda_max".into()));
        }
        if let RankMode::Explicit(ranks) = &self.rank_mode {
            if ranks.len() != self.k || ranks.iter().any(|&r| r == 0 || r > self.r_max) {
                return Err(Error::InvalidParams("explicit ranks must be K values in 1..=R_max".into()));
            }
        }
        if let Some(w) = &self.weights {
            if w.len() != self.k {
                return Err(Error::InvalidParams("fixed weights must have K entries".into()));
            }
        }
        Ok(())
    }
}

/// Draws `N` rows: pick `h ~ pi`, then `y = mu_h + V_h z` with `z ~ N(0, I_Rmax)`.
pub fn sample_mixture(params: &MixtureParams, n: usize, seed: u64) -> Result<SampleSet> {
    sample_mixture_labeled(params, n, seed).map(|(s, _)| s)
}

/// Like [`sample_mixture`], also returning the component label of every row.
pub fn sample_mixture_labeled(params: &MixtureParams, n: usize, seed: u64) -> Result<(SampleSet, Vec<usize>)> {
    if n == 0 {
        return Err(Error::EmptySample);
    }
    let d = params.dim();
    let r = params.max_rank();
    let mut cumulative = Vec::with_capacity(params.components());
    let mut acc = 0.0;
    for &w in params.weights() {
        acc += w;
        cumulative.push(acc);
    }
    // Rows are generated in fixed blocks, each from its own stream.
    let blocks = par::map_chunks(n, par::CHUNK, |range| {
        let mut rng = stream_rng(seed, (range.start / par::CHUNK) as u64);
        let mut rows = Vec::with_capacity(range.len() * d);
        let mut labels = Vec::with_capacity(range.len());
        let mut z = vec![0.0; r];
        for _ in range {
            let u: f64 = rng.random::<f64>() * acc;
            let h = cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1);
            for zi in z.iter_mut() {
                *zi = StandardNormal.sample(&mut rng);
            }
            let (mu, v) = (&params.centers[h], &params.factors[h]);
            for i in 0..d {
                let mut y = mu[i];
                for (c, zc) in z.iter().enumerate() {
                    y += v[(i, c)] * zc;
                }
                rows.push(y);
            }
            labels.push(h);
        }
        (rows, labels)
    });
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (rows, lab) in blocks {
        data.extend(rows);
        labels.extend(lab);
    }
    Ok((SampleSet::from_rows(n, d, data)?.with_seed(seed), labels))
}

/// Uniform point on the unit sphere in `R^d`.
pub fn random_unit_vector<R: Rng>(d: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::<f64>::from_fn(d, |_, _| StandardNormal.sample(rng));
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Haar-distributed `d x r` matrix with orthonormal columns: QR of a Gaussian
/// matrix with the signs of `diag(R)` folded into `Q`.
pub fn random_orthonormal<R: Rng>(d: usize, r: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, r, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let rr = qr.r();
    let mut q = qr.q();
    for c in 0..r {
        if rr[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    q
}

/// Random ground truth following the synthetic-experiment recipe.
pub fn generate_ground_truth(spec: &GroundTruthSpec) -> Result<MixtureParams> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, 0);
    let weights = match &spec.weights {
        Some(w) => {
            let sum: f64 = w.iter().sum();
            w.iter().map(|x| x / sum).collect()
        }
        None => {
            // Unif(0,1) per component, normalized.
            let raw: Vec<f64> = (0..spec.k)
                .map(|_| loop {
                    let u: f64 = rng.random();
                    if u > 0.0 {
                        break u;
                    }
                })
                .collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / sum).collect()
        }
    };
    let eig = Uniform::new_inclusive(spec.lambda_min, spec.lambda_max).map_err(|e| Error::InvalidParams(e.to_string()))?;
    let mut centers = Vec::with_capacity(spec.k);
    let mut factors = Vec::with_capacity(spec.k);
    for j in 0..spec.k {
        centers.push(random_unit_vector(spec.d, &mut rng));
        let rank = match &spec.rank_mode {
            RankMode::Identical => spec.r_max,
            RankMode::UniformRandom => rng.random_range(1..=spec.r_max),
            RankMode::Explicit(ranks) => ranks[j],
        };
        let u = random_orthonormal(spec.d, rank, &mut rng);
        let mut v = DMatrix::zeros(spec.d, spec.r_max);
        for c in 0..rank {
            let lambda: f64 = eig.sample(&mut rng);
            v.set_column(c, &(u.column(c) * lambda.sqrt()));
        }
        factors.push(v);
    }
    MixtureParams::new(weights, centers, factors)
}

/// Uniform weights, unit-sphere centers, orthonormal factors.
pub fn default_initialization(k: usize, d: usize, r_max: usize, seed: u64) -> Result<MixtureParams> {
    if k == 0 || r_max == 0 || r_max > d {
        return Err(Error::InvalidParams(format!("need K >= 1 and 1 <= R_max <= d, got K={k}, R_max={r_max}")));
    }
    let mut rng = stream_rng(seed, 0);
    let mut centers = Vec::with_capacity(k);
    let mut factors = Vec::with_capacity(k);
    for _ in 0..k {
        centers.push(random_unit_vector(d, &mut rng));
        factors.push(random_orthonormal(d, r_max, &mut rng));
    }
    MixtureParams::new(vec![1.0 / k as f64; k], centers, factors)
}

/// Flat unconstrained parameter vector
/// `[logits; mu_1; ..; mu_K; vec(V_1); ..; vec(V_K)]`, with `vec` column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedTheta {
    pub k: usize,
    pub d: usize,
    pub r_max: usize,
    pub tau: f64,
    pub values: Vec<f64>,
}

/// Offsets into a packed vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub k: usize,
    pub d: usize,
    pub r_max: usize,
}

impl Layout {
    pub fn new(k: usize, d: usize, r_max: usize) -> Self {
        Self { k, d, r_max }
    }

    pub fn of(params: &MixtureParams) -> Self {
        Self::new(params.components(), params.dim(), params.max_rank())
    }

    pub fn len(&self) -> usize {
        self.k + self.k * self.d + self.k * self.d * self.r_max
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn center(&self, j: usize) -> usize {
        self.k + j * self.d
    }

    pub fn factor(&self, j: usize) -> usize {
        self.k + self.k * self.d + j * self.d * self.r_max
    }
}

impl PackedTheta {
    pub fn layout(&self) -> Layout {
        Layout::new(self.k, self.d, self.r_max)
    }
}

/// Max-shifted softmax of `logits / tau`.
pub fn softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| ((l - max) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Logits `tau * ln(pi)`; centers and factors copied verbatim.
pub fn pack(params: &MixtureParams, tau: f64) -> Result<PackedTheta> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    if params.weights.iter().any(|&w| w <= 0.0) {
        return Err(Error::Domain("weights must be strictly positive".into()));
    }
    let layout = Layout::of(params);
    let mut values = Vec::with_capacity(layout.len());
    values.extend(params.weights.iter().map(|w| tau * w.ln()));
    for c in &params.centers {
        values.extend(c.iter());
    }
    for v in &params.factors {
        values.extend(v.as_slice());
    }
    Ok(PackedTheta { k: layout.k, d: layout.d, r_max: layout.r_max, tau, values })
}

pub fn unpack(theta: &PackedTheta) -> Result<MixtureParams> {
    unpack_slice(&theta.values, theta.layout(), theta.tau)
}

pub fn unpack_slice(values: &[f64], layout: Layout, tau: f64) -> Result<MixtureParams> {
    if values.len() != layout.len() {
        return Err(Error::ShapeMismatch(format!("packed length {} != {}", values.len(), layout.len())));
    }
    let Layout { k, d, r_max } = layout;
    let mut weights = softmax(&values[..k], tau);
    // Keep weights inside the open simplex under extreme logits.
    let floor = f64::MIN_POSITIVE;
    if weights.iter().any(|&w| w <= floor) {
        weights.iter_mut().for_each(|w| *w = w.max(floor));
        let s: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= s);
    }
    let centers = (0..k).map(|j| DVector::from_column_slice(&values[layout.center(j)..layout.center(j) + d])).collect();
    let factors = (0..k).map(|j| DMatrix::from_column_slice(d, r_max, &values[layout.factor(j)..layout.factor(j) + d * r_max])).collect();
    Ok(MixtureParams { weights, centers, factors })
}

/// `J^T g` for the softmax Jacobian `J_ab = pi_a (delta_ab - pi_b) / tau`.
pub fn chain_simplex_gradient(grad_pi: &[f64], pi: &[f64], tau: f64) -> Vec<f64> {
    let mean: f64 = pi.iter().zip(grad_pi).map(|(p, g)| p * g).sum();
    pi.iter().zip(grad_pi).map(|(p, g)| p * (g - mean) / tau).collect()
}

/// Gradient of a scalar with respect to `(pi, mu_j, V_j)`, shaped like the
/// parameters themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub weights: Vec<f64>,
    pub centers: Vec<DVector<f64>>,
    pub factors: Vec<DMatrix<f64>>,
}

impl ParamGradient {
    pub fn zeros_like(params: &MixtureParams) -> Self {
        Self {
            weights: vec![0.0; params.components()],
            centers: params.centers.iter().map(|c| DVector::zeros(c.len())).collect(),
            factors: params.factors.iter().map(|v| DMatrix::zeros(v.nrows(), v.ncols())).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Self, c: f64) {
        self.weights.iter_mut().zip(&other.weights).for_each(|(a, b)| *a += c * b);
        self.centers.iter_mut().zip(&other.centers).for_each(|(a, b)| a.axpy(c, b, 1.0));
        self.factors.iter_mut().zip(&other.factors).for_each(|(a, b)| a.zip_apply(b, |x, y| *x += c * y));
    }

    pub fn scale(&mut self, c: f64) {
        self.weights.iter_mut().for_each(|a| *a *= c);
        self.centers.iter_mut().for_each(|a| *a *= c);
        self.factors.iter_mut().for_each(|a| *a *= c);
    }

    /// Gradient with respect to the packed vector, chaining the weight block
    /// through the softmax at `pi`.
    pub fn to_packed(&self, pi: &[f64], tau: f64) -> Vec<f64> {
        let mut out = chain_simplex_gradient(&self.weights, pi, tau);
        for c in &self.centers {
            out.extend(c.iter());
        }
        for v in &self.factors {
            out.extend(v.as_slice());
        }
        out
    }
}
