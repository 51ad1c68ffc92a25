//! Limited-memory BFGS with a strong-Wolfe line search.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsOptions {
    /// Number of stored curvature pairs.
    pub memory: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_iters: usize,
    /// Stop when `|g| <= grad_tol * max(1, |x|)`.
    pub grad_tol: f64,
    /// Stop when `(f_prev - f) <= ftol * max(|f_prev|, |f|)`; relative, since the weighting sets the scale of `f`.
    pub ftol: f64,
    /// Function evaluations allowed per line search.
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self { memory: 10, c1: 1e-4, c2: 0.9, max_iters: 200, grad_tol: 1e-8, ftol: 2.220446049250313e-9, max_line_search: 40 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LbfgsStatus {
    GradientConverged,
    Stalled,
    MaxIterations,
    LineSearchFailed,
    NonFiniteStart,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: LbfgsStatus,
    /// Objective after each accepted step, starting with `f(x0)`.
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Probe {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
    dphi: f64,
}

struct LineSearch<'a, F> {
    f: &'a mut F,
    x: &'a [f64],
    dir: &'a [f64],
    phi0: f64,
    dphi0: f64,
    c1: f64,
    c2: f64,
    budget: usize,
    evaluations: usize,
    /// Lowest point satisfying sufficient decrease, used if the search fails.
    best: Option<Probe>,
}

impl<F: FnMut(&[f64]) -> (f64, Vec<f64>)> LineSearch<'_, F> {
    fn eval(&mut self, alpha: f64) -> Probe {
        self.evaluations += 1;
        let xt: Vec<f64> = self.x.iter().zip(self.dir).map(|(x, d)| x + alpha * d).collect();
        let (f, g) = (self.f)(&xt);
        let (f, dphi) = if f.is_finite() && g.iter().all(|v| v.is_finite()) { (f, dot(&g, self.dir)) } else { (f64::INFINITY, f64::NAN) };
        let probe = Probe { alpha, f, g, dphi };
        if self.armijo(&probe) && self.best.as_ref().is_none_or(|b| probe.f < b.f) {
            self.best = Some(Probe { g: probe.g.clone(), ..probe });
        }
        probe
    }

    fn armijo(&self, p: &Probe) -> bool {
        p.f.is_finite() && p.f <= self.phi0 + self.c1 * p.alpha * self.dphi0
    }

    fn curvature(&self, p: &Probe) -> bool {
        p.dphi.abs() <= -self.c2 * self.dphi0
    }

    fn search(&mut self, alpha0: f64) -> Option<Probe> {
        let mut prev = Probe { alpha: 0.0, f: self.phi0, g: Vec::new(), dphi: self.dphi0 };
        let mut alpha = alpha0;
        let mut first = true;
        while self.evaluations < self.budget {
            let cur = self.eval(alpha);
            if !cur.f.is_finite() {
                // Overshot into a non-finite region: back off toward the last good point.
                alpha = prev.alpha + 0.5 * (alpha - prev.alpha);
                continue;
            }
            if !self.armijo(&cur) || (!first && cur.f >= prev.f) {
                return self.zoom(prev, cur);
            }
            if self.curvature(&cur) {
                return Some(cur);
            }
            if cur.dphi >= 0.0 {
                return self.zoom(cur, prev);
            }
            first = false;
            alpha = 2.0 * cur.alpha;
            prev = cur;
        }
        None
    }

    fn zoom(&mut self, mut lo: Probe, mut hi: Probe) -> Option<Probe> {
        while self.evaluations < self.budget {
            let (a, b) = (lo.alpha, hi.alpha);
            let width = (b - a).abs();
            if width <= f64::EPSILON * a.abs().max(b.abs()).max(1e-300) {
                return None;
            }
            let mut trial = cubic_minimizer(&lo, &hi).unwrap_or(0.5 * (a + b));
            let (left, right) = (a.min(b), a.max(b));
            let margin = 0.1 * width;
            if !(trial > left + margin && trial < right - margin) {
                trial = 0.5 * (a + b);
            }
            let cur = self.eval(trial);
            if !self.armijo(&cur) || cur.f >= lo.f {
                hi = cur;
            } else {
                if self.curvature(&cur) {
                    return Some(cur);
                }
                if cur.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = cur;
            }
        }
        None
    }
}

/// Minimizer of the cubic interpolating `f` and `f'` at both ends.
fn cubic_minimizer(p: &Probe, q: &Probe) -> Option<f64> {
    if !(p.dphi.is_finite() && q.dphi.is_finite() && q.f.is_finite()) {
        return None;
    }
    let d1 = p.dphi + q.dphi - 3.0 * (p.f - q.f) / (p.alpha - q.alpha);
    let rad = d1 * d1 - p.dphi * q.dphi;
    if rad < 0.0 {
        return None;
    }
    let d2 = (q.alpha - p.alpha).signum() * rad.sqrt();
    let t = q.alpha - (q.alpha - p.alpha) * (q.dphi + d2 - d1) / (q.dphi - p.dphi + 2.0 * d2);
    t.is_finite().then_some(t)
}

/// Minimizes `f`, which returns the value and gradient at a point.
/// Non-finite values are treated as `+inf` by the line search.
pub fn lbfgs_minimize<F>(mut f: F, x0: Vec<f64>, opts: &LbfgsOptions) -> LbfgsResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut evaluations = 1;
    let mut history = vec![fx];
    let finish = |x: Vec<f64>, fx: f64, g: &[f64], iterations, evaluations, status, history| LbfgsResult {
        x,
        f: fx,
        grad_norm: norm(g),
        iterations,
        evaluations,
        status,
        history,
    };
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return finish(x, fx, &g, 0, evaluations, LbfgsStatus::NonFiniteStart, history);
    }
    let converged = |x: &[f64], g: &[f64]| norm(g) <= opts.grad_tol * norm(x).max(1.0);
    if converged(&x, &g) {
        return finish(x, fx, &g, 0, evaluations, LbfgsStatus::GradientConverged, history);
    }
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let mut status = LbfgsStatus::MaxIterations;
    while iterations < opts.max_iters {
        let mut dir = two_loop(&g, &s_hist, &y_hist, &rho);
        let mut dphi0 = dot(&g, &dir);
        if !(dphi0 < 0.0) {
            s_hist.clear();
            y_hist.clear();
            rho.clear();
            dir = g.iter().map(|v| -v).collect();
            dphi0 = -dot(&g, &g);
        }
        let alpha0 = if s_hist.is_empty() { (1.0 / norm(&g)).min(1.0) } else { 1.0 };
        let mut ls = LineSearch {
            f: &mut f,
            x: &x,
            dir: &dir,
            phi0: fx,
            dphi0,
            c1: opts.c1,
            c2: opts.c2,
            budget: opts.max_line_search,
            evaluations: 0,
            best: None,
        };
        let found = ls.search(alpha0);
        let best = ls.best.take();
        evaluations += ls.evaluations;
        let step = match found.or(best) {
            Some(p) => p,
            None if !s_hist.is_empty() => {
                // Discard curvature information and retry along the gradient.
                s_hist.clear();
                y_hist.clear();
                rho.clear();
                continue;
            }
            None => {
                status = LbfgsStatus::LineSearchFailed;
                break;
            }
        };
        let s: Vec<f64> = dir.iter().map(|d| step.alpha * d).collect();
        let y: Vec<f64> = step.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if s_hist.len() == opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho.remove(0);
            }
            rho.push(1.0 / sy);
            s_hist.push(s.clone());
            y_hist.push(y);
        }
        x.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
        let f_prev = fx;
        fx = step.f;
        g = step.g;
        iterations += 1;
        history.push(fx);
        if converged(&x, &g) {
            status = LbfgsStatus::GradientConverged;
            break;
        }
        if f_prev - fx <= opts.ftol * f_prev.abs().max(fx.abs()) {
            status = LbfgsStatus::Stalled;
            break;
        }
    }
    finish(x, fx, &g, iterations, evaluations, status, history)
}

fn two_loop(g: &[f64], s: &[Vec<f64>], y: &[Vec<f64>], rho: &[f64]) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let m = s.len();
    let mut a = vec![0.0; m];
    for i in (0..m).rev() {
        a[i] = rho[i] * dot(&s[i], &q);
        q.iter_mut().zip(&y[i]).for_each(|(qv, yv)| *qv -= a[i] * yv);
    }
    if m > 0 {
        let gamma = dot(&s[m - 1], &y[m - 1]) / dot(&y[m - 1], &y[m - 1]);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for i in 0..m {
        let b = rho[i] * dot(&y[i], &q);
        q.iter_mut().zip(&s[i]).for_each(|(qv, sv)| *qv += (a[i] - b) * sv);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;

    fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        (f, g)
    }

    #[test]
    fn rosenbrock_converges() {
        let r = lbfgs_minimize(rosenbrock, vec![-1.2, 1.0], &LbfgsOptions { max_iters: 100, ..Default::default() });
        assert!(r.f <= 1e-8, "{r:?}");
        assert!(r.iterations <= 100);
    }

    #[test]
    fn quadratic_converges() {
        let mut rng = crate::rng::stream_rng(3, 0);
        let n = 50;
        let q = crate::model::random_orthonormal(n, n, &mut rng);
        let eig = DVector::from_fn(n, |i, _| 10f64.powf(2.0 * i as f64 / (n - 1) as f64));
        let a = &q * DMatrix::from_diagonal(&eig) * q.transpose();
        let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let obj = |x: &[f64]| {
            let x = DVector::from_column_slice(x);
            let ax = &a * &x;
            (x.dot(&ax) - b.dot(&x), (2.0 * ax - &b).as_slice().to_vec())
        };
        // Gradient criterion only: disable the stall test.
        let opts = LbfgsOptions { ftol: 0.0, grad_tol: 1e-9, ..Default::default() };
        let r = lbfgs_minimize(obj, vec![0.0; n], &opts);
        assert!(r.grad_norm <= 1e-6, "{} after {} ({:?})", r.grad_norm, r.iterations, r.status);
        assert!(r.iterations <= 200);
        let xstar = a.clone().lu().solve(&(&b * 0.5)).unwrap();
        assert!((DVector::from_vec(r.x) - xstar).amax() < 1e-6);
    }

    #[test]
    fn stationary_start_returns_immediately() {
        let r = lbfgs_minimize(|x: &[f64]| (x[0] * x[0], vec![2.0 * x[0]]), vec![0.0], &LbfgsOptions::default());
        assert_eq!(r.iterations, 0);
        assert_eq!(r.status, LbfgsStatus::GradientConverged);
    }

    #[test]
    fn history_is_non_increasing() {
        let r = lbfgs_minimize(rosenbrock, vec![-1.2, 1.0], &LbfgsOptions::default());
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn non_finite_start_is_reported() {
        let r = lbfgs_minimize(|_: &[f64]| (f64::NAN, vec![0.0]), vec![1.0], &LbfgsOptions::default());
        assert_eq!(r.status, LbfgsStatus::NonFiniteStart);
    }

    #[test]
    fn survives_non_finite_regions() {
        // f = x - ln(x), minimum at 1; undefined for x <= 0.
        let f = |x: &[f64]| {
            if x[0] <= 0.0 {
                (f64::INFINITY, vec![f64::NAN])
            } else {
                (x[0] - x[0].ln(), vec![1.0 - 1.0 / x[0]])
            }
        };
        let r = lbfgs_minimize(f, vec![5.0], &LbfgsOptions::default());
        assert!((r.x[0] - 1.0).abs() < 1e-4, "{r:?}");
    }
}
