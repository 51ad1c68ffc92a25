//! Complete Bell polynomials and binomial coefficients.
//!
//! `B_k(x_1, ..., x_k)` maps the first `k` cumulants of a scalar random
//! variable to its `k`-th raw moment.

/// Binomial coefficient as a float (exact for the small arguments used here).
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Pascal triangle rows `0..=n`, `table[a][b] = C(a, b)`.
pub fn binomial_table(n: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    for a in 0..=n {
        let mut row = vec![1.0; a + 1];
        for b in 1..a {
            row[b] = rows[a - 1][b - 1] + rows[a - 1][b];
        }
        rows.push(row);
    }
    rows
}

/// `[B_0, B_1, ..., B_n]` for cumulants `x = [x_1, ..., x_n]`, via
/// `B_k = sum_{l=0}^{k-1} C(k-1, l) B_{k-1-l} x_{l+1}`.
pub fn bell_complete(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let c = binomial_table(n);
    let mut b = vec![0.0; n + 1];
    b[0] = 1.0;
    for k in 1..=n {
        b[k] = (0..k).map(|l| c[k - 1][l] * b[k - 1 - l] * x[l]).sum();
    }
    b
}

/// `[B_0, ..., B_n]` at `(a, b, 0, 0, ...)`, i.e. the raw moments of
/// `N(a, b)`: `B_k = a B_{k-1} + (k-1) b B_{k-2}`.
pub fn bell_two_arg(a: f64, b: f64, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n + 1];
    bell_two_arg_into(a, b, &mut out);
    out
}

/// In-place variant of [`bell_two_arg`] filling `out[0..]`.
pub fn bell_two_arg_into(a: f64, b: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = a;
    }
    for k in 2..out.len() {
        out[k] = a * out[k - 1] + (k - 1) as f64 * b * out[k - 2];
    }
}
