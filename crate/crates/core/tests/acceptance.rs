//! Acceptance checks, one line per criterion.
//!
//! Criteria 1-4 are exactness properties and fail the run when violated.
//! Criteria 5-8 are statistical or timing reproductions; they are reported
//! but only fail the run when `DGMM_ACCEPTANCE_STRICT=1` is set.

use std::process::ExitCode;

use dgmm_core::bell::binomial;
use dgmm_core::estimator::{dgmm_objective_gradient, dgmm_weights, Method, WeightVector};
use dgmm_core::experiment::bench::{benchmark_scaling, BenchConfig};
use dgmm_core::experiment::{median, run_experiment, ExperimentConfig, ExperimentResult};
use dgmm_core::implicit::{alpha, alpha_with_gradients, beta, beta_gradients};
use dgmm_core::kernel::{exact_kernel_sums, gram_rank, nystrom_kernel_sums, relative_error, NystromFactor, NystromOptions};
use dgmm_core::model::{
    generate_ground_truth, pack, random_orthonormal, sample_mixture, unpack_slice, GroundTruthSpec, Layout, MixtureParams, RankMode,
    SampleSet,
};
use dgmm_core::rng::stream_rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use web_time::Instant;

struct Outcome {
    pass: bool,
    detail: String,
}

/// Id, name, whether a failure always fails the run, check.
type Criterion = (usize, &'static str, bool, fn() -> Outcome);

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------------------
// Independent oracles

/// `E[y_{i_1} ... y_{i_k}]` for `y ~ N(mu, Sigma)` by Gaussian integration by
/// parts: `E[y_a f] = mu_a E[f] + sum_b Sigma_ab E[d f / d y_b]`.
fn gaussian_product_moment(mu: &[f64], sigma: &DMatrix<f64>, idx: &[usize]) -> f64 {
    let Some((&a, rest)) = idx.split_first() else {
        return 1.0;
    };
    let mut total = mu[a] * gaussian_product_moment(mu, sigma, rest);
    for (p, &b) in rest.iter().enumerate() {
        let mut without: Vec<usize> = rest.to_vec();
        without.remove(p);
        total += sigma[(a, b)] * gaussian_product_moment(mu, sigma, &without);
    }
    total
}

fn multi_index(mut flat: usize, d: usize, k: usize) -> Vec<usize> {
    let mut idx = vec![0; k];
    for slot in idx.iter_mut().rev() {
        *slot = flat % d;
        flat /= d;
    }
    idx
}

/// Row-major order-`k` mixture moment tensor.
fn oracle_moment(params: &MixtureParams, k: usize) -> Vec<f64> {
    let d = params.dim();
    let covs: Vec<DMatrix<f64>> = (0..params.components()).map(|j| &params.factors()[j] * params.factors()[j].transpose()).collect();
    (0..d.pow(k as u32))
        .map(|flat| {
            let idx = multi_index(flat, d, k);
            (0..params.components())
                .map(|j| params.weights()[j] * gaussian_product_moment(params.centers()[j].as_slice(), &covs[j], &idx))
                .sum()
        })
        .collect()
}

fn oracle_outer_power(y: &[f64], k: usize) -> Vec<f64> {
    let d = y.len();
    (0..d.pow(k as u32)).map(|flat| multi_index(flat, d, k).iter().map(|&i| y[i]).product()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_params<R: Rng>(rng: &mut R, k: usize, d: usize, r: usize) -> MixtureParams {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let centers = (0..k).map(|_| DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0))).collect();
    let factors = (0..k).map(|_| DMatrix::from_fn(d, r, |_, _| rng.random_range(-0.8..0.8))).collect();
    MixtureParams::new(raw.iter().map(|w| w / s).collect(), centers, factors).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------------------
// 1. alpha and beta against explicit tensors

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = stream_rng(101, 0);
    let mut worst_alpha = 0.0f64;
    let mut worst_beta = 0.0f64;
    for _ in 0..100 {
        let d = rng.random_range(1..=6);
        let k = rng.random_range(1..=3);
        let r = rng.random_range(1..=2usize).min(d);
        let l = rng.random_range(1..=4);
        let params = random_params(&mut rng, k, d, r);
        let y: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = alpha(&params, l).unwrap();
        let b = beta(&params, &y, l).unwrap();
        for order in 1..=l {
            let m = oracle_moment(&params, order);
            worst_alpha = worst_alpha.max(rel(a[order], dot(&m, &m)));
            worst_beta = worst_beta.max(rel(b[order], dot(&m, &oracle_outer_power(&y, order))));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_alpha <= 1e-10 && worst_beta <= 1e-10 && secs < 5.0;
    outcome(pass, format!("max rel err alpha {worst_alpha:.2e}, beta {worst_beta:.2e} (tol 1e-10), {secs:.2} s (< 5 s)"))
}

// ---------------------------------------------------------------------------
// 2. Analytic gradients against central differences

fn central_difference<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn vec_rel(approx: &[f64], exact: &[f64]) -> f64 {
    let num: f64 = approx.iter().zip(exact).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = exact.iter().map(|b| b * b).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let h = 1e-5;
    let tau = 1.0;
    let mut rng = stream_rng(202, 0);
    let (mut wa, mut wb, mut wq) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let d = rng.random_range(2..=5);
        let k = rng.random_range(1..=3);
        let r = rng.random_range(1..=2usize);
        let l = rng.random_range(2..=4);
        let params = random_params(&mut rng, k, d, r);
        let layout = Layout::of(&params);
        let x = pack(&params, tau).unwrap().values;
        let y: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();

        let ag = alpha_with_gradients(&params, l).unwrap();
        let bg = beta_gradients(&params, &y, l).unwrap();
        for (order, beta_grad) in bg.iter().enumerate().skip(1) {
            let fa = |v: &[f64]| alpha(&unpack_slice(v, layout, tau).unwrap(), l).unwrap()[order];
            wa = wa.max(vec_rel(&central_difference(fa, &x, h), &ag.gradients[order].to_packed(params.weights(), tau)));
            let fb = |v: &[f64]| beta(&unpack_slice(v, layout, tau).unwrap(), &y, l).unwrap()[order];
            wb = wb.max(vec_rel(&central_difference(fb, &x, h), &beta_grad.to_packed(params.weights(), tau)));
        }

        let truth = random_params(&mut rng, k, d, r);
        let data = sample_mixture(&truth, 40, rng.random()).unwrap();
        let cache = exact_kernel_sums(&data, l).unwrap();
        let w = WeightVector::new((0..l).map(|_| rng.random_range(0.1..2.0)).collect()).unwrap();
        let theta = pack(&params, tau).unwrap();
        let (_, g) = dgmm_objective_gradient(&theta, &w, &data, &cache).unwrap();
        let fq = |v: &[f64]| {
            let t = dgmm_core::model::PackedTheta { values: v.to_vec(), ..theta.clone() };
            dgmm_objective_gradient(&t, &w, &data, &cache).unwrap().0
        };
        wq = wq.max(vec_rel(&central_difference(fq, &x, h), &g));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = wa <= 1e-5 && wb <= 1e-5 && wq <= 1e-5 && secs < 30.0;
    outcome(pass, format!("max rel err alpha {wa:.2e}, beta {wb:.2e}, Q {wq:.2e} (tol 1e-5), {secs:.2} s (< 30 s)"))
}

// ---------------------------------------------------------------------------
// 3. Implicit weights against an explicitly assembled S

fn oracle_weights(params: &MixtureParams, data: &SampleSet, l: usize) -> Vec<f64> {
    let moments: Vec<Vec<f64>> = (1..=l).map(|k| oracle_moment(params, k)).collect();
    let q: usize = moments.iter().map(Vec::len).sum();
    let mut s = DMatrix::<f64>::zeros(q, q);
    for y in data.rows() {
        let g: Vec<f64> = moments
            .iter()
            .enumerate()
            .flat_map(|(i, m)| {
                let yk = oracle_outer_power(y, i + 1);
                m.iter().zip(yk).map(|(a, b)| a - b).collect::<Vec<_>>()
            })
            .collect();
        let g = DVector::from_vec(g);
        s.ger(1.0, &g, &g, 1.0);
    }
    s /= data.len() as f64;
    let mut out = Vec::new();
    let mut start = 0;
    for m in &moments {
        let block = start..start + m.len();
        let num: f64 = block.clone().map(|i| s[(i, i)]).sum();
        let den: f64 = block.map(|i| s.row(i).iter().map(|v| v * v).sum::<f64>()).sum();
        out.push(num / den);
        start += m.len();
    }
    out
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let spec = GroundTruthSpec {
        k: 2,
        d: 4,
        r_max: 2,
        rank_mode: RankMode::Identical,
        lambda_min: 25.0,
        lambda_max: 100.0,
        weights: Some(vec![0.4, 0.6]),
        seed: 303,
    };
    let truth = generate_ground_truth(&spec).unwrap();
    let data = sample_mixture(&truth, 200, 304).unwrap();
    let cache = exact_kernel_sums(&data, 3).unwrap();
    let init = dgmm_core::model::default_initialization(2, 4, 2, 305).unwrap();
    let mut worst = 0.0f64;
    for params in [&truth, &init] {
        let w = dgmm_weights(params, &data, &cache, 3).unwrap();
        for (a, b) in w.as_slice().iter().zip(oracle_weights(params, &data, 3)) {
            worst = worst.max(rel(*a, b));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-8 && secs < 10.0, format!("max rel err {worst:.2e} (tol 1e-8), {secs:.2} s (< 10 s)"))
}

// ---------------------------------------------------------------------------
// 4. Nyström kernel sums

fn subspace_data(n: usize, d: usize, r: usize, seed: u64) -> SampleSet {
    let mut rng = stream_rng(seed, 0);
    let basis = random_orthonormal(d, r, &mut rng);
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        let z = DVector::from_fn(r, |_, _| rng.random_range(-1.0..1.0));
        out.extend((&basis * z).iter());
    }
    SampleSet::from_rows(n, d, out).unwrap()
}

fn concat(sets: &[SampleSet]) -> SampleSet {
    let d = sets[0].dim();
    let rows: Vec<f64> = sets.iter().flat_map(|s| s.as_slice().to_vec()).collect();
    SampleSet::from_rows(rows.len() / d, d, rows).unwrap()
}

fn criterion_4() -> Outcome {
    let start = Instant::now();

    // (a) every point a landmark
    let mut rng = stream_rng(404, 0);
    let data = SampleSet::from_rows(40, 3, (0..120).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let exact = exact_kernel_sums(&data, 2).unwrap();
    let full = nystrom_kernel_sums(&data, 2, &NystromOptions { landmarks: 40, seed: 1, jitter: 0.0, tol: 1e-12 }).unwrap();
    let err_a = (1..=4).map(|k| relative_error(full.sums(k), exact.sums(k))).fold(0.0, f64::max);

    // (b) subspace data with m = C(R + k - 1, k), unregularized as in (a)
    let mut err_b = 0.0f64;
    for (r, seed) in [(2, 1u64), (3, 2)] {
        let data = subspace_data(300, 6, r, 410 + seed);
        let exact = exact_kernel_sums(&data, 3).unwrap();
        for k in 1..=6 {
            let m = binomial(r + k - 1, k) as usize;
            let opts = NystromOptions { landmarks: m, seed: 420 + k as u64, jitter: 0.0, tol: 1e-10 };
            let f = NystromFactor::build(&data, k, &opts).unwrap();
            err_b = err_b.max(relative_error(&f.row_sums().unwrap(), exact.sums(k)));
        }
    }

    // (c) Gram rank within the algebraic bound
    let mut rank_ok = true;
    let mut rank_checks = 0;
    for (r, seed) in [(1, 1u64), (2, 2), (3, 3)] {
        let single = subspace_data(120, 6, r, 430 + seed);
        let union = concat(&[subspace_data(80, 6, r, 440 + seed), subspace_data(80, 6, r, 450 + seed)]);
        for k in 1..=4 {
            let bound = binomial(r + k - 1, k) as usize;
            rank_ok &= gram_rank(&single, k, 1e-8).unwrap() <= bound;
            rank_ok &= gram_rank(&union, k, 1e-8).unwrap() <= 2 * bound;
            rank_checks += 2;
        }
    }

    // (d) median error over 20 seeds, non-increasing in m, at every order 1..=2L
    let truth = generate_ground_truth(&GroundTruthSpec {
        k: 2,
        d: 10,
        r_max: 2,
        rank_mode: RankMode::Identical,
        lambda_min: 25.0,
        lambda_max: 100.0,
        weights: Some(vec![0.4, 0.6]),
        seed: 460,
    })
    .unwrap();
    let ms = [4usize, 8, 16, 32];
    let orders = 1..=6usize;
    let mut errs = vec![vec![Vec::new(); ms.len()]; 7];
    for seed in 0..20u64 {
        let data = sample_mixture(&truth, 2000, 470 + seed).unwrap();
        let exact = exact_kernel_sums(&data, 3).unwrap();
        for (mi, &m) in ms.iter().enumerate() {
            let approx = nystrom_kernel_sums(&data, 3, &NystromOptions::new(m, 480 + seed)).unwrap();
            for k in orders.clone() {
                errs[k][mi].push(relative_error(approx.sums(k), exact.sums(k)));
            }
        }
    }
    let mut monotone = true;
    let mut curves = Vec::new();
    for k in orders {
        let med: Vec<f64> = errs[k].iter().map(|e| median(e).unwrap()).collect();
        monotone &= med.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-12);
        curves.push(format!("k={k}:[{}]", med.iter().map(|e| format!("{e:.1e}")).collect::<Vec<_>>().join(",")));
    }

    let secs = start.elapsed().as_secs_f64();
    let pass = err_a <= 1e-8 && err_b <= 1e-6 && rank_ok && monotone && secs < 120.0;
    outcome(
        pass,
        format!(
            "(a) {err_a:.1e} (tol 1e-8); (b) {err_b:.1e} (tol 1e-6); (c) {} of {rank_checks} ranks within bound; (d) medians {} {}; {secs:.1} s (< 120 s)",
            if rank_ok { rank_checks } else { 0 },
            if monotone { "non-increasing" } else { "NOT non-increasing" },
            curves.join(" ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 5-7. Reproductions

fn experiment(text: &str, methods: &[Method]) -> ExperimentResult {
    let mut config = ExperimentConfig::from_toml_str(text).unwrap();
    config.estimators.retain(|e| methods.contains(&e.method));
    config.repetitions = 1;
    run_experiment(&config, None).unwrap().result
}

fn sigma_errors(result: &ExperimentResult, method: Method, seeds: &[u64]) -> Vec<f64> {
    seeds.iter().map(|&s| result.cell(method, s).and_then(|c| c.metrics).map_or(f64::INFINITY, |m| m.err_sigma)).collect()
}

fn medians(result: &ExperimentResult, method: Method) -> (f64, f64, f64) {
    let s = result.summary(method).unwrap();
    let get = |x: &Option<dgmm_core::experiment::Spread>| x.as_ref().map_or(f64::INFINITY, |s| s.median);
    (get(&s.err_pi), get(&s.err_mu), get(&s.err_sigma))
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let result = experiment(include_str!("../../../configs/table2.toml"), &[Method::MmImplicit, Method::Dgmm]);
    let seeds = result.config.seeds.clone();
    let (pi, mu, sigma) = medians(&result, Method::Dgmm);
    let dg = sigma_errors(&result, Method::Dgmm, &seeds);
    let mm = sigma_errors(&result, Method::MmImplicit, &seeds);
    let wins = dg.iter().zip(&mm).filter(|(a, b)| a <= b).count();
    let secs = start.elapsed().as_secs_f64();
    let pass = pi <= 0.02 && mu <= 0.1 && sigma <= 0.05 && wins >= 3 && secs <= 600.0;
    outcome(
        pass,
        format!(
            "DGMM medians err_pi {pi:.4} (<= 0.02), err_mu {mu:.4} (<= 0.1), err_Sigma {sigma:.4} (<= 0.05); DGMM err_Sigma <= MM on {wins}/5 seeds (>= 3); {secs:.0} s (<= 600 s)"
        ),
    )
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let result = experiment(include_str!("../../../configs/table4.toml"), &[Method::Dgmm]);
    let (_, mu, sigma) = medians(&result, Method::Dgmm);
    let secs = start.elapsed().as_secs_f64();
    let pass = sigma <= 0.06 && mu <= 0.15 && secs <= 900.0;
    outcome(pass, format!("DGMM medians err_Sigma {sigma:.4} (<= 0.06), err_mu {mu:.4} (<= 0.15); {secs:.0} s (<= 900 s)"))
}

const CONSISTENCY: &str = r#"
name = "consistency"
n = 1000
seeds = [1, 2, 3, 4, 5]
truth_seed = 17
methods = ["dgmm"]
repetitions = 1

[truth]
k = 2
d = 6
r_max = 2

[estimator]
max_order = 3
max_steps = 10
max_iters = 200
"#;

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let mut med = Vec::new();
    for n in [1_000usize, 10_000, 100_000] {
        let text = CONSISTENCY.replace("n = 1000", &format!("n = {n}"));
        let result = experiment(&text, &[Method::Dgmm]);
        med.push(medians(&result, Method::Dgmm).2);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = med.windows(2).all(|w| w[1] <= w[0]) && secs <= 600.0;
    outcome(
        pass,
        format!(
            "median DGMM err_Sigma at N = 1e3, 1e4, 1e5: {:.4}, {:.4}, {:.4} (non-increasing); {secs:.0} s (<= 600 s)",
            med[0], med[1], med[2]
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. Per-evaluation cost against d

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let cfg = BenchConfig { dims: vec![4, 8, 16, 32], n: 5000, k: 2, r_max: 2, max_order: 3, ..Default::default() };
    let rows = benchmark_scaling(&cfg).unwrap();
    let implicit: Vec<f64> = rows.iter().map(|r| r.implicit_eval_s).collect();
    let ratios: Vec<f64> = implicit.windows(2).map(|w| w[1] / w[0]).collect();
    let sub_quadratic = ratios.iter().all(|&r| r <= 4.0);
    let mut faster = true;
    let mut explicit_ratios = Vec::new();
    for w in rows.windows(2) {
        if let (Some(a), Some(b)) = (w[0].explicit_eval_s, w[1].explicit_eval_s) {
            let er = b / a;
            faster &= er > w[1].implicit_eval_s / w[0].implicit_eval_s;
            explicit_ratios.push(er);
        }
    }
    faster &= !explicit_ratios.is_empty();
    let secs = start.elapsed().as_secs_f64();
    let fmt = |v: &[f64]| v.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(", ");
    outcome(
        sub_quadratic && faster && secs <= 300.0,
        format!(
            "implicit doubling ratios [{}] (<= 4); explicit doubling ratios [{}] (> implicit: {faster}); {secs:.0} s (<= 300 s)",
            fmt(&ratios),
            fmt(&explicit_ratios)
        ),
    )
}

fn main() -> ExitCode {
    // Keep `cargo test -- --list` and filtered runs cheap.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let strict = std::env::var("DGMM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let only: Option<Vec<usize>> =
        std::env::var("DGMM_ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [Criterion; 8] = [
        (1, "oracle equivalence", true, criterion_1),
        (2, "gradient correctness", true, criterion_2),
        (3, "weight equivalence", true, criterion_3),
        (4, "Nystrom correctness", true, criterion_4),
        (5, "identical-rank reproduction", false, criterion_5),
        (6, "non-identical-rank reproduction", false, criterion_6),
        (7, "consistency in N", false, criterion_7),
        (8, "per-evaluation complexity", false, criterion_8),
    ];
    let mut failed = Vec::new();
    for (id, name, hard, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let o = run();
        println!("criterion {id} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass && (hard || strict) {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("failing criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
