use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
name = "small"
n = 400
seeds = [3]
methods = ["mm-implicit", "dgmm"]
repetitions = 1

[truth]
k = 2
d = 3
r_max = 1
weights = [0.4, 0.6]

[estimator]
max_order = 3
max_steps = 2
max_iters = 30
"#;

fn dgmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgmm")).args(args).output().expect("failed to launch dgmm")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn generate_then_fit_then_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let data = dir.path().join("data");
    let o = dgmm(&["generate", "--config", s(&cfg), "--seed", "5", "--out", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["truth.json", "init.json", "samples.csv", "labels.csv"] {
        assert!(data.join(f).is_file(), "missing {f}");
    }
    let samples = std::fs::read_to_string(data.join("samples.csv")).unwrap();
    assert_eq!(samples.lines().filter(|l| !l.starts_with('#')).count(), 401);

    let fit = dir.path().join("fit");
    let o = dgmm(&[
        "fit",
        "--config",
        s(&cfg),
        "--seed",
        "5",
        "--data",
        s(&data.join("samples.csv")),
        "--truth",
        s(&data.join("truth.json")),
        "--method",
        "mm-implicit",
        "--threads",
        "1",
        "--out",
        s(&fit),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let record: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(fit.join("fit.json")).unwrap()).unwrap();
    assert_eq!(record["method"], "mm-implicit");
    assert!(record["metrics"]["err_sigma"].as_f64().unwrap().is_finite());

    let scatter = dir.path().join("scatter");
    let o = dgmm(&[
        "export-scatter",
        "--data",
        s(&data.join("samples.csv")),
        "--params",
        s(&data.join("truth.json")),
        "--params",
        s(&fit.join("fit.json")),
        "--labels",
        s(&data.join("labels.csv")),
        "--out",
        s(&scatter),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(scatter.join("scatter.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("center,truth")));
    assert!(csv.lines().any(|l| l.starts_with("center,fit")));
    assert!(std::fs::read_to_string(scatter.join("scatter.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn experiment_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("exp");
    let o = dgmm(&["experiment", "--config", s(&cfg), "--out", s(&out), "--scatter"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("mm-implicit") && stdout.contains("dgmm"));
    for f in ["result.json", "summary.csv", "traces/dgmm-seed3.json", "traces/mm-implicit-seed3.json", "scatter/seed3/scatter.svg"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }

    let only = dir.path().join("only");
    let o = dgmm(&["experiment", "--config", s(&cfg), "--method", "dgmm", "--seed", "9", "--out", s(&only)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(only.join("traces/dgmm-seed9.json").is_file());
    assert!(!only.join("traces/mm-implicit-seed9.json").exists());
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bench.toml");
    std::fs::write(&cfg, "dims = [3, 4]\nn = 200\nmin_batch_s = 0.001\n").unwrap();
    let o = dgmm(&["bench", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("d,n,implicit_eval_s"));
}

#[test]
fn failures_exit_nonzero_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");

    let bad = write_config(dir.path(), "name = \"x\"\nn = 10\nbogus = 1\n");
    let o = dgmm(&["experiment", "--config", s(&bad), "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("error:"), "{}", stderr(&o));

    let o = dgmm(&["generate", "--config", s(&dir.path().join("missing.toml")), "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("missing.toml"), "{}", stderr(&o));

    let o = dgmm(&["fit", "--data", s(&dir.path().join("none.csv")), "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("none.csv"), "{}", stderr(&o));

    let o = dgmm(&["fit", "--data", "x.csv", "--method", "newton"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("newton"), "{}", stderr(&o));

    let o = dgmm(&["bench", "--threads", "0", "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--threads"), "{}", stderr(&o));
}
