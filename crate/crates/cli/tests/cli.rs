use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hodlr-gp"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn hodlr-gp")
}

fn write_1d(path: &Path, n: usize, seed: u64) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut s = String::from("x,y\n");
    for _ in 0..n {
        let x: f64 = rng.random();
        let y = (6.0 * x).sin() + 0.1 * (rng.random::<f64>() - 0.5);
        s.push_str(&format!("{x},{y}\n"));
    }
    fs::write(path, s).unwrap();
}

fn write_2d(path: &Path, n: usize, seed: u64) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut s = String::from("x1,x2,y\n");
    for _ in 0..n {
        let (a, b): (f64, f64) = (4.0 * rng.random::<f64>(), 4.0 * rng.random::<f64>());
        let y = a.sin() * b.cos() + 0.2 * (rng.random::<f64>() - 0.5);
        s.push_str(&format!("{a},{b},{y}\n"));
    }
    fs::write(path, s).unwrap();
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn fit_row_count_and_holdout_size() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_1d(&data, 95, 1);
    let out = dir.path().join("out");
    let o = run(&[
        "fit",
        "--data",
        p(&data),
        "--out-dir",
        p(&out),
        "--iters",
        "60",
        "--burn-in",
        "11",
        "--thin",
        "4",
        "--holdout",
        "0.1",
        "--eps",
        "1e-8",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let chain = fs::read_to_string(out.join("chain.csv")).unwrap();
    assert_eq!(chain.lines().count() - 1, (60 - 11) / 4);
    let s = summary(&out);
    assert_eq!(s["n_holdout"], 10);
    assert_eq!(s["n_train"], 85);
    assert!(s["mspe"].as_f64().unwrap() < 0.1);
    let preds = fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().next().unwrap(), "x_1,mean,lower95,upper95");
    assert_eq!(preds.lines().count() - 1, 10);
}

#[test]
fn fit_artifacts_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_1d(&data, 120, 2);
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "eps = 1e-8\niters = 40\nburn_in = 10\nseed = 5\nrecord_f = true\nholdout = 0.2\n",
    )
    .unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&["fit", "--config", p(&cfg), "--data", p(&data), "--out-dir", p(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["chain.csv", "predictions.csv", "summary.json", "metadata.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let seq = dir.path().join("seq");
    let o = run(&[
        "fit",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out-dir",
        p(&seq),
        "--sequential",
    ]);
    assert!(o.status.success());
    assert_eq!(
        fs::read(a.join("chain.csv")).unwrap(),
        fs::read(seq.join("chain.csv")).unwrap()
    );
}

#[test]
fn fit_tensor_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_2d(&data, 150, 3);
    let out = dir.path().join("out");
    let o = run(&[
        "fit-tensor",
        "--data",
        p(&data),
        "--out-dir",
        p(&out),
        "--iters",
        "40",
        "--burn-in",
        "20",
        "--holdout",
        "0.1",
        "--eps",
        "1e-8",
        "--grid-size",
        "5",
        "--n-bases",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&out);
    assert_eq!(s["n_holdout"], 15);
    assert_eq!(s["retained"], 20);
    let header = fs::read_to_string(out.join("chain.csv")).unwrap();
    assert!(header.starts_with("iter,tau,beta_1,beta_2,rho_1_1,rho_1_2,rho_2_1,rho_2_2,s_1"));
}

#[test]
fn fit_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    fs::write(&data, "x,y\n0.1,1.0\n0.2,oops\n").unwrap();
    let o = run(&["fit", "--data", p(&data), "--out-dir", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("row 3") && err.contains("column 2"), "{err}");

    let data2 = dir.path().join("d2.csv");
    write_2d(&data2, 20, 4);
    let o = run(&["fit", "--data", p(&data2)]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["fit", "--data", p(&data), "--holdout", "1.0"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("holdout"));
}

#[test]
fn validate_passes_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&[
            "validate",
            "--out-dir",
            p(out),
            "--validate-ns",
            "40,60",
            "--validate-eps",
            "1e-9,1e-11",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let csv = fs::read_to_string(a.join("validation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",pass")), "{csv}");
    assert_eq!(csv, fs::read_to_string(b.join("validation.csv")).unwrap());
}

#[test]
fn validate_strict_names_admissibility_condition() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "validate",
        "--out-dir",
        p(dir.path()),
        "--validate-ns",
        "50",
        "--validate-eps",
        "1e-2",
        "--strict",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ε < σ_min(K)/n²"));
}

#[test]
fn bench_single_size_slope_is_na() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "bench",
        "--out-dir",
        p(dir.path()),
        "--sizes",
        "256",
        "--bench-iters",
        "5",
        "--eps",
        "1e-8",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("slope: n/a"));
    let s: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("bench_summary.json")).unwrap()).unwrap();
    assert_eq!(s["sampling_slope"], "n/a");
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn bench_two_sizes_reports_slope() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "bench",
        "--out-dir",
        p(dir.path()),
        "--sizes",
        "256,512",
        "--bench-iters",
        "5",
        "--eps",
        "1e-8",
    ]);
    assert!(o.status.success());
    let s: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("bench_summary.json")).unwrap()).unwrap();
    assert!(s["sampling_slope"].is_f64());
}
