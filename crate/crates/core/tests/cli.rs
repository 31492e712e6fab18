use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn spotvol(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spotvol"))
        .args(args)
        .env("SPOTVOL_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = spotvol(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path -> bytes for every file under `dir`.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Trees equal apart from the run manifests, which echo the output path.
fn assert_same_outputs(a: &Path, b: &Path) {
    let (ta, tb) = (tree(a), tree(b));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, va) in &ta {
        if k == Path::new("manifest.json") {
            continue;
        }
        assert!(va == &tb[k], "{} differs", k.display());
    }
}

fn simulate(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("sim");
    let mut args = vec![
        "simulate",
        "--p",
        "8",
        "--seed",
        "7",
        "--tau-count",
        "3",
        "--out",
        s(&out),
    ];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

#[test]
fn simulate_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        ok(&[
            "simulate",
            "--p",
            "5",
            "--seed",
            "3",
            "--sampling",
            "async",
            "--out",
            s(out),
        ]);
    }
    assert_same_outputs(&a, &b);
    assert_eq!(fs::read_dir(a.join("ticks")).unwrap().count(), 5);
    let truth: Value = serde_json::from_slice(&fs::read(a.join("truth/manifest.json")).unwrap()).unwrap();
    assert_eq!(truth["p"], 5);
    assert_eq!(truth["tau_list"].as_array().unwrap().len(), 10);
}

#[test]
fn missing_p_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = spotvol(&["simulate", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--p"));
}

#[test]
fn bad_values_exit_2() {
    let tmp = TempDir::new().unwrap();
    let out = spotvol(&["simulate", "--p", "5", "--k", "9", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = spotvol(&[
        "simulate",
        "--p",
        "5",
        "--noise",
        "generalized",
        "--beta",
        "0.5",
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_threshold_hard_equals_naive() {
    let tmp = TempDir::new().unwrap();
    let sim = simulate(tmp.path(), &[]);
    let ticks = sim.join("ticks");
    let common = ["--h", "0.08", "--taus", "0.3,0.5"];
    let none = tmp.path().join("none");
    let hard = tmp.path().join("hard");
    let mut a = vec!["estimate", "--ticks", s(&ticks), "--shrink", "none", "--out", s(&none)];
    a.extend_from_slice(&common);
    ok(&a);
    let mut b = vec![
        "estimate",
        "--ticks",
        s(&ticks),
        "--shrink",
        "hard",
        "--c-rho",
        "0",
        "--out",
        s(&hard),
    ];
    b.extend_from_slice(&common);
    ok(&b);
    for tau in ["tau_000", "tau_001"] {
        for f in ["sigma_hat_x.csv", "sigma_hat_u.csv", "loadings.csv"] {
            let x = fs::read(none.join(tau).join(f)).unwrap();
            let y = fs::read(hard.join(tau).join(f)).unwrap();
            assert!(x == y, "{tau}/{f} differs");
        }
    }
}

#[test]
fn tau_outside_bandwidth_range_is_refused() {
    let tmp = TempDir::new().unwrap();
    let sim = simulate(tmp.path(), &[]);
    let ticks = sim.join("ticks");
    let out = tmp.path().join("est");
    let r = spotvol(&[
        "estimate",
        "--ticks",
        s(&ticks),
        "--h",
        "0.1",
        "--taus",
        "0.05",
        "--out",
        s(&out),
    ]);
    assert_eq!(r.status.code(), Some(2));
    ok(&[
        "estimate",
        "--ticks",
        s(&ticks),
        "--h",
        "0.1",
        "--taus",
        "0.05",
        "--allow-boundary",
        "--out",
        s(&out),
    ]);
    let summary: Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["taus"][0]["in_bandwidth_range"], false);
}

#[test]
fn malformed_ticks_report_line_numbers() {
    let tmp = TempDir::new().unwrap();
    let f = tmp.path().join("bad.csv");
    fs::write(&f, "asset_id,time,log_price\n0,0.1,1.0\n0,0.2,abc\n").unwrap();
    let r = spotvol(&["estimate", "--ticks", s(&f), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(r.status.code(), Some(2));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("bad.csv:3:"), "{err}");
}

#[test]
fn noiseless_fixed_k_estimate_tracks_truth() {
    let tmp = TempDir::new().unwrap();
    let sim = simulate(tmp.path(), &["--sigma-eps", "0"]);
    let est = tmp.path().join("est");
    ok(&[
        "estimate",
        "--ticks",
        s(&sim.join("ticks")),
        "--fixed-k",
        "3",
        "--tau-count",
        "3",
        "--out",
        s(&est),
    ]);
    let report = tmp.path().join("report.json");
    let out = ok(&[
        "evaluate",
        "--truth",
        s(&sim.join("truth")),
        "--estimates",
        s(&est),
        "--out",
        s(&report),
    ]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("MRN_X"), "{text}");
    let r: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    let mrn = r["mrn_x"].as_f64().unwrap();
    // relative error of a spot estimate from a few dozen increments
    assert!(mrn.is_finite() && mrn < 1.0, "MRN_X = {mrn}");
}

#[test]
fn manifest_replays_bitwise() {
    let tmp = TempDir::new().unwrap();
    let sim = simulate(tmp.path(), &[]);
    let first = tmp.path().join("first");
    ok(&[
        "estimate",
        "--ticks",
        s(&sim.join("ticks")),
        "--shrink",
        "soft",
        "--tau-count",
        "2",
        "--out",
        s(&first),
    ]);
    let manifest: Value = serde_json::from_slice(&fs::read(first.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "estimate");
    assert_eq!(manifest["args"]["shrink"], "soft");
    assert!(manifest["resolved"].is_object());

    let second = tmp.path().join("second");
    ok(&[
        "estimate",
        "--config",
        s(&first.join("manifest.json")),
        "--out",
        s(&second),
    ]);
    assert_same_outputs(&first, &second);
}

#[test]
fn flat_config_file_with_override() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# small run\np = 4\nseed = 9\nsigma_eps = 0.1\ntau_count = 2\n").unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["simulate", "--config", s(&cfg), "--p", "6", "--out", s(&b)]);
    assert_eq!(fs::read_dir(a.join("ticks")).unwrap().count(), 4);
    assert_eq!(fs::read_dir(b.join("ticks")).unwrap().count(), 6);
    let m: Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["args"]["sigma-eps"], 0.1);
}

#[test]
fn thread_count_does_not_change_tables() {
    let tmp = TempDir::new().unwrap();
    let run = |threads: &str, out: &Path| {
        let r = Command::new(env!("CARGO_BIN_EXE_spotvol"))
            .args([
                "reproduce-tables",
                "--p",
                "10",
                "--sigma-eps",
                "0.05",
                "--modes",
                "sync",
                "--replications",
                "3",
                "--cv-reps",
                "1",
                "--tau-count",
                "3",
                "--out",
                s(out),
            ])
            .env("SPOTVOL_THREADS", threads)
            .output()
            .unwrap();
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    };
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run("1", &a);
    run("4", &b);
    assert_same_outputs(&a, &b);
    let t1 = fs::read_to_string(a.join("table1.csv")).unwrap();
    assert!(t1.starts_with("p,sigma_eps,Naive,SCAD,A-Lasso,Soft,Hard"), "{t1}");
}
