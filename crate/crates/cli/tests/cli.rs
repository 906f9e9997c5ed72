use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const CSV: &str = "mic,dia,count\n-3,31,4\n-2,29,6\n-2,27,3\n-1,26,8\n-1,24,2\n0,22,7\n0,20,5\n1,18,6\n1,16,4\n2,14,7\n2,12,3\n3,10,5\n";

fn bpcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bpcal")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn dataset(dir: &Path) -> String {
    let p = dir.join("data.csv");
    std::fs::write(&p, CSV).unwrap();
    p.display().to_string()
}

fn quick_fit(dir: &Path, data: &str, out: &str, extra: &[&str]) -> String {
    let out = dir.join(out).display().to_string();
    let mut args = vec!["--out", &out, "fit", data, "--iters", "800", "--burnin", "400", "--thin", "4", "--seed", "7"];
    args.extend_from_slice(extra);
    ok(&bpcal(&args));
    out
}

fn read_json(p: impl AsRef<Path>) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

#[test]
fn fit_writes_artifact_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("rw").display().to_string();
    let stdout = ok(&bpcal(&[
        "--out", &out, "fit", &data, "--model", "spline-rw", "--iters", "800", "--burnin", "400", "--thin", "4", "--seed", "7",
    ]));
    assert!(stdout.contains("acceptance rates"));
    assert!(stdout.contains("lambda"));
    let manifest = read_json(Path::new(&out).join("manifest.json"));
    let files: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f["path"].as_str().unwrap()).collect();
    assert_eq!(files, ["fit.json", "grids.bin", "dataset.csv"]);
    assert_eq!(manifest["seed"], 7);
    let fit = read_json(Path::new(&out).join("fit.json"));
    assert_eq!(fit["config"]["model"], "spline_rw");
    assert_eq!(fit["samples"].as_array().unwrap().len(), 100);
    assert_eq!(manifest["dataset_digest"], fit["dataset_digest"]);
}

#[test]
fn rj_fit_records_knot_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = quick_fit(dir.path(), &data, "rj", &["--model", "spline-rj", "--kmax", "20"]);
    let fit = read_json(Path::new(&out).join("fit.json"));
    assert_eq!(fit["config"]["kmax"], 20);
    for s in fit["samples"].as_array().unwrap() {
        let k = s["n_knots"].as_u64().unwrap();
        assert!((1..=20).contains(&k));
    }
}

#[test]
fn usage_and_io_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let bad = bpcal(&["fit", &data, "--model", "quadratic"]);
    assert_eq!(bad.status.code(), Some(2));
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("logistic4") && err.contains("spline-rw") && err.contains("spline-rj"), "{err}");

    let missing = bpcal(&["breakpoints", dir.path().join("nope").to_str().unwrap(), "--mic-bp", "-1", "1"]);
    assert_eq!(missing.status.code(), Some(1));

    let out = quick_fit(dir.path(), &data, "fit", &[]);
    let inverted = bpcal(&["--out", &out, "breakpoints", &out, "--mic-bp", "1", "-1"]);
    assert_eq!(inverted.status.code(), Some(2));
}

#[test]
fn breakpoint_reports_reuse_the_fit() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let fit = quick_fit(dir.path(), &data, "fit", &[]);
    let rep = dir.path().join("rep").display().to_string();
    let stdout = ok(&bpcal(&["--out", &rep, "breakpoints", &fit, "--mic-bp", "-1", "1", "--loss-grid"]));
    assert!(stdout.contains("MAP"));
    ok(&bpcal(&["--out", &rep, "breakpoints", &fit, "--mic-bp", "0", "2"]));

    let a = std::fs::read_to_string(Path::new(&rep).join("breakpoints_-1_1.csv")).unwrap();
    let b = std::fs::read_to_string(Path::new(&rep).join("breakpoints_0_2.csv")).unwrap();
    assert_eq!(a.lines().next().unwrap(), "d_lower,d_upper,pct,cum_pct");
    assert_ne!(a, b);
    let last: Vec<f64> = a.lines().last().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!(last[3] >= 95.0 - 1e-9);
    let loss = std::fs::read_to_string(Path::new(&rep).join("breakpoints_-1_1_loss.csv")).unwrap();
    // 35 bounds give 35·34/2 admissible pairs.
    assert_eq!(loss.lines().count(), 1 + 595);
}

#[test]
fn a_single_draw_gives_a_one_row_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("one").display().to_string();
    ok(&bpcal(&["--out", &out, "fit", &data, "--iters", "201", "--burnin", "200", "--thin", "1"]));
    let rep = dir.path().join("rep").display().to_string();
    ok(&bpcal(&["--out", &rep, "breakpoints", &out, "--mic-bp", "-1", "1"]));
    let report = read_json(Path::new(&rep).join("breakpoints_-1_1.json"));
    let table = report["table"].as_array().unwrap();
    assert_eq!(table.len(), 1);
    assert_eq!(table[0]["pct"], 100.0);
    assert_eq!(table[0]["cum_pct"], 100.0);
}

#[test]
fn plot_data_invariants() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let fit = quick_fit(dir.path(), &data, "fit", &["--grid-points", "250"]);
    let plots = dir.path().join("plots").display().to_string();
    ok(&bpcal(&["--out", &plots, "plotdata", &fit]));
    for (file, header) in [("curve.csv", "grid,g_median,g_lo,g_hi"), ("density.csv", "grid,f_median,f_lo,f_hi")] {
        let text = std::fs::read_to_string(Path::new(&plots).join(file)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), header);
        let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
        assert_eq!(rows.len(), 250);
        assert!(rows.iter().all(|r| r[2] <= r[1] && r[1] <= r[3]));
    }
    let scatter = std::fs::read_to_string(Path::new(&plots).join("scatter.csv")).unwrap();
    let n: u64 = scatter.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(n, 60);
}

#[test]
fn reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let a = quick_fit(dir.path(), &data, "a", &["--model", "spline-rj"]);
    let b = quick_fit(dir.path(), &data, "b", &["--model", "spline-rj"]);
    for f in ["fit.json", "grids.bin", "dataset.csv"] {
        assert_eq!(std::fs::read(Path::new(&a).join(f)).unwrap(), std::fs::read(Path::new(&b).join(f)).unwrap(), "{f}");
    }
    let (ma, mb) = (read_json(Path::new(&a).join("manifest.json")), read_json(Path::new(&b).join("manifest.json")));
    assert_eq!(ma["files"], mb["files"]);
    assert_eq!(ma["config_digest"], mb["config_digest"]);
}

#[test]
fn simulate_writes_tables_with_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim").display().to_string();
    let stdout = ok(&bpcal(&[
        "--out", &out, "simulate", "scenario1", "--reps", "2", "--n", "200", "--iters", "600", "--burnin", "300", "--thin", "5",
        "--seed", "11",
    ]));
    assert!(stdout.contains("within 1"));
    let bps = std::fs::read_to_string(Path::new(&out).join("breakpoint_summary.csv")).unwrap();
    let header = bps.lines().next().unwrap();
    assert!(header.contains("exact_pct") && header.contains("within1_pct"));
    // Two models × two MIC breakpoint sets.
    assert_eq!(bps.lines().count(), 1 + 4);
    let reps = std::fs::read_to_string(Path::new(&out).join("replicates.csv")).unwrap();
    let lines: Vec<&str> = reps.lines().collect();
    assert!(lines[0].starts_with("scenario,model,replicate,data_seed,chain_seed"));
    assert_eq!(lines.len(), 1 + 2 * 2 * 2);
    assert!(lines[1].starts_with("scenario1,logistic4,0,11,"));
    assert!(Path::new(&out).join("fit_summary.csv").exists());
}

#[test]
fn gap_scenarios_default_to_500_isolates() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gap").display().to_string();
    ok(&bpcal(&[
        "--out", &out, "simulate", "gap1", "--reps", "1", "--iters", "400", "--burnin", "200", "--thin", "5", "--models",
        "logistic4",
    ]));
    let reps = std::fs::read_to_string(Path::new(&out).join("replicates.csv")).unwrap();
    let row: Vec<&str> = reps.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[5], "500");
}

#[test]
fn scenario_files_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("custom.json");
    let json = r#"{"name":"custom","truth":{"type":"linear","intercept":25.0,"slope":-2.0},
        "density":[{"mu":0.0,"sigma":1.5,"weight":1.0}],"n_isolates":150,"sigma_m":0.707,"sigma_d":2.121,
        "mic_breakpoints":[{"lower":-1,"upper":1}]}"#;
    std::fs::write(&file, json).unwrap();
    let out = dir.path().join("sim").display().to_string();
    ok(&bpcal(&[
        "--out", &out, "simulate", file.to_str().unwrap(), "--reps", "1", "--iters", "400", "--burnin", "200", "--thin", "5",
    ]));
    let reps = std::fs::read_to_string(Path::new(&out).join("replicates.csv")).unwrap();
    assert!(reps.lines().nth(1).unwrap().starts_with("custom,"));
}
