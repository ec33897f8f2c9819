use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hetshrink::estimators::{fit_ure, Model};
use hetshrink::simgen::{Example, SimConfig};
use hetshrink::{estimate, HeteroData, Method, MethodConfig};
use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetshrink")).args(args).output().expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_units(dir: &TempDir, name: &str, data: &HeteroData, skip_intercept_row: bool) -> PathBuf {
    let x = data.x().entries();
    let first = usize::from(skip_intercept_row);
    let mut text = String::from("y,var");
    for j in first..x.nrows() {
        text += &format!(",x{}", j + 1 - first);
    }
    text.push('\n');
    for i in 0..data.p() {
        text += &format!("{},{}", data.y()[i], data.a()[i]);
        for j in first..x.nrows() {
            text += &format!(",{}", x[(j, i)]);
        }
        text.push('\n');
    }
    let path = dir.path().join(name);
    fs::write(&path, text).unwrap();
    path
}

fn five_rows(dir: &TempDir) -> PathBuf {
    let path = dir.path().join("five.csv");
    fs::write(&path, "y,var,x1\n1.2,0.5,0.1\n0.4,0.3,-0.7\n2.5,1.0,1.3\n-0.3,0.2,-1.1\n1.9,0.8,0.6\n").unwrap();
    path
}

fn example1(p: usize) -> HeteroData {
    let cfg = SimConfig::study(Example::One, 19);
    let x = cfg.covariates(p).unwrap();
    cfg.replication(&x, 0).unwrap().0
}

fn sidecar(out: &Path) -> Value {
    let mut side = out.as_os_str().to_owned();
    side.push(".json");
    serde_json::from_str(&fs::read_to_string(side).unwrap()).unwrap()
}

fn estimate_objective(dir: &TempDir, input: &Path, method: &str) -> f64 {
    let out = dir.path().join(format!("{method}.csv"));
    let o = run(&["estimate", "--input", path_str(input), "--out", path_str(&out), "--method", method, "--no-intercept"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    sidecar(&out)["objective"].as_f64().unwrap()
}

#[test]
fn estimate_matches_library_bytes() {
    let dir = TempDir::new().unwrap();
    let input = five_rows(&dir);
    let out = dir.path().join("est.csv");
    let o = run(&["estimate", "--input", path_str(&input), "--out", path_str(&out), "--method", "ure", "--model", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let x = hetshrink::DesignMatrix::from_units(&[
        vec![1.0, 0.1],
        vec![1.0, -0.7],
        vec![1.0, 1.3],
        vec![1.0, -1.1],
        vec![1.0, 0.6],
    ])
    .unwrap();
    let data = HeteroData::new(
        nalgebra::DVector::from_vec(vec![1.2, 0.4, 2.5, -0.3, 1.9]),
        nalgebra::DVector::from_vec(vec![0.5, 0.3, 1.0, 0.2, 0.8]),
        x,
    )
    .unwrap();
    let fit = fit_ure(&data, &Model::I).unwrap();
    let side = sidecar(&out);
    match fit.lambda().unwrap() {
        hetshrink::Lambda::Infinite => assert_eq!(side["lambda"], "inf"),
        hetshrink::Lambda::Finite(l) => assert_eq!(side["lambda"].as_f64().unwrap(), l),
    }
    assert_eq!(side["method"], "ure");
    assert!(side["in_L"].is_boolean());

    let lib = estimate(&data, Method::Ure, &MethodConfig::default(), None).unwrap();
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "unit,y,var,theta_hat,shrink_factor");
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[0], (i + 1).to_string());
        assert_eq!(cols[3], lib.theta_hat[i].to_string());
        assert_eq!(cols[4], lib.shrink_factor[i].to_string());
    }
}

#[test]
fn james_stein_guard_exits_three() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("tiny.csv");
    // p = 3, k = 1
    fs::write(&input, "y,var\n1.0,0.5\n2.0,0.5\n0.5,0.4\n").unwrap();
    let out = dir.path().join("js.csv");
    let o = run(&["estimate", "--input", path_str(&input), "--out", path_str(&out), "--method", "js"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("requires p > k+2"));
}

#[test]
fn malformed_input_exits_two_with_lines() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("bad.csv");
    fs::write(&input, "y,var,x1\n1.0,0.5,1\n2.0,-1,2\n0.5,abc,1\n").unwrap();
    let out = dir.path().join("o.csv");
    let o = run(&["estimate", "--input", path_str(&input), "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3") && err.contains("line 4"), "{err}");
    let o = run(&["estimate", "--input", path_str(&input), "--out", path_str(&out), "--method", "sure"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn semiparametric_dominates_through_the_cli() {
    let dir = TempDir::new().unwrap();
    let input = write_units(&dir, "ex1.csv", &example1(200), false);
    let sp_wls = estimate_objective(&dir, &input, "ure-sp-wls");
    let wls = estimate_objective(&dir, &input, "ure-wls");
    assert!(sp_wls <= wls + 1e-9, "{sp_wls} vs {wls}");
    let sp = estimate_objective(&dir, &input, "ure-sp");
    let par = estimate_objective(&dir, &input, "ure");
    assert!(sp <= par + 1e-9, "{sp} vs {par}");
}

#[test]
fn simulate_is_deterministic_and_respects_the_grid() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = run(&[
            "simulate", "--example", "1", "--reps", "1", "--seed", "7", "--p-min", "20", "--p-max", "60", "--p-step",
            "20", "--out", path_str(out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let mut ps: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    ps.dedup();
    assert_eq!(ps, vec!["20", "40", "60"]);
    assert!(text.starts_with("p,estimator,mean_loss,std_error,reps,failures\n"));

    let seq = dir.path().join("s.csv");
    let o = run(&[
        "simulate", "--example", "1", "--reps", "1", "--seed", "7", "--p-min", "20", "--p-max", "60", "--p-step", "20",
        "--sequential", "--out", path_str(&seq),
    ]);
    assert!(o.status.success());
    assert_eq!(text, fs::read_to_string(&seq).unwrap());

    let o = run(&["simulate", "--p-min", "60", "--p-max", "20"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn empirical_toy_and_guard() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("bat.csv");
    fs::write(&input, "player_id,pitcher,ab1,h1,ab2,h2\na,0,40,12,30,8\nb,1,15,2,5,1\nc,0,60,20,50,14\n").unwrap();
    let out = dir.path().join("report.csv");
    let o = run(&[
        "empirical", "--input", path_str(&input), "--out", path_str(&out), "--estimators", "naive", "--covariates",
        "none", "--min-ab-train", "0", "--min-ab-valid", "0",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text, "estimator,covariates,tse_ratio,p_est,p_val,failures\nnaive,no,1,3,3,0\n");
    let factors = fs::read_to_string(dir.path().join("report.factors.csv")).unwrap();
    assert_eq!(factors.lines().count(), 4);

    let o = run(&[
        "empirical", "--input", path_str(&input), "--out", path_str(&out), "--group", "pitchers", "--covariates",
        "at-bats,pitcher",
    ]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "player_id,pitcher,ab1,h1,ab2,h2\na,0,40,12,30,8\nb,3,15,2,5,1\n").unwrap();
    let o = run(&["empirical", "--input", path_str(&bad), "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn diagnose_examples() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("h.csv");
    fs::write(&input, "y,var\n1.0,0.3\n2.0,0.3\n0.5,0.3\n1.5,0.3\n").unwrap();
    let out = dir.path().join("d.json");
    let o = run(&["diagnose", "--input", path_str(&input), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let d: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!((d["cond_a"].as_f64().unwrap() - 0.09).abs() < 1e-15);
    assert_eq!(d["cond_e"][0][0].as_f64().unwrap(), 1.0);
    assert_eq!(d["in_L_ols"], true);

    let ex = write_units(&dir, "ex1.csv", &example1(500), false);
    let o = run(&["diagnose", "--input", path_str(&ex), "--no-intercept"]);
    assert!(o.status.success());
    let d: Value = serde_json::from_slice(&o.stdout).unwrap();
    // E[A²] = (0.1² + 0.5²)/2; its sample version has sd 0.12/√500
    assert!((d["cond_a"].as_f64().unwrap() - 0.13).abs() < 4.0 * 0.12 / 500f64.sqrt());
}
