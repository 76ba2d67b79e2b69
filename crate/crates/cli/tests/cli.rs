use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn riskmm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_riskmm"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env("RISKMM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

fn header(text: &str) -> &str {
    text.lines().next().unwrap()
}

const SMALL: [&str; 6] = ["--N", "4", "--Nb", "1", "--steps", "6"];

#[test]
fn solve_trivial_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let out = riskmm(dir.path(), &["solve", "--N", "1", "--Nb", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(dir.path(), "solve.csv");
    assert_eq!(header(&csv), "m,loss,optimality_error,inner_iters,wall_ms");
    // initial record plus one convex solve
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",0")));
}

#[test]
fn solve_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["solve", "--N", "5", "--Nb", "2", "--formulation", "pessimistic", "--gamma", "0.5"];
    assert!(riskmm(a.path(), &args).status.success());
    assert!(riskmm(b.path(), &args).status.success());
    assert_eq!(read(a.path(), "solve.csv"), read(b.path(), "solve.csv"));
}

#[test]
fn simulate_schemas_and_modes() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["simulate", "--repeats", "2", "--seed", "4"];
    args.extend(SMALL);
    let out = riskmm(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = read(dir.path(), "trace.csv");
    assert_eq!(
        header(&trace),
        "step,p_x,p_y,v_x,v_y,p_x_h,p_y_h,one,u_x,u_y,sampled_mode,solve_ms"
    );
    assert_eq!(trace.lines().count(), 7);
    for line in trace.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 12);
        assert_eq!(f[7], "1");
        assert!(["1", "2", "3"].contains(&f[10]));
        assert_eq!(f[11], "0");
    }
    let metrics = read(dir.path(), "metrics.csv");
    assert_eq!(header(&metrics), "seed,AVTE,min_distance,collisions");
    let seeds: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(seeds, ["4", "5"]);
}

#[test]
fn simulate_zero_steps() {
    let dir = tempfile::tempdir().unwrap();
    let out = riskmm(dir.path(), &["simulate", "--steps", "0", "--repeats", "1"]);
    assert!(out.status.success());
    assert_eq!(read(dir.path(), "trace.csv").lines().count(), 1);
    assert_eq!(read(dir.path(), "metrics.csv").lines().nth(1), Some("0,,,"));
}

#[test]
fn timing_flag_fills_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = riskmm(dir.path(), &["solve", "--N", "3", "--Nb", "1", "--timing"]);
    assert!(out.status.success());
    let csv = read(dir.path(), "solve.csv");
    assert!(csv.lines().skip(2).any(|l| !l.ends_with(",0")));
}

#[test]
fn sweep_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep-gamma", "--gammas", "0.001,1", "--repeats", "2"];
    args.extend(SMALL);
    let out = riskmm(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(dir.path(), "sweep.csv");
    assert_eq!(
        header(&csv),
        "formulation,gamma,n_runs,avte_q1,avte_median,avte_q3,min_distance_q1,min_distance_median,min_distance_q3,failures"
    );
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("optimistic,0.001,2,"));
    assert!(rows[3].starts_with("pessimistic,1,2,"));
    let svg = read(dir.path(), "sweep.svg");
    assert!(svg.starts_with("<svg") && svg.contains("pessimistic"));
}

#[test]
fn sweep_empty_gamma_list_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(riskmm(dir.path(), &["sweep-gamma", "--gammas"]).status.code(), Some(2));
    assert_eq!(riskmm(dir.path(), &["sweep-gamma", "--set", "sweep.gammas=[]"]).status.code(), Some(2));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"horizon": {"depth": 3}}"#).unwrap();
    let cfg = bad.to_str().unwrap();
    assert_eq!(riskmm(dir.path(), &["solve", "--config", cfg]).status.code(), Some(2));
    assert_eq!(riskmm(dir.path(), &["solve", "--config", "/nonexistent.json"]).status.code(), Some(2));
    assert_eq!(riskmm(dir.path(), &["solve", "--set", "risk.gamma=-1"]).status.code(), Some(2));
    assert_eq!(riskmm(dir.path(), &["solve", "--formulation", "reckless"]).status.code(), Some(2));
    assert_eq!(riskmm(dir.path(), &["solve", "--N", "3", "--Nb", "4"]).status.code(), Some(2));
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, r#"{"horizon": {"n": 2, "n_b": 1}, "simulate": {"steps": 3, "repeats": 1}}"#).unwrap();
    let out = riskmm(dir.path(), &["simulate", "--config", path.to_str().unwrap(), "--set", "simulate.steps=2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read(dir.path(), "trace.csv").lines().count(), 3);
}

#[test]
fn verify_filter_and_canary() {
    let dir = tempfile::tempdir().unwrap();
    let out = riskmm(dir.path(), &["verify", "--only", "lemma1"]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_str(&read(dir.path(), "verify.json")).unwrap();
    assert_eq!(report["passed"], true);
    let checks = report["checks"].as_array().unwrap();
    assert!(!checks.is_empty());
    assert!(checks.iter().all(|c| c["group"] == "lemma1" && c["tolerance"].is_number()));

    let out = riskmm(dir.path(), &["verify", "--only", "pi_star", "--mutate", "pi-sign"]);
    assert_eq!(out.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_str(&read(dir.path(), "verify.json")).unwrap();
    assert_eq!(report["passed"], false);

    assert_eq!(riskmm(dir.path(), &["verify", "--only", "nothing"]).status.code(), Some(2));
}
