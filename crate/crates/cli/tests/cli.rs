use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn drobas(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drobas"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMOKE: &str = r#"{
  "experiment": "newsvendor",
  "dgp": {"kind": "exponential", "rate": 0.05},
  "methods": ["DRO-BAS-PE", "DRO-BAS-PP", "BDRO"],
  "epsilon": [0.01, 0.1, 1.0],
  "m_values": [25],
  "replicates": 4,
  "n_train": 20,
  "t_test": 50
}"#;

fn strip_timings(csv_text: &str) -> Vec<Vec<String>> {
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    let h = rdr.headers().unwrap().clone();
    let drop: Vec<usize> = h
        .iter()
        .enumerate()
        .filter(|(_, n)| n.ends_with("_time_s"))
        .map(|(i, _)| i)
        .collect();
    rdr.records()
        .map(|r| {
            r.unwrap()
                .iter()
                .enumerate()
                .filter(|(i, _)| !drop.contains(i))
                .map(|(_, v)| v.to_string())
                .collect()
        })
        .collect()
}

#[test]
fn validate_config_missing_epsilon_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMOKE.replace(r#""epsilon": [0.01, 0.1, 1.0],"#, "");
    fs::write(dir.path().join("c.json"), cfg).unwrap();
    let o = drobas(&["validate-config", "--config", "c.json"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("epsilon"), "{}", stderr(&o));
}

#[test]
fn validate_config_reports_nested_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), SMOKE).unwrap();
    let o = drobas(&["validate-config", "--config", "c.json", "--set", "solver.max_iters=\"many\""], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("solver.max_iters"), "{}", stderr(&o));
    let ok = drobas(&["validate-config", "--config", "c.json"], dir.path());
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
}

#[test]
fn newsvendor_smoke_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), SMOKE).unwrap();
    let o = drobas(&["newsvendor", "--config", "c.json", "--out", "run1", "--threads", "2"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let results = fs::read_to_string(dir.path().join("run1/results.csv")).unwrap();
    assert_eq!(results.lines().count() - 1, 4 * 3 * 3);
    let summary = fs::read_to_string(dir.path().join("run1/summary.csv")).unwrap();
    assert!(summary.starts_with("method,epsilon,oos_mean,oos_var,on_pareto\n"));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run1/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["experiment"], "newsvendor");
    assert!(manifest["wall_time_s"].as_f64().unwrap() >= 0.0);

    // The echoed config reproduces the run, on a different thread count.
    let o = drobas(
        &["newsvendor", "--config", "run1/config.json", "--out", "run2", "--threads", "1"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let again = fs::read_to_string(dir.path().join("run2/results.csv")).unwrap();
    assert_eq!(strip_timings(&results), strip_timings(&again));
    assert_eq!(
        fs::read_to_string(dir.path().join("run1/config.json")).unwrap(),
        fs::read_to_string(dir.path().join("run2/config.json")).unwrap()
    );
}

#[test]
fn seed_flag_changes_data_and_multiple_m_split_summaries() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), SMOKE).unwrap();
    let a = drobas(&["newsvendor", "--config", "c.json", "--out", "a", "--set", "m_values=[9,16]"], dir.path());
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(dir.path().join("a/summary_m9.csv").exists());
    assert!(dir.path().join("a/summary_m16.csv").exists());
    let b = drobas(&["newsvendor", "--config", "c.json", "--out", "b", "--seed", "99"], dir.path());
    assert!(b.status.success());
    let ra = fs::read_to_string(dir.path().join("a/results.csv")).unwrap();
    let rb = fs::read_to_string(dir.path().join("b/results.csv")).unwrap();
    assert_ne!(strip_timings(&ra), strip_timings(&rb));
}

#[test]
fn tolerances_prints_one_row() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("t.json"),
        r#"{"posterior": {"family": "GammaExponential", "params": {"alpha": 3.0, "beta": 31.0}},
            "observations": {"data": [10.0, 5.0, 16.0]}}"#,
    )
    .unwrap();
    let o = drobas(&["tolerances", "--config", "t.json"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "family,n_obs,eps_min,eps_star_pe_plugin,eps_star_pe,eps_star_pp_upper");
    let fields: Vec<&str> = lines[1].split(',').collect();
    let eps_min: f64 = fields[2].parse().unwrap();
    let plugin: f64 = fields[3].parse().unwrap();
    // ln 3 − ψ(3) = ln 3 − (3/2 − γ_E)
    let want = 3f64.ln() - (1.5 - 0.577_215_664_901_532_9);
    assert!((eps_min - want).abs() < 1e-12, "{eps_min}");
    assert!(plugin >= eps_min);
}

#[test]
fn solve_one_and_ingestion_errors() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("s.json"),
        r#"{"method": "DRO-BAS-PP", "epsilon": 0.2, "m_samples": 200,
            "observations": {"data": [12.0, 30.0, 7.0, 19.0, 25.0]}}"#,
    )
    .unwrap();
    let o = drobas(&["solve-one", "--config", "s.json"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let x = v["solution"]["x_star"][0].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&x));

    let pe = drobas(&["solve-one", "--config", "s.json", "--set", "method=DRO-BAS-PE", "--set", "epsilon=0"], dir.path());
    assert_eq!(pe.status.code(), Some(2), "{}", stderr(&pe));

    fs::write(dir.path().join("bad.csv"), "A,B\n0.1,0.2\n0.3,oops\n").unwrap();
    let o = drobas(
        &["portfolio", "--set", "methods=[\"DRO-BAS-PE\"]", "--set", "epsilon=[1.0]", "--set", "returns_path=bad.csv"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("row 3"), "{}", stderr(&o));

    let o = drobas(
        &["portfolio", "--set", "methods=[\"DRO-BAS-PE\"]", "--set", "epsilon=[1.0]", "--set", "returns_path=missing.csv"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn portfolio_and_cv_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = drobas(
        &[
            "portfolio",
            "--out",
            "p",
            "--set",
            "methods=[\"DRO-BAS-PE\",\"KL-DRO\"]",
            "--set",
            "epsilon=[0.5,1.0]",
            "--set",
            "max_windows=2",
            "--set",
            "synthetic.assets=5",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let series = fs::read_to_string(dir.path().join("p/returns_series.csv")).unwrap();
    assert!(series.starts_with("method,epsilon,window,week,portfolio_return\n"));
    assert_eq!(series.lines().count() - 1, 2 * 2 * 2 * 12);

    let o = drobas(
        &[
            "cv",
            "--out",
            "c",
            "--set",
            "method=KL-DRO",
            "--set",
            "epsilon=[0.01,0.1,1.0]",
            "--set",
            "observations.dgp={\"kind\":\"normal\",\"mean\":25,\"sd\":10}",
            "--set",
            "observations.n=50",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("chosen epsilon: "));
    let cv = fs::read_to_string(dir.path().join("c/cv.csv")).unwrap();
    assert_eq!(cv.lines().count(), 4);
}

#[test]
fn experiment_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), SMOKE).unwrap();
    let o = drobas(&["portfolio", "--config", "c.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("newsvendor"));
}
