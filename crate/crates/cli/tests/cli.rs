use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scc_cli::scenario_file::ScenarioFile;
use scc_core::equilibrium::closed_form_equilibrium;
use scc_core::model::GridParams;

fn shipped_scenario() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../examples/paper_table1.json")
}

fn sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scc-sim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn sim_with_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scc-sim"))
        .args(args)
        .env(key, value)
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn shipped_scenario_is_the_reference_experiment() {
    let file = ScenarioFile::load(&shipped_scenario()).unwrap();
    assert_eq!(file, ScenarioFile::reference());
}

#[test]
fn run_writes_trace_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = sim(&[
        "run",
        path_str(&shipped_scenario()),
        "--controller",
        "scc",
        "--t-final",
        "0.002",
        "--out",
        path_str(dir.path()),
        "--seed",
        "11",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,v1,v2,v3,v4,v5,it1,it2,it3,it4,it5,vL,u1,u2,u3,u4,u5,V_eta,min_b,flags"
    );
    let rows: Vec<&str> = lines.collect();
    // one record per control period plus the initial one
    assert_eq!(rows.len(), 201);
    let first: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(first.len(), 20);
    assert_eq!(first[1], "3.93700000e1");
    assert_eq!(first[11], "9.00000000e0");

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 11);
    assert_eq!(summary["summary"]["controller"], "scc");
    assert_eq!(summary["summary"]["safety_violated"], false);
    assert!((summary["equilibrium"]["v_bus"].as_f64().unwrap() - 24.0).abs() < 1e-12);
}

#[test]
fn raw_trace_records_every_plant_step() {
    let dir = tempfile::tempdir().unwrap();
    let out = sim(&[
        "run",
        path_str(&shipped_scenario()),
        "--controller",
        "droop",
        "--t-final",
        "0.001",
        "--raw-trace",
        "--out",
        path_str(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 1001);
}

#[test]
fn droop_run_settles_against_the_upper_bound() {
    let dir = tempfile::tempdir().unwrap();
    let out = sim(&[
        "run",
        path_str(&shipped_scenario()),
        "--controller",
        "droop",
        "--out",
        path_str(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let s = &summary["summary"];
    assert_eq!(s["converged"], false);
    let avg = s["avg_state"].as_array().unwrap();
    let v_max = (0..5).map(|j| avg[2 * j].as_f64().unwrap()).fold(f64::MIN, f64::max);
    assert!(v_max > 49.5, "highest averaged converter voltage {v_max}");
}

#[test]
fn malformed_json_is_a_config_error_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ \"grid\": { \"cap_mF\": [0.49, }").unwrap();
    let out_dir = dir.path().join("out");
    let out = sim(&["run", path_str(&bad), "--out", path_str(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bad.json:1:"), "{}", stderr(&out));
    assert!(!out_dir.exists());
}

#[test]
fn unknown_key_is_reported_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(shipped_scenario())
        .unwrap()
        .replace("\"p_load_W\"", "\"p_load_kW\"");
    let bad = dir.path().join("typo.json");
    std::fs::write(&bad, text).unwrap();
    let out = sim(&["run", path_str(&bad), "--out", path_str(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("p_load_kW"), "{}", stderr(&out));
}

#[test]
fn inconsistent_rates_are_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sim(&[
        "run",
        path_str(&shipped_scenario()),
        "--dt-control",
        "1.5e-6",
        "--out",
        path_str(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(!dir.path().join("trace.csv").exists());
}

#[test]
fn unfiltered_linearization_reports_a_safety_violation() {
    let dir = tempfile::tempdir().unwrap();
    let out = sim(&[
        "run",
        path_str(&shipped_scenario()),
        "--controller",
        "fl",
        "--t-final",
        "0.01",
        "--out",
        path_str(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    // the trace is still complete
    assert!(dir.path().join("trace.csv").exists());
    assert!(dir.path().join("summary.json").exists());
}

#[test]
fn diverging_integration_reports_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = sim(&[
        "run",
        path_str(&shipped_scenario()),
        "--controller",
        "droop",
        "--dt-plant",
        "0.01",
        "--dt-control",
        "0.01",
        "--t-final",
        "20",
        "--out",
        path_str(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("numerical failure"), "{}", stderr(&out));
}

#[test]
fn table2_has_sixteen_state_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("table2.csv");
    let out = sim(&[
        "table2",
        path_str(&shipped_scenario()),
        "--t-final",
        "0.005",
        "--out",
        path_str(&csv_path),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 16);
    assert!(dir.path().join("table2.txt").exists());

    let eq = closed_form_equilibrium(24.0, &GridParams::table1()).unwrap();
    for j in 0..5 {
        let v: f64 = rows[3 * j][1].parse().unwrap();
        let is: f64 = rows[3 * j + 1][1].parse().unwrap();
        let it: f64 = rows[3 * j + 2][1].parse().unwrap();
        assert!((v - eq.x_star.v(j)).abs() <= 1e-7 * v);
        assert!((is - eq.u_star.0[j]).abs() <= 1e-7 * is);
        assert!((it - eq.x_star.i_t(j)).abs() <= 1e-7 * it);
        assert_eq!(rows[3 * j + 1][2], "", "source currents have no initial value");
    }
    assert_eq!(rows[15][0], "vbus");
    assert_eq!(rows[15][2], "9.00000000e0");
}

#[test]
fn sweep_is_reproducible_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &Path| {
        vec![
            "sweep".to_string(),
            shipped_scenario().display().to_string(),
            "--samples".into(),
            "2".into(),
            "--t-final".into(),
            "0.002".into(),
            "--seed".into(),
            "5".into(),
            "--out".into(),
            out.display().to_string(),
        ]
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args_a = args(&a);
    let args_b = args(&b);
    let out = sim_with_env(&args_a.iter().map(String::as_str).collect::<Vec<_>>(), "SCC_WORKERS", "1");
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let out = sim_with_env(&args_b.iter().map(String::as_str).collect::<Vec<_>>(), "SCC_WORKERS", "3");
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let sa = std::fs::read(a.join("sweep.csv")).unwrap();
    let sb = std::fs::read(b.join("sweep.csv")).unwrap();
    assert_eq!(sa, sb);
    let text = String::from_utf8(sa).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("0,scc,") && rows[1].starts_with("0,droop,"));
    assert!(rows[2].starts_with("1,scc,") && rows[3].starts_with("1,droop,"));
}

#[test]
fn bad_worker_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sim_with_env(
        &[
            "sweep",
            path_str(&shipped_scenario()),
            "--samples",
            "1",
            "--out",
            path_str(dir.path()),
        ],
        "SCC_WORKERS",
        "zero",
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("SCC_WORKERS"));
}
