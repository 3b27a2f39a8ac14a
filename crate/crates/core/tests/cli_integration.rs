use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SCALAR: &str =
    r#"{"system":{"A":[[0.5]],"B":[[1]],"C":[[1]],"Q":[[1]]},"design":{"P_l_f":[[1.2]],"lambda_u_f":1.0}}"#;
const FIXTURE: &str = r#"{"generate":{"n":10,"rho":0.95,"seed":7},"design":{"alpha":0.0625,"lambda_u_f":0.03}}"#;

fn run(args: &[&str], config: &Path, out: Option<&Path>, env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_covbound"));
    cmd.args(args)
        .arg("--config")
        .arg(config)
        .env_remove("COVBOUND_OUT_DIR");
    if let Some(o) = out {
        cmd.arg("--out").arg(o);
    }
    if let Some(e) = env_out {
        cmd.env("COVBOUND_OUT_DIR", e);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn scalar_design_writes_csv_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "scalar.json", SCALAR);
    let out = dir.path().join("out");
    let o = run(&["design"], &cfg, Some(&out), None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("lambda.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("sensor_index,lambda"));
    let row = lines.next().unwrap();
    assert!(row.starts_with("1,2.72317"), "{row}");
    let report = json(&out.join("report.json"));
    assert!((report["design"]["cost"].as_f64().unwrap() - 2.72317).abs() < 1e-4);
    assert!((report["certificate"]["phi_prime"].as_f64().unwrap() - 1.132782).abs() < 1e-5);
}

#[test]
fn report_round_trips_through_reingestion() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fixture.json", FIXTURE);
    let first = dir.path().join("first");
    let o = run(&["report"], &cfg, Some(&first), None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let second = dir.path().join("second");
    let o = run(&["report"], &first.join("report.json"), Some(&second), None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    assert_eq!(
        fs::read(first.join("lambda.csv")).unwrap(),
        fs::read(second.join("lambda.csv")).unwrap()
    );
    let a = json(&first.join("report.json"));
    let b = json(&second.join("report.json"));
    for key in ["config", "P_l_f", "certificate", "design", "verify", "refine"] {
        assert_eq!(a[key], b[key], "section {key} differs");
    }
}

#[test]
fn fixture_envelope_lower_bound_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fixture.json", FIXTURE);
    let out = dir.path().join("env");
    let o = run(&["envelope"], &cfg, Some(&out), None);
    assert_eq!(o.status.code(), Some(0));
    let env = json(&out.join("envelope.json"));
    let eig = env["envelope"]["eig_p_lb"].as_array().unwrap();
    assert_eq!(eig.len(), 10);
    assert!(eig.iter().all(|e| (e.as_f64().unwrap() - 1.0).abs() <= 1e-9));
    assert_eq!(env["eig_P_l_f"].as_array().unwrap().len(), 10);
}

#[test]
fn output_dir_comes_from_environment_when_flag_absent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "scalar.json", SCALAR);
    let env_dir = dir.path().join("from_env");
    let o = run(&["design"], &cfg, None, Some(&env_dir));
    assert_eq!(o.status.code(), Some(0));
    assert!(env_dir.join("lambda.csv").exists());

    let flag_dir = dir.path().join("from_flag");
    let o = run(&["design"], &cfg, Some(&flag_dir), Some(&env_dir.join("unused")));
    assert_eq!(o.status.code(), Some(0));
    assert!(flag_dir.join("lambda.csv").exists());
    assert!(!env_dir.join("unused").exists());
}

#[test]
fn invalid_configs_exit_two_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.json", &SCALAR.replace(r#""Q":[[1]]"#, r#""Q":[[-1]]"#));
    let o = run(&["design"], &bad, Some(dir.path()), None);
    assert_eq!(o.status.code(), Some(2));
    let diag: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(diag["path"], "system.Q");
    assert_eq!(diag["status"], "invalid_config");

    let o = run(&["design"], &dir.path().join("missing.json"), Some(dir.path()), None);
    assert_eq!(o.status.code(), Some(2));

    let o = Command::new(env!("CARGO_BIN_EXE_covbound"))
        .arg("bogus")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn validate_prints_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "scalar.json", SCALAR);
    let o = run(&["validate"], &cfg, Some(&dir.path().join("v")), None);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["a_stable"], true);
    assert_eq!(v["observable"], true);
    assert!((v["spectral_radius_a"].as_f64().unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn simulate_and_refine_commands() {
    let dir = tempfile::tempdir().unwrap();
    let text = SCALAR.replace(
        r#""lambda_u_f":1.0}"#,
        r#""lambda_u_f":1.0},"simulate":{"steps":100,"trials":4000,"seed":3},"actual_noise":{"R_a_diag":[1.0]}"#,
    );
    let cfg = write_config(dir.path(), "sim.json", &text);
    let out = dir.path().join("o");
    let o = run(&["simulate"], &cfg, Some(&out), None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let sim = json(&out.join("simulate.json"));
    assert!(sim["empirical_rel_error"].as_f64().unwrap() < 0.08);
    assert!(sim["recursion_rel_error"].as_f64().unwrap() < 1e-8);

    let o = run(&["refine"], &cfg, Some(&out), None);
    assert_eq!(o.status.code(), Some(0));
    let refine = json(&out.join("refine.json"));
    assert!((refine["gamma"].as_f64().unwrap() - 0.881).abs() < 2e-3);

    let o = run(&["report"], &cfg, Some(&out), None);
    assert_eq!(o.status.code(), Some(0));
    let report = json(&out.join("report.json"));
    let r_s = report["synthetic"]["R_s_diag"][0].as_f64().unwrap();
    assert!((r_s - 1.72317).abs() < 1e-4);
    assert!(report["simulate"].is_object());
}
