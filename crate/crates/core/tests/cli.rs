use std::path::Path;
use std::process::{Command, Output};

use mfg_fluct::model_lq::ModelParams;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mfg-fluct"))
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("cfg.json");
    std::fs::write(&path, body).unwrap();
    path
}

fn params_json(p: &ModelParams) -> String {
    serde_json::to_string(p).unwrap()
}

fn lln_config(out: &Path, tolerance: f64) -> String {
    format!(
        r#"{{"experiment": "lln_rate", "params": {}, "n_ladder": [20, 40, 80],
            "replications": 50, "dt_steps": 100, "base_seed": 5,
            "output_dir": {:?}, "tolerance": {tolerance}}}"#,
        params_json(&ModelParams::baseline()),
        out
    )
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn validate_config_accepts_and_rejects_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(dir.path(), &lln_config(dir.path(), 0.3));
    let o = bin().arg("validate-config").arg(&good).output().unwrap();
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("ok: lln_rate"));

    let bad = write_config(dir.path(), &lln_config(dir.path(), 0.3).replace("[20, 40, 80]", "[20, 80, 40]"));
    let o = bin().arg("validate-config").arg(&bad).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_ladder[2]"));
}

#[test]
fn run_writes_report_and_maps_verdict_to_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &lln_config(&dir.path().join("a"), 0.3));
    let o = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));

    let files: Vec<_> = std::fs::read_dir(dir.path().join("a")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.len(), 2);
    let json = files.iter().find(|p| p.extension().unwrap() == "json").unwrap();
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(report["schema"], 1);
    assert_eq!(report["base_seed"], 5);
    assert_eq!(report["version"], env!("CARGO_PKG_VERSION"));
    assert!(json.file_name().unwrap().to_str().unwrap().starts_with("lln_rate_"));
    let csv = files.iter().find(|p| p.extension().unwrap() == "csv").unwrap();
    let text = std::fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("schema,n,statistic,se,used\n1,20,"));

    // An impossible tolerance turns the same run into a statistical failure.
    let strict = write_config(dir.path(), &lln_config(&dir.path().join("b"), 1e-9));
    let o = bin().args(["run", "--config"]).arg(&strict).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("lln_rate FAIL"));
}

#[test]
fn seed_and_out_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &lln_config(&dir.path().join("ignored"), 0.3));
    let run = |seed: &str, out: &str| {
        let o = bin()
            .args(["run", "--threads", "1", "--seed", seed, "--out"])
            .arg(dir.path().join(out))
            .arg("--config")
            .arg(&cfg)
            .output()
            .unwrap();
        assert!(o.status.code().is_some_and(|c| c != 1));
        let mut files: Vec<_> = std::fs::read_dir(dir.path().join(out))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        files
    };
    let a = run("9", "x");
    let b = run("9", "y");
    let c = run("10", "z");
    assert!(!dir.path().join("ignored").exists());
    let names = |v: &[std::path::PathBuf]| v.iter().map(|p| p.file_name().unwrap().to_owned()).collect::<Vec<_>>();
    assert_eq!(names(&a), names(&b));
    assert_ne!(names(&a), names(&c));
    for (p, q) in a.iter().zip(&b) {
        assert_eq!(std::fs::read(p).unwrap(), std::fs::read(q).unwrap());
    }
}

#[test]
fn riccati_prints_a_curve() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("params.json");
    std::fs::write(&params, params_json(&ModelParams::baseline())).unwrap();
    let o = bin()
        .args(["riccati", "--n", "inf", "--steps", "10", "--params"])
        .arg(&params)
        .output()
        .unwrap();
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,phi");
    assert_eq!(lines.len(), 12);
    // Terminal condition φ_T = ḡ.
    let last: f64 = lines[11].split(',').nth(1).unwrap().parse().unwrap();
    assert!((last - 0.3).abs() < 1e-15);

    let o = bin().args(["riccati", "--n", "zero", "--params"]).arg(&params).output().unwrap();
    assert!(!o.status.success());

    let mut bad = ModelParams::baseline();
    bad.q = 2.0;
    std::fs::write(&params, params_json(&bad)).unwrap();
    let o = bin().args(["riccati", "--n", "5", "--params"]).arg(&params).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}
