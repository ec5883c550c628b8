use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dpw(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpw"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("DPW_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dpw(tmp.path(), &["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    let o = dpw(tmp.path(), &["generate", "--seed", "1", "--seeds", "2,3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn validation_lists_every_bad_field() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dpw(tmp.path(), &["calibrate-noise", "--epsilon", "-1", "--sensitivity", "0", "--rate", "2"]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    for field in ["epsilon", "sensitivity", "rate"] {
        assert!(err.contains(field), "{field} missing from:\n{err}");
    }
    let o = dpw(tmp.path(), &["train", "--alpha", "1.5", "--steps", "0", "--n", "200"]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("alpha") && err.contains("steps"), "{err}");
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "[generate]\nn = 300\np = 0.6\n\n[train]\nsteps = 7\nlearning_rate = 0.1\n").unwrap();
    let out = tmp.path().join("gen");
    let o = dpw(&out, &["generate", "--config", cfg.to_str().unwrap(), "--n", "200", "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let meta = json(&out.join("data.json"));
    assert_eq!(meta["config"]["n"], 200);
    assert_eq!(meta["config"]["p"], 0.6);
    assert_eq!(meta["config"]["d_core"], 8);

    let out = tmp.path().join("train");
    let o = dpw(&out, &["train", "--config", cfg.to_str().unwrap(), "--steps", "5", "--n", "300", "--n-test", "200"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rec = json(&out.join("record.json"));
    assert_eq!(rec["config"]["steps"], 5);
    assert_eq!(rec["config"]["learning_rate"], 0.1);
    assert_eq!(rec["steps"].as_array().unwrap().len(), 5);
}

#[test]
fn unknown_config_content_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[trian]\nsteps = 3\n").unwrap();
    let o = dpw(tmp.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("trian"));
    std::fs::write(&cfg, "[train]\nstepz = 3\n").unwrap();
    let o = dpw(tmp.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("stepz"));
}

#[test]
fn several_seeds_get_their_own_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dpw(tmp.path(), &["generate", "--n", "100", "--seeds", "1,2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = std::fs::read(tmp.path().join("seed-1/data.csv")).unwrap();
    let b = std::fs::read(tmp.path().join("seed-2/data.csv")).unwrap();
    assert_ne!(a, b);
    assert_eq!(json(&tmp.path().join("seed-2/manifest.json"))["seed"], 2);
}

#[test]
fn output_directory_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_dpw"))
        .args(["generate", "--n", "50", "--seed", "0"])
        .env("DPW_OUT_DIR", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("data.csv").exists());
    assert!(out.join("manifest.json").exists());
}

#[test]
fn same_seed_same_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["train", "--task", "regression_sp", "--n", "300", "--n-test", "200", "--steps", "5", "--seed", "9"];
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(dpw(&a, &args).status.success());
    assert!(dpw(&b, &args).status.success());
    for f in ["record.json", "model.json", "steps.csv", "outputs.csv", "histogram.csv", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn calibration_and_counterexample_report() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dpw(
        tmp.path(),
        &["calibrate-noise", "--epsilon", "1", "--delta", "1e-5", "--steps", "500", "--rate", "0.2", "--sensitivity", "0.1"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let cal = json(&tmp.path().join("calibration.json"))["calibration"].clone();
    let eps = cal["epsilon"].as_f64().unwrap();
    assert!((eps - 1.0).abs() < 1e-6, "{cal}");
    let sigma = cal["sigma"].as_f64().unwrap();
    assert!((sigma - 0.1 * cal["noise_multiplier"].as_f64().unwrap()).abs() < 1e-12);

    let o = dpw(tmp.path(), &["counterexample"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(tmp.path().join("counterexample.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let gap = headers.iter().position(|h| h == "gap").unwrap();
    let rows: Vec<_> = rdr.records().map(Result::unwrap).collect();
    assert!(!rows.is_empty());
    for r in rows {
        assert_eq!(r[gap].parse::<f64>().unwrap(), 2.0);
    }
}

#[test]
fn audit_reports_stay_under_the_bound() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dpw(tmp.path(), &["sensitivity-audit", "--kind", "two_sided", "--n", "30", "--m", "40", "--trials", "200", "--seed", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep = json(&tmp.path().join("report.json"));
    let text = rep.to_string();
    assert!(text.contains("theoretical_bound"), "{text}");
}
