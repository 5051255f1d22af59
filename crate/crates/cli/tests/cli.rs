use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_multiwave"));
    c.env_remove("MULTIWAVE_OUT_DIR")
        .env_remove("MULTIWAVE_DATA_DIR")
        .env_remove("MULTIWAVE_TOKEN");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(text: &str) -> Value {
    serde_json::from_str(text).unwrap()
}

const SPEC: &str = r#"
version = 1
name = "small"
repetitions = 4
seed = 3
strategies = ["random", "neyman"]
methods = ["lai", "bayes"]

[scenario]
n = 800
ppv = 0.8
seed = 1

[rule]
mode = "thresholds"
tau1 = 0.75
tau2 = 0.75
"#;

fn write_spec(dir: &Path) -> PathBuf {
    let p = dir.join("spec.toml");
    std::fs::write(&p, SPEC).unwrap();
    p
}

#[test]
fn simulate_writes_summary_files() {
    let dir = tempfile::tempdir().unwrap();
    write_spec(dir.path());
    ok(
        dir.path(),
        &[
            "simulate",
            "--spec",
            "spec.toml",
            "--out",
            "res",
            "--trajectories",
            "1",
        ],
    );
    let csv = std::fs::read_to_string(dir.path().join("res/summary.csv")).unwrap();
    assert!(csv.starts_with("strategy,method,prop_stopped,"));
    assert_eq!(csv.lines().count(), 5);
    let summary = json(&std::fs::read_to_string(dir.path().join("res/summary.json")).unwrap());
    assert_eq!(summary["schema_version"], 1);
    assert!(dir
        .path()
        .join("res/trajectories/neyman_bayes_000.csv")
        .exists());
    assert!(dir
        .path()
        .join("res/trajectories/random_lai_000.json")
        .exists());

    // Same spec and seed, same bytes.
    ok(
        dir.path(),
        &["simulate", "--spec", "spec.toml", "--out", "again"],
    );
    assert_eq!(
        csv,
        std::fs::read_to_string(dir.path().join("again/summary.csv")).unwrap()
    );
}

#[test]
fn output_directory_defaults_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    write_spec(dir.path());
    let out = bin()
        .current_dir(dir.path())
        .env("MULTIWAVE_OUT_DIR", "from-env")
        .args(["simulate", "--spec", "spec.toml", "--repetitions", "2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from-env/summary.csv").exists());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["--no-such-flag"],
        vec!["simulate", "--spec", "x.toml", "--no-such-flag"],
        vec![
            "session-init",
            "--cohort",
            "c.csv",
            "--session",
            "s.json",
            "--config",
            "c.toml",
            "--tau1",
            "0.7",
        ],
        vec![
            "session-predict",
            "--session",
            "s.json",
            "--method",
            "crystal-ball",
        ],
        vec!["frobnicate"],
    ] {
        let out = run(dir.path(), &args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn missing_files_exit_1_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["simulate", "--spec", "absent.toml", "--out", "o"],
        vec!["session-status", "--session", "absent.json"],
        vec![
            "session-init",
            "--cohort",
            "absent.csv",
            "--session",
            "s.json",
            "--tau1",
            "0.7",
            "--tau2",
            "0.7",
        ],
    ] {
        let out = run(dir.path(), &args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("absent"));
    }
}

/// Write a labels CSV answering every patient in `alloc` from the truth file.
fn answer(dir: &Path, alloc: &Value, truth: &std::collections::HashMap<String, String>) {
    let mut text = String::from("patient_id,label\n");
    for p in alloc["patients"].as_array().unwrap() {
        let id = p["patient_id"].as_str().unwrap();
        text.push_str(&format!("{id},{}\n", truth[id]));
    }
    std::fs::write(dir.join("labels.csv"), text).unwrap();
}

fn read_truth(path: &Path) -> std::collections::HashMap<String, String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let (id, y) = l.split_once(',').unwrap();
            (id.to_string(), y.to_string())
        })
        .collect()
}

#[test]
fn session_workflow_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "gen-cohort",
            "--n",
            "1500",
            "--ppv",
            "0.8",
            "--seed",
            "4",
            "--out",
            "cohort.csv",
            "--truth",
            "truth.csv",
        ],
    );
    let truth = read_truth(&d.join("truth.csv"));
    assert_eq!(truth.len(), 1500);

    let init = json(&ok(
        d,
        &[
            "session-init",
            "--cohort",
            "cohort.csv",
            "--session",
            "s.json",
            "--strategy",
            "neyman",
            "--method",
            "bayes",
            "--batch-size",
            "100",
            "--tau1",
            "0.75",
            "--tau2",
            "0.75",
            "--seed",
            "9",
        ],
    ));
    assert_eq!(init["wave"], 0);
    // Refuses to clobber an existing session.
    let again = run(
        d,
        &[
            "session-init",
            "--cohort",
            "cohort.csv",
            "--session",
            "s.json",
            "--tau1",
            "0.7",
        ],
    );
    assert_eq!(again.status.code(), Some(1));

    let mut waves = 0;
    loop {
        let alloc = json(&ok(
            d,
            &["session-alloc", "--session", "s.json", "--out", "sheet.csv"],
        ));
        assert_eq!(alloc["wave"], waves);
        let sheet = std::fs::read_to_string(d.join("sheet.csv")).unwrap();
        assert!(sheet.starts_with("patient_id,stratum,label"));
        answer(d, &alloc, &truth);
        let status = json(&ok(
            d,
            &[
                "session-record",
                "--session",
                "s.json",
                "--labels",
                "labels.csv",
            ],
        ));
        waves += 1;
        assert_eq!(status["wave"], waves);
        if status["decision"]["status"] != "continue" {
            break;
        }
        let p = json(&ok(
            d,
            &[
                "session-predict",
                "--session",
                "s.json",
                "--replications",
                "30",
            ],
        ));
        assert_eq!(p["schema_version"], 1);
        assert_eq!(p["wave"], waves);
        let r = json(&ok(
            d,
            &["session-predict", "--session", "s.json", "--method", "rate"],
        ));
        assert_eq!(r["forecast"]["method"], "rate");
        assert!(waves < 15);
    }

    let report = ok(d, &["report", "--session", "s.json"]);
    assert!(report.starts_with("wave,k,s,point,lower,upper,k_eff,allocation"));
    assert_eq!(report.lines().count(), waves + 1);
    let history = json(&ok(
        d,
        &["report", "--session", "s.json", "--format", "json"],
    ));
    assert_eq!(history["entries"].as_array().unwrap().len(), waves);

    // Further recording on a stopped session is a domain error.
    let out = run(d, &["session-alloc", "--session", "s.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn foreign_ids_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "gen-cohort",
            "--n",
            "600",
            "--ppv",
            "0.8",
            "--out",
            "cohort.csv",
        ],
    );
    ok(
        d,
        &[
            "session-init",
            "--cohort",
            "cohort.csv",
            "--session",
            "s.json",
            "--tau1",
            "0.75",
            "--tau2",
            "0.75",
        ],
    );
    let alloc = json(&ok(d, &["session-alloc", "--session", "s.json"]));
    let mut text = String::from("patient_id,label\n");
    for p in alloc["patients"].as_array().unwrap().iter().skip(1) {
        text.push_str(&format!("{},1\n", p["patient_id"].as_str().unwrap()));
    }
    text.push_str("ZZ-404,0\n");
    std::fs::write(d.join("labels.csv"), text).unwrap();
    let before = std::fs::read(d.join("s.json")).unwrap();
    let out = run(
        d,
        &[
            "session-record",
            "--session",
            "s.json",
            "--labels",
            "labels.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("ZZ-404"), "{err}");
    assert!(err.contains(alloc["patients"][0]["patient_id"].as_str().unwrap()));
    assert_eq!(std::fs::read(d.join("s.json")).unwrap(), before);

    std::fs::write(d.join("bad.csv"), "patient_id,label\nP00001,maybe\n").unwrap();
    let out = run(
        d,
        &[
            "session-record",
            "--session",
            "s.json",
            "--labels",
            "bad.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not binary"));
}

#[test]
fn status_output_matches_the_published_schema() {
    let schema_path =
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas/session-status.schema.json");
    let schema = json(&std::fs::read_to_string(schema_path).unwrap());
    let validator = jsonschema::validator_for(&schema).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "gen-cohort",
            "--n",
            "900",
            "--ppv",
            "0.7",
            "--seed",
            "2",
            "--out",
            "cohort.csv",
            "--truth",
            "truth.csv",
        ],
    );
    let truth = read_truth(&d.join("truth.csv"));
    ok(
        d,
        &[
            "session-init",
            "--cohort",
            "cohort.csv",
            "--session",
            "s.json",
            "--width-limit",
            "0.01",
            "--method",
            "lai",
        ],
    );

    let check = |v: &Value| {
        let errors: Vec<String> = validator.iter_errors(v).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{errors:?}\n{v}");
    };
    check(&json(&ok(d, &["session-status", "--session", "s.json"])));
    let alloc = json(&ok(d, &["session-alloc", "--session", "s.json"]));
    check(&json(&ok(d, &["session-status", "--session", "s.json"])));
    answer(d, &alloc, &truth);
    ok(
        d,
        &[
            "session-record",
            "--session",
            "s.json",
            "--labels",
            "labels.csv",
        ],
    );
    let status = json(&ok(d, &["session-status", "--session", "s.json"]));
    check(&status);
    assert_eq!(status["interval"]["method"], "lai");

    let mut broken = status.clone();
    broken["decision"]["status"] = Value::String("stopped".into());
    assert!(!validator.is_valid(&broken));
}
