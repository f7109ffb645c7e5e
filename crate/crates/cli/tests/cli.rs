use std::path::Path;
use std::process::{Command, Output};

use aisdet::eval::Table1Report;

fn aisdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aisdet")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn help_exits_zero_for_every_command() {
    assert_eq!(code(&aisdet(&["--help"])), 0);
    for cmd in ["phantom", "train-detector", "mine", "train-fpr", "infer", "eval", "sweep", "report-paper", "reader-serve", "experiment", "schema"] {
        assert_eq!(code(&aisdet(&[cmd, "--help"])), 0, "{cmd}");
    }
}

#[test]
fn unknown_flag_exits_two() {
    assert_eq!(code(&aisdet(&["report-paper", "--bogus"])), 2);
    assert_eq!(code(&aisdet(&["no-such-command"])), 2);
}

#[test]
fn zero_cases_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = aisdet(&["phantom", "--cases", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_config_exits_two_and_missing_config_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"seed": 1, "surprise": true}"#).unwrap();
    let out = dir.path().join("o");
    let o = aisdet(&["phantom", "--config", cfg.to_str().unwrap(), "--cases", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let o = aisdet(&["phantom", "--config", "/nonexistent/c.json", "--cases", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
}

#[test]
fn missing_artifact_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = aisdet(&["mine", "--data", d, "--detectors", d, "--out", d]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("manifest.json"));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let o = aisdet(&["phantom", "--cases", "1", "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn port_in_use_exits_five() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&aisdet(&["phantom", "--cases", "2", "--out", data.to_str().unwrap()])), 0);
    let cands = dir.path().join("c.jsonl");
    std::fs::write(&cands, "").unwrap();
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port().to_string();
    let session = dir.path().join("s.jsonl");
    let o = aisdet(&["reader-serve", "--data", data.to_str().unwrap(), "--candidates", cands.to_str().unwrap(), "--session", session.to_str().unwrap(), "--port", &port]);
    assert_eq!(code(&o), 5, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn phantom_manifest_lists_every_case_and_reruns_match() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        assert_eq!(code(&aisdet(&["phantom", "--cases", "3", "--first-index", "4", "--seed", "9", "--out", out.to_str().unwrap()])), 0);
        out
    };
    let (a, b) = (run("a"), run("b"));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["cases"].as_array().unwrap().len(), 3);
    let run_json = std::fs::read(a.join("run.json")).unwrap();
    assert_eq!(run_json, std::fs::read(b.join("run.json")).unwrap());
    let parsed: serde_json::Value = serde_json::from_slice(&run_json).unwrap();
    assert_eq!(parsed["seed"], 9);
    assert!(parsed["outputs"].as_object().unwrap().len() >= 7);
    assert!(a.join("config.json").exists());
}

#[test]
fn report_paper_prints_published_values_and_outputs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let o = aisdet(&["report-paper", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8(o.stdout).unwrap();
    for v in ["42.7,2.837,18.7,0.260", "30.7,2.102,18.2,0.229", "37.3,1.265,31.1,0.339", "33.3,0.327,61.0,0.431", "41.3,0.388,62.0,0.496", "0.0313"] {
        assert!(stdout.contains(v), "{v} missing from\n{stdout}");
    }
    let read = |p: &Path| std::fs::read_to_string(p).unwrap();
    let from_csv = Table1Report::from_csv(&read(&dir.path().join("table1.csv"))).unwrap();
    let from_json: Table1Report = serde_json::from_str(&read(&dir.path().join("table1.json"))).unwrap();
    assert_eq!(from_csv, from_json);
}

#[test]
fn schema_command_prints_the_shipped_schema() {
    let o = aisdet(&["schema"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["type"], "object");
}
