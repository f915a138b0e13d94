use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vepo-lab")).args(args).output().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn run_writes_artifacts_and_is_reproducible() {
    let dir = scratch("run");
    let config = dir.join("run.json");
    fs::write(
        &config,
        r#"{"preset": "grpo", "train": {"step_size": 2.0}, "steps": 20, "eval_every": 10, "eval_prompts": 20, "dump_advantages_every": 10}"#,
    )
    .unwrap();
    for sub in ["a", "b"] {
        let out = dir.join(sub);
        let report =
            json(&lab(&["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "3"]));
        assert_eq!(report["step"], 20);
        assert_eq!(report["seed"], 3);
        assert_eq!(report["algorithm"], "grpo");
        for f in ["metrics.jsonl", "summary.csv", "checkpoint.json", "config.json"] {
            assert!(out.join(f).exists(), "{f}");
        }
        assert!(out.join("advantages/step_10.csv").exists() && out.join("advantages/step_20.csv").exists());
    }
    let read = |s: &str| fs::read(dir.join(s).join("metrics.jsonl")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_eq!(String::from_utf8(read("a")).unwrap().lines().count(), 3);
}

#[test]
fn probe_compares_checkpoints() {
    let dir = scratch("probe");
    let config = dir.join("run.json");
    fs::write(&config, r#"{"train": {"step_size": 5.0}, "steps": 30, "eval_every": 30, "eval_prompts": 10}"#).unwrap();
    let out = dir.join("out");
    json(&lab(&["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    let ckpt = out.join("checkpoint.json");
    let report = json(&lab(&["probe", "--before", ckpt.to_str().unwrap(), "--after", ckpt.to_str().unwrap()]));
    assert_eq!(report["before"], report["after"]);
}

#[test]
fn grid_runs_every_cell() {
    let dir = scratch("grid");
    let config = dir.join("grid.json");
    fs::write(
        &config,
        r#"{"algorithms": ["vepo", "rloo"], "kl_regimes": ["none", "k3"], "steps": 5, "eval_every": 5, "eval_prompts": 10}"#,
    )
    .unwrap();
    let out = dir.join("out");
    let finals = json(&lab(&["grid", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    assert_eq!(finals.as_array().unwrap().len(), 4);
    assert!(out.join("vepo_k3.jsonl").exists());
    // header plus the step-0 and final record of each cell
    assert_eq!(fs::read_to_string(out.join("grid.csv")).unwrap().lines().count(), 9);
}

#[test]
fn score_reads_jsonl_from_stdin() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_vepo-lab"))
        .arg("score")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"{\"prompt\": [0, 1], \"output\": [16, 17]}\n\n{\"prompt\": [2], \"output\": []}\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let lines: Vec<Value> =
        String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines.iter().all(|l| l["composite"].is_number()));
}

#[test]
fn diagnostics_print_json_reports() {
    let g = json(&lab(&["gibbs-check"]));
    assert!(g["total_variation"].as_f64().unwrap() < 0.02);
    let f = json(&lab(&["fisher", "--probs", "0.5,0.5"]));
    let ev: Vec<f64> = f["eigenvalues"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(ev[0].abs() < 1e-10 && (ev[1] - 0.5).abs() < 1e-10);
    let gc = json(&lab(&["gradcheck", "--batches", "3"]));
    assert!(gc["max_relative_error"].as_f64().unwrap() < 1e-5);
    let k = json(&lab(&["klprobe", "--samples", "1000"]));
    assert_eq!(k["rows"].as_array().unwrap().len(), 3);
}

#[test]
fn bad_input_exits_with_config_code() {
    let dir = scratch("bad");
    let config = dir.join("bad.json");
    fs::write(&config, r#"{"steps": 5, "no_such_field": 1}"#).unwrap();
    let out = lab(&["run", "--config", config.to_str().unwrap(), "--out", dir.join("out").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(lab(&["fisher", "--probs", "0.5,0.6"]).status.code(), Some(2));
    assert_eq!(lab(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(lab(&["run", "--config", "/nonexistent.json", "--out", "x"]).status.code(), Some(2));
    assert_eq!(lab(&["gibbs-check", "--plateau", "0"]).status.code(), Some(2));
}

#[test]
fn out_of_vocabulary_tokens_are_input_errors() {
    let dir = scratch("vocab");
    let path = dir.join("lines.jsonl");
    fs::write(&path, "{\"prompt\": [0], \"output\": [999]}\n").unwrap();
    assert_eq!(lab(&["score", "--input", path.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn unwritable_output_exits_with_code_three() {
    let dir = scratch("runtime");
    let config = dir.join("run.json");
    fs::write(&config, r#"{"steps": 1, "eval_prompts": 5}"#).unwrap();
    let blocker = dir.join("file");
    fs::write(&blocker, "").unwrap();
    let out = lab(&["run", "--config", config.to_str().unwrap(), "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}
