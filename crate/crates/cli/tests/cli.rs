use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn epd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epd"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", "data", "--samples", "12", "--seed", "4"];
    args.extend_from_slice(extra);
    let o = epd(&args, dir);
    assert_eq!(code(&o), 0, "{o:?}");
}

const CONFIG: &str = r#"
dataset = "data/dataset.json"
output_dir = "runs/main"
concurrency = 3
seed = 1

[backends.gpt]
kind = "oracle-mock"

[backends.claude]
kind = "oracle-mock"
error_rate = 0.5
seed = 2
"#;

#[test]
fn evaluate_export_and_ablate_from_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();

    let o = epd(&["evaluate", "--config", "run.toml", "--preset", "vote5"], dir.path());
    assert_eq!(code(&o), 0, "{o:?}");
    assert!(stdout(&o).contains("accuracy 100.00%"), "{}", stdout(&o));
    let report = dir.path().join("runs/main/report.json");
    assert!(report.exists());

    let o = epd(&["export", "--report", "runs/main/report.json", "--output", "preds.json"], dir.path());
    assert_eq!(code(&o), 0, "{o:?}");
    let preds: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("preds.json")).unwrap()).unwrap();
    assert_eq!(preds.len(), 12);

    let o = epd(&["ablate", "--config", "run.toml", "--suite", "inputs", "--output", "runs/suite"], dir.path());
    assert_eq!(code(&o), 0, "{o:?}");
    let table = stdout(&o);
    assert_eq!(table.lines().count(), 5, "{table}");
    assert!(table.contains("| 1 | claude-single |"));
    assert!(dir.path().join("runs/suite/ablation.csv").exists());
}

#[test]
fn fatal_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    // no claude backend for an arbitration preset
    fs::write(
        dir.path().join("run.toml"),
        "dataset = \"data/dataset.json\"\n[backends.gpt]\nkind = \"oracle-mock\"\n",
    )
    .unwrap();
    let o = epd(&["evaluate", "--config", "run.toml", "--preset", "arbitrate-duo"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("claude"));
    assert!(!dir.path().join("epd-run/results.jsonl").exists());
    let o = epd(&["evaluate", "--config", "missing.toml"], dir.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn per_sample_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    fs::write(
        dir.path().join("run.toml"),
        "dataset = \"data/dataset.json\"\n[backends.gpt]\nkind = \"fixture-mock\"\ndefault_response = \"The camera wearer waits.\"\n",
    )
    .unwrap();
    let o = epd(&["evaluate", "--config", "run.toml", "--preset", "zero-shot"], dir.path());
    assert_eq!(code(&o), 2, "{o:?}");
    assert!(stdout(&o).contains("12 failed"), "{}", stdout(&o));
}

#[test]
fn plan_and_extract_memory_with_builtin_kind() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let args = [
        "extract-memory", "--dataset", "data/dataset.json", "--backend", "oracle-mock", "--cache", "mem.jsonl",
    ];
    let o = epd(&args, dir.path());
    assert_eq!(code(&o), 0, "{o:?}");
    let journal = fs::read(dir.path().join("mem.jsonl")).unwrap();
    let o = epd(&args, dir.path());
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(dir.path().join("mem.jsonl")).unwrap(), journal);

    let o = epd(&["compact-memory", "--cache", "mem.jsonl"], dir.path());
    assert_eq!(code(&o), 0, "{o:?}");

    let o = epd(
        &["plan", "--dataset", "data/dataset.json", "--backend", "oracle-mock", "--preset", "four-shot", "--output", "p"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{o:?}");
    assert!(dir.path().join("p/transcripts.jsonl").exists());

    let o = epd(&["plan", "--dataset", "data/dataset.json", "--backend", "nonsense"], dir.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn validate_frames_reports_missing() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let o = epd(&["validate-frames", "--dataset", "data/dataset.json"], dir.path());
    assert_eq!(code(&o), 0, "{o:?}");
    let o = epd(&["validate-frames", "--dataset", "data/dataset.json", "--frame-root", "elsewhere"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(!stdout(&o).is_empty());
}

#[test]
fn presets_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let o = epd(&["presets"], dir.path());
    let out = stdout(&o);
    for name in ["zero-shot", "four-shot", "high-res-describe", "vote5", "arbitrate-duo", "claude-single", "gpt-with-frames", "gpt-memory-only"] {
        assert!(out.contains(name), "{name} missing");
    }
}
