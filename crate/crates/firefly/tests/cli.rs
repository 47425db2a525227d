//! End-to-end checks of the installed binary: exit codes, artifact layout,
//! and byte-level determinism of reruns.

use std::path::Path;
use std::process::{Command, Output};

fn firefly() -> Command {
    Command::new(env!("CARGO_BIN_EXE_firefly"))
}

fn run(args: &[&str]) -> Output {
    firefly().args(args).output().expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).expect("write config");
    path.to_string_lossy().into_owned()
}

fn tiny_toy_config(out_dir: &Path) -> String {
    format!(
        r#"{{
  "kind": "toy-rbf",
  "methods": ["firefly", "rand-split"],
  "seeds": [0, 1],
  "out_dir": {out:?},
  "growth": {{ "m_prime": 2, "step_one_iters": 5, "step_one_lr": 0.5, "init_scale": 0.1 }},
  "schedule": {{ "grow_phases": 2, "train_iters": 40, "learning_rate": 0.05 }},
  "data": {{ "n_points": 60, "truth_neurons": 3, "model_init_sd": 1.0 }},
  "baselines": {{ "k_trials": 2, "finetune_iters": 10 }}
}}"#,
        out = out_dir.to_string_lossy()
    )
}

#[test]
fn help_and_version_exit_zero() {
    let help = run(&["--help"]);
    assert!(help.status.success());
    let text = String::from_utf8_lossy(&help.stdout).into_owned();
    for sub in ["run", "continual", "gen-data", "report"] {
        assert!(text.contains(sub), "help does not mention {sub}");
    }
    assert!(run(&["--version"]).status.success());
}

#[test]
fn bad_invocations_exit_two() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["run"]).status.code(), Some(2));
    let missing = run(&["run", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(
        stderr_of(&missing).contains("/nonexistent/cfg.json"),
        "error should name the missing file"
    );
}

#[test]
fn unknown_config_field_is_named() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(
        dir.path(),
        "bad.json",
        r#"{ "kind": "toy-rbf", "methods": ["firefly"], "seeds": [0], "schedule": { "lerning_rate": 0.1 } }"#,
    );
    let out = run(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr_of(&out).contains("lerning_rate"),
        "stderr should name the unknown field: {}",
        stderr_of(&out)
    );
}

#[test]
fn invalid_thread_env_exits_two() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(dir.path(), "cfg.json", &tiny_toy_config(&dir.path().join("out")));
    let out = firefly()
        .args(["run", "--config", &cfg])
        .env("FIREFLY_THREADS", "many")
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("FIREFLY_THREADS"));
}

#[test]
fn toy_run_writes_artifacts_and_reruns_byte_identical() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out_dir = dir.path().join("out");
    let cfg = write_config(dir.path(), "cfg.json", &tiny_toy_config(&out_dir));

    let first = firefly()
        .args(["run", "--config", &cfg])
        .env("FIREFLY_THREADS", "1")
        .output()
        .expect("binary runs");
    assert!(
        first.status.success(),
        "run failed: {}",
        stderr_of(&first)
    );

    let aggregate = out_dir.join("aggregate.csv");
    let summary = out_dir.join("summary.json");
    assert!(aggregate.is_file());
    assert!(summary.is_file());
    for label in ["firefly", "rand-split"] {
        for seed in [0, 1] {
            assert!(
                out_dir.join("logs").join(label).join(format!("seed_{seed}.jsonl")).is_file(),
                "missing log for {label} seed {seed}"
            );
        }
    }

    let csv = std::fs::read_to_string(&aggregate).expect("aggregate");
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("method,phase,neurons,mean_loss,stddev_loss,seeds")
    );
    // Two methods, three phase boundaries each.
    assert_eq!(lines.count(), 6);
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&summary).expect("summary"))
            .expect("summary parses");
    assert_eq!(parsed["kind"], "toy-rbf");

    let before = std::fs::read(&aggregate).expect("aggregate bytes");
    let again = firefly()
        .args(["run", "--config", &cfg])
        .env("FIREFLY_THREADS", "1")
        .output()
        .expect("binary runs");
    assert!(again.status.success());
    assert_eq!(
        before,
        std::fs::read(&aggregate).expect("aggregate bytes"),
        "rerun changed aggregate.csv"
    );
}

#[test]
fn report_reads_logs_in_both_formats() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out_dir = dir.path().join("out");
    let cfg = write_config(dir.path(), "cfg.json", &tiny_toy_config(&out_dir));
    assert!(firefly()
        .args(["run", "--config", &cfg])
        .env("FIREFLY_THREADS", "1")
        .output()
        .expect("binary runs")
        .status
        .success());

    let logs = out_dir.join("logs").to_string_lossy().into_owned();
    let csv_out = run(&["report", &logs]);
    assert!(csv_out.status.success());
    let csv = String::from_utf8_lossy(&csv_out.stdout).into_owned();
    assert!(csv.starts_with("method,phase,neurons,mean_loss,stddev_loss,seeds"));

    let json_out = run(&["report", &logs, "--format", "json"]);
    assert!(json_out.status.success());
    let rows: serde_json::Value =
        serde_json::from_slice(&json_out.stdout).expect("report json parses");
    assert!(rows.as_array().is_some_and(|a| !a.is_empty()));
}

#[test]
fn gen_data_is_deterministic_with_stable_headers() {
    let dir = tempfile::tempdir().expect("tempdir");
    let toy = dir.path().join("toy");
    let toy_str = toy.to_string_lossy().into_owned();
    assert!(run(&[
        "gen-data", "--kind", "toy-rbf", "--out", &toy_str, "--seeds", "0,1", "--points", "50"
    ])
    .status
    .success());
    let one = std::fs::read(toy.join("toy_s0.csv")).expect("toy csv");
    assert!(String::from_utf8_lossy(&one).starts_with("x,y\n"));

    let again = dir.path().join("toy2");
    let again_str = again.to_string_lossy().into_owned();
    assert!(run(&[
        "gen-data", "--kind", "toy-rbf", "--out", &again_str, "--seeds", "0,1", "--points", "50"
    ])
    .status
    .success());
    assert_eq!(
        one,
        std::fs::read(again.join("toy_s0.csv")).expect("toy csv"),
        "same seed produced different data"
    );

    let tasks = dir.path().join("tasks");
    let tasks_str = tasks.to_string_lossy().into_owned();
    assert!(run(&[
        "gen-data", "--kind", "continual", "--out", &tasks_str, "--seeds", "3", "--tasks", "2",
        "--points", "40"
    ])
    .status
    .success());
    let task = std::fs::read_to_string(tasks.join("task1_s3.csv")).expect("task csv");
    assert!(task.starts_with("x1,x2,label\n"));
}

#[test]
fn continual_run_writes_task_logs_and_summary() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out_dir = dir.path().join("out");
    let cfg = write_config(
        dir.path(),
        "cl.json",
        &format!(
            r#"{{
  "kind": "continual",
  "seeds": [0],
  "out_dir": {out:?},
  "data": {{ "tasks": 2, "classes": 3, "points_per_task": 60, "cluster_sd": 0.3 }},
  "growth": {{ "step_one_iters": 5, "step_one_lr": 0.5, "init_scale": 0.1 }},
  "continual": {{ "initial_neurons": 3, "m_prime": 2, "budget_per_round": 1,
                 "mask_iters": 20, "mask_lr": 0.25, "finetune_iters": 40,
                 "learning_rate": 0.25, "target_accuracy": 0.5, "max_grow_rounds": 1 }}
}}"#,
            out = out_dir.to_string_lossy()
        ),
    );
    let out = firefly()
        .args(["continual", "--config", &cfg])
        .env("FIREFLY_THREADS", "1")
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "continual failed: {}", stderr_of(&out));

    let log = std::fs::read_to_string(out_dir.join("tasks").join("seed_0.jsonl")).expect("log");
    assert_eq!(log.lines().count(), 2, "one record per task");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).expect("summary"))
            .expect("summary parses");
    assert_eq!(summary["tasks"], 2);
    assert!(summary["mean_average_accuracy"].as_f64().is_some());
}

#[test]
fn report_survives_closed_stdout() {
    // `report ... | head -1` closes the pipe after one line; the binary
    // must exit cleanly instead of panicking on the broken pipe.
    let dir = tempfile::tempdir().expect("tempdir");
    let method_dir = dir.path().join("logs").join("m");
    std::fs::create_dir_all(&method_dir).expect("mkdir");
    let mut lines = String::new();
    for phase in 0..4000 {
        let rec = firefly::logs::GrowthRecord::boundary("m", 0, phase, "width", 1.0, 1, 4);
        lines.push_str(&serde_json::to_string(&rec).expect("record json"));
        lines.push('\n');
    }
    std::fs::write(method_dir.join("seed_0.jsonl"), lines).expect("write log");

    let logs = dir.path().join("logs").to_string_lossy().into_owned();
    for format in ["csv", "json"] {
        let mut child = firefly()
            .args(["report", &logs, "--format", format])
            .stdout(std::process::Stdio::piped())
            .stderr(std::process::Stdio::piped())
            .spawn()
            .expect("binary spawns");
        drop(child.stdout.take());
        let out = child.wait_with_output().expect("binary exits");
        let err = String::from_utf8_lossy(&out.stderr).into_owned();
        assert!(
            out.status.success(),
            "report --format {format} failed on closed stdout: {err}"
        );
        assert!(!err.contains("panicked"), "report panicked: {err}");
    }
}
