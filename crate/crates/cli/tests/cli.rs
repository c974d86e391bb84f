use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "grid.intersections_per_side=2",
    "grid.scene_side_m=400",
    "grid.cells_per_channel=4",
    "grid.dead_end_uturn=true",
    "sim.pursuers=2",
    "sim.evaders=1",
    "sim.background=0",
    "sim.capture_distance=30",
    "sim.episode_cap=40",
    "iese.conv_channels=[4]",
    "iese.attention_dim=8",
    "iese.output_dim=16",
    "dqn.head_hidden=16",
    "dqn.batch_size=8",
    "coordinator.hidden=[16, 8]",
    "coordinator.batch_size=8",
    "train.episodes=3",
    "train.eval_episodes=2",
];

fn hcmvp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hcmvp")).args(args).output().expect("binary runs")
}

fn with_tiny<'a>(mut args: Vec<&'a str>, extra: &[&'a str]) -> Vec<&'a str> {
    for s in TINY.iter().chain(extra) {
        args.push("--set");
        args.push(s);
    }
    args
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_into(dir: &Path, extra: &[&str]) {
    let out = dir.to_str().unwrap();
    let o = hcmvp(&with_tiny(vec!["train", "--out", out], extra));
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn selfcheck_passes_on_a_fresh_build() {
    let o = hcmvp(&["selfcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("PASS gradient: encoder + Q-head"));
}

#[test]
fn unknown_override_key_exits_2_naming_it() {
    let o = hcmvp(&["inspect-state", "--set", "sim.pursuerz=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sim.pursuerz"), "{}", stderr(&o));
}

#[test]
fn invalid_value_exits_2_naming_the_key() {
    let o = hcmvp(&["inspect-state", "--set", "sim.evaders=9"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sim.evaders"), "{}", stderr(&o));
}

#[test]
fn missing_files_exit_2_naming_them() {
    let o = hcmvp(&["inspect-state", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/run.toml"));
    let o = hcmvp(&["eval", "--checkpoint", "/nonexistent/ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/ckpt"));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error_naming_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    train_into(tmp.path(), &[]);
    let ckpt = tmp.path().join("final");
    fs::write(ckpt.join("agent0.params"), b"garbage").unwrap();
    let o = hcmvp(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("agent0.params"), "{}", stderr(&o));
}

#[test]
fn train_outputs_and_echo_reproduces_bit_for_bit() {
    let a = tempfile::tempdir().unwrap();
    train_into(a.path(), &["output.svg=true"]);
    for f in ["config.toml", "metrics.jsonl", "eval_summary.csv", "reward_curve.svg", "final/config.toml"] {
        assert!(a.path().join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(a.path().join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let b = tempfile::tempdir().unwrap();
    let echo = a.path().join("config.toml");
    let o = hcmvp(&["train", "--config", echo.to_str().unwrap(), "--out", b.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(b.path().join("metrics.jsonl")).unwrap(), metrics);
    assert_eq!(
        fs::read(a.path().join("final/agent0.params")).unwrap(),
        fs::read(b.path().join("final/agent0.params")).unwrap()
    );
}

#[test]
fn eval_simulate_and_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let g = tmp.path().join("g");
    let d = tmp.path().join("d");
    train_into(&g, &[]);
    train_into(&d, &["variant=dqn"]);

    let ev = tmp.path().join("eval");
    let o = hcmvp(&[
        "eval",
        "--checkpoint",
        g.join("final").to_str().unwrap(),
        "--episodes",
        "3",
        "--out",
        ev.to_str().unwrap(),
        "--steps",
        "--attention-dump",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(ev.join("episodes.jsonl")).unwrap().lines().count(), 3);
    let summary = fs::read_to_string(ev.join("summary.csv")).unwrap();
    assert!(summary.starts_with("statistic,Total Timestep,Total Reward,Average Reward"));
    assert!(fs::read_to_string(ev.join("steps.jsonl")).unwrap().contains("\"attention\""));

    let traj = tmp.path().join("traj.jsonl");
    let o = hcmvp(&[
        "simulate",
        "--checkpoint",
        g.join("final").to_str().unwrap(),
        "--seed",
        "7",
        "--out",
        traj.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<serde_json::Value> = fs::read_to_string(&traj)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(lines.len() >= 2);
    assert_eq!(lines[0]["clock"], 0);
    assert_eq!(lines[1]["clock"], 1);
    assert_eq!(lines[0]["vehicles"].as_array().unwrap().len(), 3);
    assert_eq!(lines.last().unwrap()["done"], true);

    let cmp = tmp.path().join("cmp");
    let o = hcmvp(&[
        "compare",
        "--checkpoint",
        g.join("final").to_str().unwrap(),
        "--checkpoint",
        d.join("final").to_str().unwrap(),
        "--episodes",
        "2",
        "--out",
        cmp.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(cmp.join("compare.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0], ["metric", "gqrl_iese", "dqn"]);
    let names: Vec<&str> = rows[1..].iter().map(|r| r[0]).collect();
    assert_eq!(names, ["Total Timestep", "Total Reward", "Average Reward"]);
    assert!(rows.iter().all(|r| r.len() == 3));
}

#[test]
fn resume_continues_the_metrics_stream() {
    let tmp = tempfile::tempdir().unwrap();
    train_into(tmp.path(), &["train.checkpoint_every=2"]);
    let full = fs::read_to_string(tmp.path().join("metrics.jsonl")).unwrap();
    let ckpt = tmp.path().join("checkpoints/episode-000002");
    let o = hcmvp(&[
        "train",
        "--resume",
        ckpt.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(tmp.path().join("metrics.jsonl")).unwrap(), full);
}

#[test]
fn inspect_state_prints_aligned_matrices() {
    let o = hcmvp(&with_tiny(vec!["inspect-state", "--seed", "3", "--step", "5", "--pursuer", "1"], &[]));
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("clock 5"));
    assert!(text.contains("pursuer 1"));
    assert!(!text.contains("pursuer 0"));
    assert!(text.contains("BN"), "{text}");
}
