use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn masp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_masp")).args(args).current_dir(cwd).output().expect("spawn masp")
}

#[test]
fn unknown_flag_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["train", "eval", "vary-team", "ablate", "render", "selftest"] {
        let out = masp(&[sub, "--no-such-flag"], dir.path());
        assert_eq!(out.status.code(), Some(2), "{sub}");
    }
}

#[test]
fn every_subcommand_takes_config_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["train", "eval", "vary-team", "ablate", "render", "selftest"] {
        let out = masp(&[sub, "--help"], dir.path());
        let help = String::from_utf8_lossy(&out.stdout);
        assert!(out.status.success(), "{sub}");
        assert!(help.contains("--config") && help.contains("--seed"), "{sub}: {help}");
    }
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = masp(&["selftest", "--seed", "3"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn eval_writes_reports_and_render_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let out = masp(&["eval", "--seed", "1", "--episodes", "3", "--record", "2", "--out", "ev"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("ev/report.json")).unwrap()).unwrap();
    assert_eq!(report["version"], 1);
    assert_eq!(report["episodes"], 9);
    assert_eq!(report["seeds"], serde_json::json!([1, 2, 3]));
    let csv = fs::read_to_string(dir.path().join("ev/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let jsonl = fs::read_to_string(dir.path().join("ev/episodes.jsonl")).unwrap();
    assert!(jsonl.lines().count() > 2);

    let out = masp(&["render", "--input", "ev/episodes.jsonl", "--episode", "1", "--out", "ep.svg"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let svg = fs::read_to_string(dir.path().join("ep.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains(r#"class="trail""#));

    let out = masp(&["render", "--input", "ev/episodes.jsonl", "--episode", "7", "--out", "x.svg"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn vary_team_runs_scripted() {
    let dir = tempfile::tempdir().unwrap();
    let out = masp(&["vary-team", "--n1", "5", "--n2", "3", "--episodes", "2", "--out", "vt"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("vt/vary_team.json").exists());
}

#[test]
fn tiny_train_then_eval_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let job = serde_json::json!({
        "env": serde_json::to_value(masp::env::EnvConfig::mpe(3)).unwrap(),
        "train": { "total_env_steps": 200, "parallel_envs": 2, "eval_interval": 100, "eval_episodes": 2,
                   "widths": { "embed": 8, "heads": 2, "hidden": 8, "critic_hidden": 16 } },
    });
    fs::write(dir.path().join("job.json"), job.to_string()).unwrap();
    let out = masp(&["train", "--config", "job.json", "--seed", "4", "--out", "run"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let curve = fs::read_to_string(dir.path().join("run/curve.csv")).unwrap();
    assert!(curve.lines().count() >= 2);
    let out = masp(
        &["eval", "--n-agents", "3", "--policy", "masp", "--checkpoint", "run/checkpoint.json", "--episodes", "1", "--out", "ev"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = masp(&["eval", "--policy", "masp", "--checkpoint", "nope.json", "--episodes", "1"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn render_plays_an_episode_without_a_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = masp(&["render", "--policy", "scripted", "--seed", "9", "--out", "live/ep.svg"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let svg = fs::read_to_string(dir.path().join("live/ep.svg")).unwrap();
    assert!(svg.contains(r#"class="landmark""#) && svg.contains(r#"class="agent""#));
}
