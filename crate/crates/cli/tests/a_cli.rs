//! Runs the binary end to end.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use safecritic::eval::EvalReport;
use safecritic_cli::RunConfig;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_safecritic"));
    cmd.env_remove("SAFECRITIC_OUTPUT");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn printed_dir(out: &Output) -> PathBuf {
    PathBuf::from(String::from_utf8_lossy(&out.stdout).trim())
}

const SMALL: &[&str] = &[
    "--set", "resolution=51",
    "--set", "eval.episodes=5",
    "--set", "b2e.total_episodes=20",
    "--set", "b2e.max_steps=40",
    "--set", "b2e.hidden=[16, 16]",
    "--set", "b2e.max_epochs=300",
    "--set", "b2e.max_passes=10",
    "--set", "b2e.lr_start=0.003",
    "--set", "sbe.total_episodes=12",
    "--set", "sbe.max_steps=40",
    "--set", "sbe.hidden=[16, 16]",
    "--set", "sbe.batch_size=16",
];

fn train(out_dir: &Path, algo: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--quiet", "--algorithm", algo, "-o", out_dir.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn print_config_round_trips_defaults() {
    let out = run(&["print-config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "seeds = [3, 4]\n[b2e]\ntotal_episodes = 30\n").unwrap();
    let out = run(&["print-config", "-c", path.to_str().unwrap(), "--set", "b2e.total_episodes=40"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let config = RunConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(config.seeds, vec![3, 4]);
    assert_eq!(config.b2e.total_episodes, 40);
}

#[test]
fn unknown_key_exits_with_config_code() {
    let out = run(&["print-config", "--set", "b2e.learning_rate=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
}

#[test]
fn oracle_rejects_coarse_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["oracle", "-o", dir.path().to_str().unwrap(), "--set", "oracle_resolutions=[31]"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("31"));
}

#[test]
fn oracle_writes_masks_and_refinement() {
    let dir = tempfile::tempdir().unwrap();
    let args = |d: &Path| {
        run(&["oracle", "-o", d.to_str().unwrap(), "--set", "oracle_resolutions=[51, 101]"])
    };
    let out = args(dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let oracle_dir = printed_dir(&out);
    for stem in ["safe_51", "safe_101", "reach_avoid_51", "reach_avoid_101"] {
        assert!(oracle_dir.join(format!("{stem}.csv")).exists(), "{stem}");
        assert!(oracle_dir.join(format!("{stem}.json")).exists(), "{stem}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(oracle_dir.join("oracle.json")).unwrap()).unwrap();
    assert_eq!(summary["refinement"].as_array().unwrap().len(), 1);
    assert!(summary["refinement"][0]["fraction"].as_f64().unwrap() < 0.05);

    let again = tempfile::tempdir().unwrap();
    let out = args(again.path());
    assert!(out.status.success());
    for file in ["safe_101.csv", "reach_avoid_51.csv", "oracle.json"] {
        assert_eq!(
            std::fs::read(oracle_dir.join(file)).unwrap(),
            std::fs::read(printed_dir(&out).join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["oracle", "--set", "oracle_resolutions=[51]"])
        .env("SAFECRITIC_OUTPUT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(printed_dir(&out), dir.path().join("oracle"));
}

#[test]
fn atlas_passes_and_is_byte_stable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run(&["atlas", "-o", a.path().to_str().unwrap()]);
    let second = run(&["atlas", "-o", b.path().to_str().unwrap()]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(second.status.success());
    let bytes = |out: &Output| std::fs::read(printed_dir(out).join("atlas.json")).unwrap();
    assert_eq!(bytes(&first), bytes(&second));
}

#[test]
fn corrupted_verifier_is_a_theorem_violation() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["atlas", "--corrupt-verifier", "-o", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(dir.path().join("atlas/atlas.json").exists());
}

#[test]
fn b2e_smoke_run_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "b2e", &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    let algo_dir = printed_dir(&out);
    let seed = algo_dir.join("seed_0");
    for file in ["config.toml", "checkpoint.json", "rounds.jsonl", "rounds.csv", "metrics.json", "curve.csv", "consistency.json"] {
        assert!(seed.join(file).exists(), "{file}");
    }
    let rounds = std::fs::read_to_string(seed.join("rounds.jsonl")).unwrap();
    assert_eq!(rounds.lines().count(), 2);
    assert!(algo_dir.join("aggregate.csv").exists());
    let saved = RunConfig::from_toml(&std::fs::read_to_string(seed.join("config.toml")).unwrap()).unwrap();
    assert_eq!(saved.b2e.total_episodes, 20);

    let ckpt = seed.join("checkpoint.json");
    let mut args = vec!["eval", "--checkpoint", ckpt.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    let out = run(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(printed_dir(&out).join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report.algo, "b2e");
    assert_eq!(report.policies.len(), 1);
    assert!((0.0..=1.0).contains(&report.policies[0].safety.rate));

    // the default hidden layers disagree with the checkpoint
    let out = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--set", "resolution=51"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("b2e.hidden"), "{}", stderr(&out));
    let mut args = vec!["eval", "--checkpoint", ckpt.to_str().unwrap(), "--set", "env.torque_levels=3"];
    args.extend_from_slice(SMALL);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("env.torque_levels"), "{}", stderr(&out));
}

#[test]
fn sbe_two_seeds_and_threshold_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "sbe", &["--set", "seeds=[1, 2]"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let algo_dir = printed_dir(&out);
    assert!(algo_dir.join("seed_1/episodes.csv").exists());
    assert!(algo_dir.join("seed_2/checkpoint.json").exists());
    let aggregate = std::fs::read_to_string(algo_dir.join("aggregate.csv")).unwrap();
    assert_eq!(aggregate.lines().count(), 13);
    assert!(aggregate.starts_with("episode,mean,stderr,ci_low,ci_high"));

    let ckpt = algo_dir.join("seed_1/checkpoint.json");
    let mut args = vec!["eval", "--checkpoint", ckpt.to_str().unwrap(), "--set", "etas=[0.0, 0.087, 0.175, 0.262]"];
    args.extend_from_slice(SMALL);
    let out = run(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(printed_dir(&out).join("metrics.json")).unwrap()).unwrap();
    let etas: Vec<f64> = report.policies.iter().map(|p| p.eta.unwrap()).collect();
    assert_eq!(etas, vec![0.0, 0.087, 0.175, 0.262]);
}

#[test]
fn training_abort_writes_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "b2e", &["--set", "b2e.max_epochs=1", "--set", "abort_on_inconsistent=true"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let diag = dir.path().join("b2e/seed_0/diagnostics.json");
    let text = std::fs::read_to_string(diag).unwrap();
    assert!(text.contains("\"error\""));
}

#[test]
fn missing_checkpoint_is_a_clean_error() {
    let out = run(&["eval", "--checkpoint", "/nonexistent/checkpoint.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("/nonexistent/checkpoint.json"));
}

#[test]
fn train_rejects_non_training_algorithm() {
    let out = run(&["train", "--set", "algorithm=atlas"]);
    assert_eq!(out.status.code(), Some(2));
}
