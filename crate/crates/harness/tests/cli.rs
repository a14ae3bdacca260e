use std::path::{Path, PathBuf};
use std::process::Command;

use rt_harness::grid::read_results;
use rt_harness::{ExperimentConfig, Profile};

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn rtx(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_rtx"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn shipped_configs_load() {
    let mut n = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::load(&path, None)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 2);
    let paper =
        ExperimentConfig::load(&configs_dir().join("desk.toml"), Some(Profile::Paper)).unwrap();
    assert_eq!(paper.env.n_states, 128);
}

#[test]
fn run_summarize_and_gen_env() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(
        &config,
        "profile = \"desk\"\nd1_fractions = [0.5, 1.0]\nd1_reference_episodes = 20\nd2_episodes = 40\n\
         n_dataset_draws = 2\n[env]\nn_states = 6\nn_actions = 3\nsupport_degree = 2\n\
         [optim]\nsource_rounds = 50\ntarget_rounds = 50\njoint_rounds = 50\noffset_rounds = 50\ncheckpoint_interval = 25\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = rtx(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
        "--methods",
        "modular,coupled",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_results(&out.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 2);
    assert!(out.join("summary.csv").exists() && out.join("summary_plot.csv").exists());
    assert!(out.join("timings.csv").exists() && out.join("config.toml").exists());

    let again = dir.path().join("summary2.csv");
    let o = rtx(&[
        "summarize",
        "--in",
        out.join("results.csv").to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(
        std::fs::read(&again).unwrap(),
        std::fs::read(out.join("summary.csv")).unwrap()
    );

    let env = dir.path().join("env.json");
    let o = rtx(&[
        "gen-env",
        "--config",
        config.to_str().unwrap(),
        "--out",
        env.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert!(std::fs::read_to_string(&env).unwrap().contains("tv_avg"));

    // the written config reproduces the run
    let reloaded = ExperimentConfig::load(&out.join("config.toml"), None).unwrap();
    assert_eq!(reloaded.d1_fractions, vec![0.5, 1.0]);
}

#[test]
fn certify_reports_and_detects_wrong_sign() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(
        &config,
        "[env]\nn_states = 5\nn_actions = 2\nsupport_degree = 2\n[certify]\ntrials = 10\ndirections = 5\nproperty_instances = 1\n",
    )
    .unwrap();
    let report = dir.path().join("cert.json");
    let args = [
        "certify",
        "--config",
        config.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ];
    let o = rtx(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(std::fs::read_to_string(&report)
        .unwrap()
        .contains("constants"));
    let mut bad = args.to_vec();
    bad.push("--inject-wrong-sign");
    let o = rtx(&bad);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "profile = \"desk\"\nlearning_rate = 1.0\n").unwrap();
    let o = rtx(&[
        "gen-env",
        "--config",
        config.to_str().unwrap(),
        "--out",
        "unused.json",
    ]);
    assert!(!o.status.success());
}
