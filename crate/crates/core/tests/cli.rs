use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

mod common;

use common::{rerun_identical, run_cli as run, TINY_LINEAR, TINY_TRANSFORMER};
use slimadam_core::rules::RuleSet;
use slimadam_core::snr::SnrTrajectory;

fn assert_rerun_identical(args: &[&str], out: &Path) -> BTreeMap<String, Vec<u8>> {
    rerun_identical(args, out).unwrap_or_else(|e| panic!("{e}"))
}

#[test]
fn train_is_deterministic_and_formats_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, TINY_TRANSFORMER).unwrap();
    let out = dir.path().join("out");
    let files = assert_rerun_identical(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &out,
    );
    for name in [
        "losses.csv",
        "snr.csv",
        "rules.txt",
        "savings.json",
        "run.json",
        "report.json",
    ] {
        assert!(files.contains_key(name), "missing {name}");
    }
    let snr_text = String::from_utf8(files["snr.csv"].clone()).unwrap();
    let traj = SnrTrajectory::from_csv(&snr_text).unwrap();
    assert!(!traj.is_empty());
    assert_eq!(traj.to_csv().unwrap(), snr_text);
    let rules_text = String::from_utf8(files["rules.txt"].clone()).unwrap();
    assert_eq!(
        RuleSet::from_text(&rules_text).unwrap().to_text(),
        rules_text
    );
}

#[test]
fn slimadam_train_and_derive_rules() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, format!("{TINY_TRANSFORMER}rules = \"slimadam\"\n")).unwrap();
    let out = dir.path().join("slim");
    let files = assert_rerun_identical(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &out,
    );
    let rules = RuleSet::from_text(std::str::from_utf8(&files["rules.txt"]).unwrap()).unwrap();
    assert!(!rules.is_empty());

    let adam_cfg = dir.path().join("adam.toml");
    fs::write(&adam_cfg, TINY_TRANSFORMER).unwrap();
    let adam_out = dir.path().join("adam");
    assert!(run(&[
        "train",
        "--config",
        adam_cfg.to_str().unwrap(),
        "--out",
        adam_out.to_str().unwrap()
    ])
    .status
    .success());
    let snr = adam_out.join("snr.csv");
    let derived = dir.path().join("derived");
    let files = assert_rerun_identical(
        &[
            "derive-rules",
            "--config",
            adam_cfg.to_str().unwrap(),
            "--snr",
            snr.to_str().unwrap(),
            "--cutoff",
            "0.5",
            "--out",
            derived.to_str().unwrap(),
        ],
        &derived,
    );
    let text = std::str::from_utf8(&files["rules.txt"]).unwrap();
    assert!(text.starts_with("# provenance: derived cutoff=0.5"));
    assert!(files.contains_key("savings.json"));
}

#[test]
fn sweeps_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, format!("{TINY_TRANSFORMER}snr = true\n")).unwrap();
    let c = cfg.to_str().unwrap();

    let out = dir.path().join("sweep");
    let files = assert_rerun_identical(
        &["lr-sweep", "--config", c, "--out", out.to_str().unwrap()],
        &out,
    );
    let sweep = String::from_utf8(files["sweep.csv"].clone()).unwrap();
    assert!(sweep.starts_with("optimizer,lr,loss,diverged\n"));
    assert_eq!(sweep.lines().count(), 11);

    let out = dir.path().join("snr_lr");
    let files = assert_rerun_identical(
        &["snr-vs-lr", "--config", c, "--out", out.to_str().unwrap()],
        &out,
    );
    let surface = String::from_utf8(files["savings_surface.csv"].clone()).unwrap();
    assert_eq!(surface.lines().count(), 1 + 5 * 4);

    let lin = dir.path().join("lin.toml");
    fs::write(&lin, TINY_LINEAR).unwrap();
    let out = dir.path().join("vocab");
    let files = assert_rerun_identical(
        &[
            "vocab-exp",
            "--config",
            lin.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &out,
    );
    let cells = String::from_utf8(files["vocab.csv"].clone()).unwrap();
    assert_eq!(cells.lines().count(), 1 + 2 * 16);
}

#[test]
fn savings_command() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sav");
    let files = assert_rerun_identical(
        &["savings", "--gpt-small", "--out", out.to_str().unwrap()],
        &out,
    );
    let report: serde_json::Value = serde_json::from_slice(&files["savings.json"]).unwrap();
    let f = report["fraction"].as_f64().unwrap();
    assert!((0.97..=0.995).contains(&f));
    let printed = run(&["savings", "--gpt-small"]);
    assert_eq!(printed.stdout, files["savings.json"]);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "learning_rate = 0.1\n").unwrap();
    assert_eq!(
        run(&["train", "--config", bad.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
    let missing = dir.path().join("missing.toml");
    assert_eq!(
        run(&["train", "--config", missing.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
    let invalid = dir.path().join("invalid.toml");
    fs::write(&invalid, "steps = 10\nwarmup = 10\n").unwrap();
    assert_eq!(
        run(&["train", "--config", invalid.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "model = \"mlp_classifier\"\ndata = \"blobs\"\nvocab = 4\nd_model = 16\nn_layers = 1\nsteps = 30\nwarmup = 2\nlr = 1e6\nclip_norm = 0\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(out.join("report.json").exists());
}
