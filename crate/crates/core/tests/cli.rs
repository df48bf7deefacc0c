use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn viewdiff(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_viewdiff"))
        .args(args)
        .env("VIEWDIFF_OUT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// Small dataset plus a 2-step tiny checkpoint.
fn fixture(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    let train = root.join("train");
    let out = viewdiff(
        root,
        &["gen-data", "--out", &s(&data), "--scenes", "2", "--test-scenes", "1", "--views", "6", "--resolution", "16"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = viewdiff(root, &["train", "--data", &s(&data), "--out", &s(&train), "--config", "tiny", "--steps", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    (data, train.join("checkpoint.safetensors"))
}

#[test]
fn unknown_flag_is_a_usage_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = viewdiff(dir.path(), &["gen-data", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    let out = viewdiff(dir.path(), &["train", "--data", "x", "--config", "enormous"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn missing_dataset_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = viewdiff(dir.path(), &["train", "--data", &s(&missing), "--config", "tiny"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn default_output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = viewdiff(dir.path(), &["gen-data", "--scenes", "1", "--test-scenes", "0", "--views", "2", "--resolution", "8"]);
    assert_eq!(out.status.code(), Some(0));
    let cfg = read_json(&dir.path().join("data/run_config.json"));
    assert_eq!(cfg["command"], "gen-data");
    assert_eq!(cfg["seed"], 0);
    assert!(cfg["git"].is_string());
    assert_eq!(cfg["resolved"]["views_per_scene"], 2);
    assert!(dir.path().join("data/manifest.json").is_file());
}

#[test]
fn pipeline_commands_share_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (data, ckpt) = fixture(root);
    let train_cfg = read_json(&root.join("train/run_config.json"));
    assert_eq!(train_cfg["resolved"]["config"]["model"]["resolution"], 16);
    assert_eq!(train_cfg["resolved"]["config"]["train"]["total_steps"], 2);

    // A single-view conditioning set makes both samplers identical.
    let mut dirs = Vec::new();
    for mode in ["naive", "stochastic"] {
        let out_dir = root.join(format!("sample-{mode}"));
        let out = viewdiff(
            root,
            &[
                "sample", "--checkpoint", &s(&ckpt), "--data", &s(&data), "--out", &s(&out_dir), "--frames", "1",
                "--steps", "16", "--mode", mode, "--seed", "5",
            ],
        );
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        dirs.push(out_dir);
    }
    for f in ["input.png", "frame_000.png", "trajectory.json"] {
        assert_eq!(fs::read(dirs[0].join(f)).unwrap(), fs::read(dirs[1].join(f)).unwrap(), "{f} differs");
    }

    // eval conditions on view 64 unless told otherwise.
    let out = viewdiff(root, &["eval", "--checkpoint", &s(&ckpt), "--data", &s(&data), "--steps", "4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("conditioning view 64"));

    let eval_dir = root.join("eval");
    let out = viewdiff(
        root,
        &[
            "eval", "--checkpoint", &s(&ckpt), "--data", &s(&data), "--out", &s(&eval_dir), "--cond-view", "0",
            "--steps", "4", "--max-frames", "2",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&eval_dir.join("eval.json"));
    assert_eq!(report["scenes"][0]["frames"].as_array().unwrap().len(), 2);
    assert!(report["mean_psnr"].as_f64().unwrap().is_finite());

    let score_dir = root.join("score");
    let out = viewdiff(
        root,
        &[
            "score", "--views", &s(&data), "--out", &s(&score_dir), "--holdout-frac", "0.2", "--field-steps", "3",
            "--rays-per-step", "32", "--samples-per-ray", "16",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&score_dir.join("score.json"));
    assert_eq!(report["holdout_count"], 1);
    assert!(score_dir.join("score.txt").is_file());
}

#[test]
fn custom_config_file_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let out = viewdiff(root, &["gen-data", "--out", &s(&data), "--scenes", "1", "--test-scenes", "0", "--views", "3", "--resolution", "8"]);
    assert_eq!(out.status.code(), Some(0));
    let cfg = root.join("small.toml");
    fs::write(
        &cfg,
        "base = \"tiny\"\n[model]\nresolution = 8\nch = 8\nnum_groups = 4\nemb_ch = 16\n[train]\nbatch_size = 2\ncheckpoint_every = 1\n",
    )
    .unwrap();
    let train = root.join("train");
    let run = |steps: &str, resume: bool| {
        let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", train.to_str().unwrap()];
        args.extend(["--config", cfg.to_str().unwrap(), "--steps", steps]);
        if resume {
            args.push("--resume");
        }
        viewdiff(root, &args)
    };
    let out = run("2", false);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run("4", true);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(train.join("metrics.txt")).unwrap();
    let steps: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(' ').next().unwrap()).collect();
    assert_eq!(steps, ["3", "4"]);
}
