//! End-to-end tests of the `dssn` binary: every subcommand, exit codes,
//! overwrite protection, determinism, and interrupted-run resume.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dssn_core::model::Arch;
use dssn_core::synthdata::SynthSpec;
use dssn_core::trainer::{TrainConfig, METRICS_HEADER};

fn dssn(dir: &Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dssn"));
    c.current_dir(dir)
        .env_remove("DSSN_RUNS_DIR")
        .env_remove("DSSN_STOP_AFTER_EPOCH");
    c
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert_eq!(
        out.status.code(),
        Some(0),
        "expected success\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_code(cmd: &mut Command, code: i32) -> Output {
    let out = cmd.output().expect("binary runs");
    assert_eq!(
        out.status.code(),
        Some(code),
        "expected exit {code}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path, seed: u64, epochs: usize) -> PathBuf {
    let synth = SynthSpec::with_defaults(3, (16, 16), 14, seed);
    let arch = Arch::probe(3);
    let mut train = TrainConfig::default();
    train.epochs = epochs;
    train.batch_labeled = 2;
    train.batch_unlabeled = 2;
    train.base_lr = 0.05;
    train.ema_alpha = 0.9;
    train.eval_every = 1;
    train.checkpoint_every = 1;
    train.seed = seed;
    train.aug.crop_size = 8;
    let cfg = serde_json::json!({
        "run_name": "t",
        "dataset_dir": dir.join("data"),
        "runs_dir": dir.join("runs"),
        "val_count": 4,
        "labeled_count": 4,
        "synth": synth,
        "arch": arch,
        "train": train,
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn full_pipeline_produces_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(dir, 5, 2);
    let cfg = cfg.to_str().unwrap();

    run_ok(dssn(dir).args(["--config", cfg, "gen-data"]));
    let data = dir.join("data");
    assert_eq!(fs::read_dir(data.join("images")).unwrap().count(), 14);
    assert_eq!(fs::read_dir(data.join("masks")).unwrap().count(), 14);
    let meta: serde_json::Value = serde_json::from_str(&read(&data.join("meta.json"))).unwrap();
    assert_eq!(meta["num_classes"], 3);
    assert!(meta["class_names"].is_array());
    assert!(meta.get("generator_spec").is_some());
    for (name, lines) in [("labeled", 4), ("unlabeled", 6), ("val", 4)] {
        let text = read(&data.join("splits").join(format!("{name}.txt")));
        assert!(text.ends_with('\n'));
        assert_eq!(text.lines().count(), lines, "split {name}");
    }

    run_ok(dssn(dir).args(["--config", cfg, "train"]));
    let run = dir.join("runs").join("t");
    let metrics = read(&run.join("metrics.csv"));
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    assert_eq!(lines.count(), 2);
    assert!(run.join("ckpt_0").is_file());
    assert!(run.join("ckpt_1").is_file());
    let snapshot: serde_json::Value = serde_json::from_str(&read(&run.join("config.json"))).unwrap();
    assert_eq!(snapshot["run_name"], "t");
    assert_eq!(snapshot["train"]["epochs"], 2);

    run_ok(dssn(dir).args(["--config", cfg, "eval", "--which", "student"]));
    run_ok(dssn(dir).args(["--config", cfg, "eval"]));
    let eval: serde_json::Value = serde_json::from_str(&read(&run.join("eval.json"))).unwrap();
    for key in ["miou", "per_class_iou", "pixel_acc", "num_pixels"] {
        assert!(eval.get(key).is_some(), "eval.json lacks {key}");
    }
    assert_eq!(eval["per_class_iou"].as_array().unwrap().len(), 3);

    run_ok(dssn(dir).args(["--config", cfg, "analyze-pseudo"]));
    let csv = read(&run.join("pseudo_analysis.csv"));
    assert_eq!(csv.lines().count(), 1 + 4 * 3);
    assert!(csv.lines().next().unwrap().starts_with("image_id,class,"));
    let aggs: serde_json::Value =
        serde_json::from_str(&read(&run.join("pseudo_analysis.json"))).unwrap();
    assert_eq!(aggs.as_array().unwrap().len(), 3);

    run_ok(dssn(dir).args(["--config", cfg, "plot"]));
    for name in ["loss_curves.svg", "iou_bars.svg", "threshold_comparison.svg"] {
        let text = read(&run.join(name));
        assert!(text.starts_with("<svg"), "{name} is not svg");
    }
    let values: serde_json::Value =
        serde_json::from_str(&read(&run.join("plot_values.json"))).unwrap();
    assert_eq!(values["iou_bars"]["per_class_iou"], eval["per_class_iou"]);
    assert_eq!(values["iou_bars"]["miou"], eval["miou"]);
    assert_eq!(values["loss_curves"]["epoch"].as_array().unwrap().len(), 2);
    assert_eq!(
        values["threshold_comparison"]["class"].as_array().unwrap().len(),
        3
    );
}

#[test]
fn same_seed_reproduces_byte_identical_outputs() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for tmp in [&first, &second] {
        let dir = tmp.path();
        let cfg = write_config(dir, 11, 2);
        let cfg = cfg.to_str().unwrap();
        run_ok(dssn(dir).args(["--config", cfg, "gen-data"]));
        run_ok(dssn(dir).args(["--config", cfg, "train"]));
        run_ok(dssn(dir).args(["--config", cfg, "eval"]));
        let run = dir.join("runs").join("t");
        outputs.push((read(&run.join("metrics.csv")), read(&run.join("eval.json"))));
    }
    assert_eq!(outputs[0].0, outputs[1].0, "metrics.csv differs between identical runs");
    assert_eq!(outputs[0].1, outputs[1].1, "eval.json differs between identical runs");
}

#[test]
fn existing_outputs_need_force() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(dir, 3, 1);
    let cfg = cfg.to_str().unwrap();

    run_ok(dssn(dir).args(["--config", cfg, "gen-data"]));
    let out = run_code(dssn(dir).args(["--config", cfg, "gen-data"]), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    run_ok(dssn(dir).args(["--config", cfg, "--force", "gen-data"]));

    run_ok(dssn(dir).args(["--config", cfg, "train"]));
    let out = run_code(dssn(dir).args(["--config", cfg, "train"]), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    run_ok(dssn(dir).args(["--config", cfg, "--force", "train"]));
}

#[test]
fn config_and_flag_validation_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let bad = dir.join("bad.json");
    fs::write(&bad, r#"{"run_name": "x", "zzz": 1}"#).unwrap();
    let out = run_code(dssn(dir).args(["--config", bad.to_str().unwrap(), "gen-data"]), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("zzz"));

    let cfg = write_config(dir, 3, 1);
    let cfg = cfg.to_str().unwrap();
    run_ok(dssn(dir).args(["--config", cfg, "gen-data"]));
    run_code(
        dssn(dir).args(["--config", cfg, "train", "--fixed-threshold", "1.5"]),
        2,
    );
    run_code(dssn(dir).args(["--config", cfg, "eval", "--which", "nobody"]), 2);
    run_code(dssn(dir).args(["--config", cfg, "eval"]), 2);
    run_code(dssn(dir).args(["--config", cfg, "plot"]), 2);
    run_code(dssn(dir).args(["--config", cfg, "train", "--resume"]), 2);
    let out = dssn(dir)
        .args(["--config", cfg, "eval", "--checkpoint", "/nonexistent/ckpt_0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_flags_change_the_recorded_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(dir, 8, 1);
    let cfg = cfg.to_str().unwrap();
    run_ok(dssn(dir).args(["--config", cfg, "gen-data"]));

    run_ok(dssn(dir).args(["--config", cfg, "--run", "sup", "train", "--supervised-only"]));
    let sup_dir = dir.join("runs").join("sup");
    let snapshot: serde_json::Value =
        serde_json::from_str(&read(&sup_dir.join("config.json"))).unwrap();
    assert_eq!(snapshot["train"]["supervised_only"], true);
    let metrics = read(&sup_dir.join("metrics.csv"));
    let row = metrics.lines().nth(1).unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields[3], "0", "cl low loss should be zero: {row}");
    assert_eq!(fields[10], "0", "no pixels should be selected: {row}");

    run_ok(dssn(dir).args([
        "--config", cfg, "--run", "fix", "train", "--fixed-threshold", "0.96",
    ]));
    let snapshot: serde_json::Value = serde_json::from_str(&read(
        &dir.join("runs").join("fix").join("config.json"),
    ))
    .unwrap();
    assert_eq!(snapshot["train"]["threshold"]["kind"], "fixed");
    assert_eq!(snapshot["train"]["threshold"]["tau"], 0.96);

    let custom = dir.join("elsewhere");
    run_ok(
        dssn(dir)
            .env("DSSN_RUNS_DIR", &custom)
            .args(["--config", cfg, "--run", "env", "--seed", "99", "train"]),
    );
    let snapshot: serde_json::Value =
        serde_json::from_str(&read(&custom.join("env").join("config.json"))).unwrap();
    assert_eq!(snapshot["train"]["seed"], 99);
    assert!(custom.join("env").join("metrics.csv").is_file());
}

#[test]
fn interrupted_run_resumes_to_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(dir, 13, 3);
    let cfg = cfg.to_str().unwrap();
    run_ok(dssn(dir).args(["--config", cfg, "gen-data"]));

    run_ok(dssn(dir).args(["--config", cfg, "--run", "full", "train"]));
    let full = read(&dir.join("runs").join("full").join("metrics.csv"));

    run_ok(
        dssn(dir)
            .env("DSSN_STOP_AFTER_EPOCH", "1")
            .args(["--config", cfg, "--run", "int", "train"]),
    );
    let partial = read(&dir.join("runs").join("int").join("metrics.csv"));
    assert_eq!(partial.lines().count(), 2, "one epoch before the interruption");

    run_ok(dssn(dir).args(["--config", cfg, "--run", "int", "train", "--resume"]));
    let resumed = read(&dir.join("runs").join("int").join("metrics.csv"));
    assert_eq!(resumed, full, "resumed run should match the uninterrupted one");

    let out = run_code(
        dssn(dir).args(["--config", cfg, "--run", "int", "--seed", "77", "train", "--resume"]),
        2,
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}
