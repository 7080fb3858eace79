//! Temporary calibration harness; not part of the test suite.

use std::time::Instant;

use dssn_core::model::Arch;
use dssn_core::synthdata::{generate_dataset, SynthSpec};
use dssn_core::trainer::{train, TrainConfig, TrainInputs};

fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}
fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

#[test]
#[ignore]
fn calibrate() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec::with_defaults(4, (64, 64), 264, 1000);
    let index = generate_dataset(&spec, dir.path()).unwrap();
    println!("gen: {:.1}s", t0.elapsed().as_secs_f64());

    // Deterministic split: first 64 val, next 20 labeled, rest unlabeled.
    let ids = index.ids.clone();
    let val: Vec<String> = ids[..64].to_vec();
    let labeled: Vec<String> = ids[64..84].to_vec();
    let unlabeled: Vec<String> = ids[84..264].to_vec();

    let mut cfg = TrainConfig::default();
    cfg.epochs = env_usize("CAL_EPOCHS", 40);
    cfg.batch_labeled = env_usize("CAL_BL", 4);
    cfg.batch_unlabeled = env_usize("CAL_BU", 4);
    cfg.base_lr = env_f64("CAL_LR", 0.1);
    cfg.ema_alpha = env_f64("CAL_ALPHA", 0.98);
    cfg.aug.crop_size = env_usize("CAL_CROP", 16);
    cfg.checkpoint_every = cfg.epochs;
    cfg.eval_every = env_usize("CAL_EVAL_EVERY", cfg.epochs);
    cfg.supervised_only = std::env::var("CAL_SUP").is_ok();
    cfg.seed = env_usize("CAL_SEED", 0) as u64;
    let arch = Arch::toy(4);

    let inputs = TrainInputs {
        index: &index,
        labeled: &labeled,
        unlabeled: &unlabeled,
        val: &val,
    };
    let t1 = Instant::now();
    let run_dir = dir.path().join("run");
    let report = train(&cfg, &arch, &inputs, &run_dir, false, None).unwrap();
    let dt = t1.elapsed().as_secs_f64();
    let last = report.history.last().unwrap();
    println!(
        "train: {dt:.1}s ({:.3}s/epoch)  sup={} final teacher miou={:?} student={:?} best={:.4} sel_l={} sel_h={}",
        dt / cfg.epochs as f64,
        cfg.supervised_only,
        last.val_miou_teacher,
        last.val_miou_student,
        report.best_val_miou_teacher,
        last.losses.selected_px_l,
        last.losses.selected_px_h,
    );
}
