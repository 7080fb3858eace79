//! Command-line front end: dataset generation, training, evaluation,
//! pseudo-label analysis, and figure rendering, all driven by one JSON
//! experiment config.

mod chart;
mod config;

use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use dssn_core::analysis::{aggregate, analyze_items, rows_to_csv, ClassAgg};
use dssn_core::checkpoint::load_checkpoint;
use dssn_core::eval::{evaluate, EvalMetrics};
use dssn_core::model::SegModelParams;
use dssn_core::synthdata::{generate_dataset, load_split, save_split, DatasetIndex};
use dssn_core::trainer::{latest_checkpoint, train, PseudoThreshold, TrainInputs, TrainState};
use dssn_core::types::derive_seed;
use dssn_core::{Error, Result};

use config::{load_config, ExperimentConfig};

/// Ends training early after this many completed epochs (used to test
/// interruption and resume).
const STOP_AFTER_ENV: &str = "DSSN_STOP_AFTER_EPOCH";
const GEN_SPLIT_PURPOSE: u64 = 0x5350_4c49;

#[derive(Parser)]
#[command(
    name = "dssn",
    version,
    about = "Semi-supervised semantic segmentation on synthetic shape scenes"
)]
struct Cli {
    /// Path to a JSON experiment config; defaults apply without one.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides both the generator seed and the training seed.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Run name under the runs directory.
    #[arg(long, global = true, value_name = "NAME")]
    run: Option<String>,
    /// Allow overwriting an existing run or dataset directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset and write its split files.
    GenData,
    /// Train a model, writing metrics and checkpoints into the run dir.
    Train {
        /// Train on the labeled split alone.
        #[arg(long)]
        supervised_only: bool,
        /// Replace the class-adaptive thresholds with one fixed cutoff.
        #[arg(long, value_name = "TAU")]
        fixed_threshold: Option<f64>,
        /// Continue from the latest checkpoint in the run dir.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint and write eval.json.
    Eval {
        /// Checkpoint file; defaults to the latest in the run dir.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Which parameter set to evaluate.
        #[arg(long, value_enum, default_value_t)]
        which: Which,
        /// Split file to evaluate on.
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Score pseudo-label selection per class against ground truth.
    AnalyzePseudo {
        /// Checkpoint file; defaults to the latest in the run dir.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Which parameter set to analyze.
        #[arg(long, value_enum, default_value_t)]
        which: Which,
        /// Split file to analyze.
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Render figures from the run dir's recorded outputs.
    Plot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Default)]
enum Which {
    #[default]
    Teacher,
    Student,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed, cli.run.as_deref())?;
    cfg.validate()?;
    match &cli.command {
        Command::GenData => cmd_gen_data(&cfg, cli.force),
        Command::Train { supervised_only, fixed_threshold, resume } => {
            cmd_train(cfg, *supervised_only, *fixed_threshold, *resume, cli.force)
        }
        Command::Eval { checkpoint, which, split } => {
            cmd_eval(&cfg, checkpoint.as_deref(), *which, split)
        }
        Command::AnalyzePseudo { checkpoint, which, split } => {
            cmd_analyze_pseudo(&cfg, checkpoint.as_deref(), *which, split)
        }
        Command::Plot => cmd_plot(&cfg),
    }
}

fn dir_is_empty(path: &Path) -> Result<bool> {
    match fs::read_dir(path) {
        Ok(mut entries) => Ok(entries.next().is_none()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(true),
        Err(e) => Err(Error::io(path.to_path_buf(), e)),
    }
}

/// Deterministically partitions the generated ids into labeled,
/// unlabeled, and validation splits; each split keeps dataset order.
fn partition_ids(
    ids: &[String],
    labeled_count: usize,
    val_count: usize,
    seed: u64,
) -> (Vec<String>, Vec<String>, Vec<String>) {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    let mut order: Vec<usize> = (0..ids.len()).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(&[seed, ids.len() as u64, GEN_SPLIT_PURPOSE]));
    order.shuffle(&mut rng);
    let pick = |slice: &[usize]| {
        let mut chosen = slice.to_vec();
        chosen.sort_unstable();
        chosen.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>()
    };
    let val = pick(&order[..val_count]);
    let labeled = pick(&order[val_count..val_count + labeled_count]);
    let unlabeled = pick(&order[val_count + labeled_count..]);
    (labeled, unlabeled, val)
}

fn cmd_gen_data(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let root = &cfg.dataset_dir;
    if !dir_is_empty(root)? {
        if !force {
            return Err(Error::validation(format!(
                "dataset directory {} is not empty; pass --force to regenerate",
                root.display()
            )));
        }
        fs::remove_dir_all(root).map_err(|e| Error::io(root.clone(), e))?;
    }
    let index = generate_dataset(&cfg.synth, root)?;
    let (labeled, unlabeled, val) =
        partition_ids(&index.ids, cfg.labeled_count, cfg.val_count, cfg.synth.seed);
    for (name, ids) in [("labeled", &labeled), ("unlabeled", &unlabeled), ("val", &val)] {
        let mut split = index.clone();
        split.labeled_ids = ids.clone();
        save_split(&split, name)?;
    }
    info!(
        "generated {} images under {} ({} labeled / {} unlabeled / {} val)",
        index.ids.len(),
        root.display(),
        labeled.len(),
        unlabeled.len(),
        val.len()
    );
    Ok(())
}

fn split_ids(index: &DatasetIndex, name: &str) -> Result<Vec<String>> {
    Ok(load_split(index, name)?.labeled_ids)
}

fn stop_after_from_env() -> Result<Option<usize>> {
    match env::var(STOP_AFTER_ENV) {
        Ok(v) => {
            let n: usize = v.parse().map_err(|_| {
                Error::validation(format!("{STOP_AFTER_ENV} must be a positive integer, got {v:?}"))
            })?;
            if n == 0 {
                return Err(Error::validation(format!("{STOP_AFTER_ENV} must be >= 1")));
            }
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn cmd_train(
    mut cfg: ExperimentConfig,
    supervised_only: bool,
    fixed_threshold: Option<f64>,
    resume: bool,
    force: bool,
) -> Result<()> {
    if supervised_only {
        cfg.train.supervised_only = true;
    }
    if let Some(tau) = fixed_threshold {
        cfg.train.threshold = PseudoThreshold::Fixed { tau };
    }
    cfg.validate()?;

    let run_dir = cfg.run_dir();
    if resume {
        if dir_is_empty(&run_dir)? {
            return Err(Error::validation(format!(
                "cannot resume: run directory {} holds no checkpoint",
                run_dir.display()
            )));
        }
    } else if !dir_is_empty(&run_dir)? {
        if !force {
            return Err(Error::validation(format!(
                "run directory {} already exists; pass --force to overwrite or --resume to continue",
                run_dir.display()
            )));
        }
        fs::remove_dir_all(&run_dir).map_err(|e| Error::io(run_dir.clone(), e))?;
    }
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(run_dir.clone(), e))?;

    let snapshot = run_dir.join("config.json");
    if !resume || !snapshot.exists() {
        let text = serde_json::to_string_pretty(&cfg).expect("config serializes");
        fs::write(&snapshot, text + "\n").map_err(|e| Error::io(snapshot.clone(), e))?;
    }

    let index = DatasetIndex::open(&cfg.dataset_dir)?;
    let labeled = split_ids(&index, "labeled")?;
    let unlabeled = split_ids(&index, "unlabeled")?;
    let val = split_ids(&index, "val")?;
    let inputs = TrainInputs {
        index: &index,
        labeled: &labeled,
        unlabeled: &unlabeled,
        val: &val,
    };
    info!(
        "training {} epochs on {} labeled / {} unlabeled items, validating on {}",
        cfg.train.epochs,
        labeled.len(),
        unlabeled.len(),
        val.len()
    );
    let report = train(
        &cfg.train,
        &cfg.arch,
        &inputs,
        &run_dir,
        resume,
        stop_after_from_env()?,
    )?;
    println!(
        "best teacher mIoU {:.4} at epoch {}; metrics in {}",
        report.best_val_miou_teacher,
        report.best_epoch,
        run_dir.join("metrics.csv").display()
    );
    Ok(())
}

/// Loads the requested parameter set from `checkpoint`, or from the
/// newest checkpoint in the run directory when no path is given.
fn load_params(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    which: Which,
) -> Result<(SegModelParams, PathBuf)> {
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => latest_checkpoint(&cfg.run_dir())?.ok_or_else(|| {
            Error::validation(format!(
                "no checkpoint under {}; train first or pass --checkpoint",
                cfg.run_dir().display()
            ))
        })?,
    };
    let (state, _): (TrainState, _) = load_checkpoint(&path)?;
    let params = match which {
        Which::Teacher => state.teacher.params,
        Which::Student => state.student,
    };
    Ok((params, path))
}

fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    which: Which,
    split: &str,
) -> Result<()> {
    let (params, ckpt) = load_params(cfg, checkpoint, which)?;
    let index = DatasetIndex::open(&cfg.dataset_dir)?;
    let ids = split_ids(&index, split)?;
    info!("evaluating {:?} from {} on {} items", which, ckpt.display(), ids.len());
    let metrics = evaluate(&params, &index, &ids)?;
    let run_dir = cfg.run_dir();
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(run_dir.clone(), e))?;
    let out = run_dir.join("eval.json");
    let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    fs::write(&out, text + "\n").map_err(|e| Error::io(out.clone(), e))?;
    println!(
        "miou {:.4} pixel_acc {:.4} over {} pixels; written to {}",
        metrics.miou,
        metrics.pixel_acc,
        metrics.num_pixels,
        out.display()
    );
    Ok(())
}

fn fmt_rate(r: Option<f64>) -> String {
    r.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn cmd_analyze_pseudo(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    which: Which,
    split: &str,
) -> Result<()> {
    let (params, ckpt) = load_params(cfg, checkpoint, which)?;
    let index = DatasetIndex::open(&cfg.dataset_dir)?;
    let ids = split_ids(&index, split)?;
    info!(
        "scoring pseudo labels of {:?} from {} on {} items",
        which,
        ckpt.display(),
        ids.len()
    );
    let rows = analyze_items(&params, &index, &ids, &cfg.train.cplg)?;
    let aggs = aggregate(&rows, index.num_classes)?;

    let run_dir = cfg.run_dir();
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(run_dir.clone(), e))?;
    let csv_path = run_dir.join("pseudo_analysis.csv");
    fs::write(&csv_path, rows_to_csv(&rows)).map_err(|e| Error::io(csv_path.clone(), e))?;
    let json_path = run_dir.join("pseudo_analysis.json");
    let text = serde_json::to_string_pretty(&aggs).expect("aggregates serialize");
    fs::write(&json_path, text + "\n").map_err(|e| Error::io(json_path.clone(), e))?;

    println!("class  gt_px      recall adpt/f96    precision adpt/f96");
    for a in &aggs {
        println!(
            "{:<6} {:<10} {:>6}/{:<6}       {:>6}/{:<6}",
            a.class,
            a.gt_px,
            fmt_rate(a.recall_cplg),
            fmt_rate(a.recall_fixed[1]),
            fmt_rate(a.precision_cplg),
            fmt_rate(a.precision_fixed[1]),
        );
    }
    println!("rows in {}, aggregates in {}", csv_path.display(), json_path.display());
    Ok(())
}

fn cmd_plot(cfg: &ExperimentConfig) -> Result<()> {
    let run_dir = cfg.run_dir();
    let metrics_path = run_dir.join("metrics.csv");
    if !metrics_path.exists() {
        return Err(Error::validation(format!(
            "{} does not exist; train first",
            metrics_path.display()
        )));
    }
    let text = fs::read_to_string(&metrics_path).map_err(|e| Error::io(metrics_path.clone(), e))?;
    let rows = chart::parse_metrics(&text)?;
    let mut values = serde_json::Map::new();
    let mut written = Vec::new();

    let loss_path = run_dir.join("loss_curves.svg");
    chart::loss_curves(&loss_path, &rows)?;
    values.insert(
        "loss_curves".into(),
        json!({
            "epoch": rows.iter().map(|r| r.epoch).collect::<Vec<_>>(),
            "lr": rows.iter().map(|r| r.lr).collect::<Vec<_>>(),
            "loss_sup": rows.iter().map(|r| r.loss_sup).collect::<Vec<_>>(),
            "loss_cl_ls": rows.iter().map(|r| r.loss_cl_ls).collect::<Vec<_>>(),
            "loss_cl_hs": rows.iter().map(|r| r.loss_cl_hs).collect::<Vec<_>>(),
            "loss_w2s_l": rows.iter().map(|r| r.loss_w2s_l).collect::<Vec<_>>(),
            "loss_w2s_h": rows.iter().map(|r| r.loss_w2s_h).collect::<Vec<_>>(),
            "loss_total": rows.iter().map(|r| r.loss_total).collect::<Vec<_>>(),
            "val_miou_teacher": rows.iter().map(|r| r.val_miou_teacher).collect::<Vec<_>>(),
            "val_miou_student": rows.iter().map(|r| r.val_miou_student).collect::<Vec<_>>(),
        }),
    );
    written.push(loss_path);

    let eval_path = run_dir.join("eval.json");
    if eval_path.exists() {
        let text = fs::read_to_string(&eval_path).map_err(|e| Error::io(eval_path.clone(), e))?;
        let metrics: EvalMetrics =
            serde_json::from_str(&text).map_err(|e| Error::json(eval_path.clone(), e))?;
        let iou_path = run_dir.join("iou_bars.svg");
        chart::iou_bars(&iou_path, &metrics.per_class_iou, metrics.miou)?;
        values.insert(
            "iou_bars".into(),
            json!({"miou": metrics.miou, "per_class_iou": metrics.per_class_iou}),
        );
        written.push(iou_path);
    } else {
        info!("{} not found; skipping the IoU chart", eval_path.display());
    }

    let agg_path = run_dir.join("pseudo_analysis.json");
    if agg_path.exists() {
        let text = fs::read_to_string(&agg_path).map_err(|e| Error::io(agg_path.clone(), e))?;
        let aggs: Vec<ClassAgg> =
            serde_json::from_str(&text).map_err(|e| Error::json(agg_path.clone(), e))?;
        let thr_path = run_dir.join("threshold_comparison.svg");
        chart::threshold_bars(&thr_path, &aggs)?;
        values.insert(
            "threshold_comparison".into(),
            json!({
                "class": aggs.iter().map(|a| a.class).collect::<Vec<_>>(),
                "recall_cplg": aggs.iter().map(|a| a.recall_cplg).collect::<Vec<_>>(),
                "recall_f96": aggs.iter().map(|a| a.recall_fixed[1]).collect::<Vec<_>>(),
                "precision_cplg": aggs.iter().map(|a| a.precision_cplg).collect::<Vec<_>>(),
                "precision_f96": aggs.iter().map(|a| a.precision_fixed[1]).collect::<Vec<_>>(),
            }),
        );
        written.push(thr_path);
    } else {
        info!("{} not found; skipping the threshold chart", agg_path.display());
    }

    let values_path = run_dir.join("plot_values.json");
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(values))
        .expect("plot values serialize");
    fs::write(&values_path, text + "\n").map_err(|e| Error::io(values_path.clone(), e))?;
    written.push(values_path);
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}
