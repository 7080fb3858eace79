//! End-to-end training: weak/strong batch assembly, the per-step forward
//! paths (supervised, two strong image views, two strong feature views,
//! teacher and detached-student pseudo labels), loss assembly, SGD with
//! polynomial learning-rate decay, the post-step teacher update, per-epoch
//! metrics, and checkpoint scheduling.
//!
//! Every random draw is seeded from `(seed, epoch, item, slot, purpose)`,
//! never from a shared mutable stream, so results do not depend on thread
//! count and a resumed run replays the exact draws of an uninterrupted one.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{
    apply_cutmix_channels, apply_cutmix_plane, aug_strong_image, aug_weak, feature_dropout_mask,
    sample_cutmix_box, AugConfig, CutMixBox,
};
use crate::autodiff::Tape;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::losses::{
    loss_contrastive, loss_sup, loss_sup_ohem, loss_w2s, total_loss, LossBundle, LossTerms,
    LossWeights,
};
use crate::model::{
    decode, decode_on_tape, ema_update, encode, encode_on_tape, init_model, params_onto_tape,
    predict_probs, Arch, SegModelParams, TeacherState,
};
use crate::optim::Sgd;
use crate::pseudolabel::{
    class_max, cplg_mask, cplg_thresholds, effective_pixel_mask, fixed_threshold_mask,
    make_pseudo_label, CplgParams, PseudoLabel,
};
use crate::synthdata::{load_item, DatasetIndex};
use crate::types::{derive_seed, hash_id, ImageBatch, LabelMask, ProbMap, IGNORE};

const INIT_PURPOSE: u64 = 0x494e_4954;
const SHUFFLE_LABELED: u64 = 0x5348_4c42;
const SHUFFLE_UNLABELED: u64 = 0x5348_554c;
const WEAK_AUG: u64 = 0x5745_414b;
const STRONG_BASE: u64 = 0x5354_524e;
const CUTMIX_GATE: u64 = 0x4347_5445;
const CUTMIX_BOX: u64 = 0x4342_4f58;
const FEATURE_DROP: u64 = 0x4644_5250;

/// Exact column set of `metrics.csv`.
pub const METRICS_HEADER: &str = "epoch,lr,loss_sup,loss_cl_ls,loss_cl_hs,loss_w2s_l,loss_w2s_h,loss_total,val_miou_teacher,val_miou_student,selected_px_l,selected_px_h";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SupLoss {
    #[default]
    Ce,
    Ohem { keep_thresh: f64, min_kept: usize },
}

/// How pseudo-label pixels are selected from teacher probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PseudoThreshold {
    /// Class-adaptive thresholds from per-class maxima.
    #[default]
    Cplg,
    /// One global confidence cutoff for every class.
    Fixed { tau: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub base_lr: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_alpha: f64,
    pub loss_weights: LossWeights,
    pub cplg: CplgParams,
    pub aug: AugConfig,
    pub sup_loss: SupLoss,
    pub threshold: PseudoThreshold,
    /// Skip all unlabeled paths; equivalent to zero loss weights but cheaper.
    pub supervised_only: bool,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_labeled: 8,
            batch_unlabeled: 8,
            base_lr: 0.01,
            lr_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            ema_alpha: 0.996,
            loss_weights: LossWeights::default(),
            cplg: CplgParams::default(),
            aug: AugConfig::default(),
            sup_loss: SupLoss::default(),
            threshold: PseudoThreshold::default(),
            supervised_only: false,
            seed: 0,
            checkpoint_every: 10,
            eval_every: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be >= 1"));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return Err(Error::validation("batch sizes must be >= 1"));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::validation("base_lr must be finite and > 0"));
        }
        if !(self.lr_power.is_finite() && self.lr_power > 0.0) {
            return Err(Error::validation("lr_power must be finite and > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::validation("weight_decay must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(Error::validation("ema_alpha must be in [0, 1]"));
        }
        if self.checkpoint_every == 0 || self.eval_every == 0 {
            return Err(Error::validation("checkpoint_every and eval_every must be >= 1"));
        }
        if let SupLoss::Ohem { keep_thresh, min_kept } = self.sup_loss {
            if !(0.0..=1.0).contains(&keep_thresh) {
                return Err(Error::validation("ohem keep_thresh must be in [0, 1]"));
            }
            if min_kept == 0 {
                return Err(Error::validation("ohem min_kept must be >= 1"));
            }
        }
        if let PseudoThreshold::Fixed { tau } = self.threshold {
            if !(0.0..1.0).contains(&tau) {
                return Err(Error::validation("fixed threshold must be in [0, 1)"));
            }
        }
        self.loss_weights.validate()?;
        self.cplg.validate()?;
        self.aug.validate()
    }
}

/// Polynomial decay: `base_lr * (1 - epoch/epochs)^power` for
/// `0 <= epoch <= epochs`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let frac = 1.0 - epoch as f64 / cfg.epochs as f64;
    cfg.base_lr * frac.powf(cfg.lr_power)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBundle,
    pub val_miou_teacher: Option<f64>,
    pub val_miou_student: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: SegModelParams,
    pub teacher: TeacherState,
    pub optimizer: Sgd,
    /// Completed epochs; the next epoch to run.
    pub epoch: usize,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
}

pub fn init_state(cfg: &TrainConfig, arch: &Arch) -> Result<TrainState> {
    cfg.validate()?;
    let student = init_model(arch, derive_seed(&[cfg.seed, INIT_PURPOSE]))?;
    let teacher = TeacherState::from_student(&student, cfg.ema_alpha)?;
    let optimizer = Sgd::new(&student, cfg.momentum, cfg.weight_decay)?;
    Ok(TrainState {
        student,
        teacher,
        optimizer,
        epoch: 0,
        seed: cfg.seed,
        history: Vec::new(),
    })
}

/// Weak-augmented labeled images with their cropped label masks.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub images: ImageBatch,
    pub labels: LabelMask,
}

/// Weak-augmented unlabeled images plus one base seed per item from which
/// all strong-view randomness is derived.
#[derive(Debug, Clone)]
pub struct UnlabeledBatch {
    pub images: ImageBatch,
    pub view_seeds: Vec<u64>,
}

fn pseudo_select(
    probs: &ProbMap,
    cfg: &TrainConfig,
) -> Result<(PseudoLabel, Array3<bool>, usize)> {
    let pl = make_pseudo_label(probs);
    let mask = match cfg.threshold {
        PseudoThreshold::Cplg => {
            let y_max = class_max(probs, cfg.cplg.scope);
            let thresholds = cplg_thresholds(&y_max, &cfg.cplg)?;
            cplg_mask(probs, &thresholds)
        }
        PseudoThreshold::Fixed { tau } => fixed_threshold_mask(probs, tau)?,
    };
    let eff = effective_pixel_mask(&mask, &pl);
    let n = eff.iter().filter(|&&v| v).count();
    Ok((pl, eff, n))
}

/// One optimization step. Runs the supervised path always; the unlabeled
/// paths only when a batch is given and `supervised_only` is off. The
/// teacher is updated exactly once, after the parameter step.
pub fn train_step(
    cfg: &TrainConfig,
    state: &mut TrainState,
    lr: f64,
    labeled: &LabeledBatch,
    unlabeled: Option<&UnlabeledBatch>,
) -> Result<LossBundle> {
    let mut tape = Tape::new();
    let arch = state.student.arch.clone();
    let tp = params_onto_tape(&mut tape, &state.student);

    // supervised path on weak labeled views
    let x_l = tape.constant(labeled.images.clone());
    let f_l = encode_on_tape(&mut tape, &arch, &tp, x_l);
    let h_l = decode_on_tape(&mut tape, &arch, &tp, f_l);
    let y_l = tape.softmax_channels(h_l);
    let (sup, _) = match cfg.sup_loss {
        SupLoss::Ce => loss_sup(&mut tape, y_l, &labeled.labels)?,
        SupLoss::Ohem { keep_thresh, min_kept } => {
            loss_sup_ohem(&mut tape, y_l, &labeled.labels, keep_thresh, min_kept)?
        }
    };

    let unlabeled = if cfg.supervised_only { None } else { unlabeled };
    let terms;
    let mut selected_l = 0usize;
    let mut selected_h = 0usize;
    match unlabeled {
        None => {
            let zero = tape.constant(arr0(0.0));
            terms = LossTerms {
                sup,
                cl_ls: zero,
                cl_hs: zero,
                w2s_l: zero,
                w2s_h: zero,
            };
        }
        Some(u) => {
            let (bu, _, h, w) = u.images.dim();
            if u.view_seeds.len() != bu {
                return Err(Error::validation("one view seed per unlabeled item required"));
            }

            // two strong photometric views per item, then one box per item
            // pasted identically into both views so the pair stays aligned
            let mut pre1 = Vec::with_capacity(bu);
            let mut pre2 = Vec::with_capacity(bu);
            let mut boxes: Vec<Option<CutMixBox>> = Vec::with_capacity(bu);
            for (i, &vs) in u.view_seeds.iter().enumerate() {
                let img = u.images.index_axis(Axis(0), i).to_owned();
                pre1.push(aug_strong_image(&img, &cfg.aug, derive_seed(&[vs, 1, STRONG_BASE]))?);
                pre2.push(aug_strong_image(&img, &cfg.aug, derive_seed(&[vs, 2, STRONG_BASE]))?);
                let mut gate = ChaCha8Rng::seed_from_u64(derive_seed(&[vs, CUTMIX_GATE]));
                boxes.push(if gate.random::<f64>() < cfg.aug.cutmix_prob {
                    Some(sample_cutmix_box(h, w, derive_seed(&[vs, CUTMIX_BOX])))
                } else {
                    None
                });
            }
            let mut xs1 = Array4::<f64>::zeros((bu, 3, h, w));
            let mut xs2 = Array4::<f64>::zeros((bu, 3, h, w));
            for i in 0..bu {
                let j = (i + 1) % bu;
                let (v1, v2) = match &boxes[i] {
                    Some(bx) => (
                        apply_cutmix_channels(&pre1[i], &pre1[j], bx)?,
                        apply_cutmix_channels(&pre2[i], &pre2[j], bx)?,
                    ),
                    None => (pre1[i].clone(), pre2[i].clone()),
                };
                xs1.index_axis_mut(Axis(0), i).assign(&v1);
                xs2.index_axis_mut(Axis(0), i).assign(&v2);
            }
            let v1 = tape.constant(xs1);
            let v2 = tape.constant(xs2);
            let f1 = encode_on_tape(&mut tape, &arch, &tp, v1);
            let h_ls1 = decode_on_tape(&mut tape, &arch, &tp, f1);
            let f2 = encode_on_tape(&mut tape, &arch, &tp, v2);
            let h_ls2 = decode_on_tape(&mut tape, &arch, &tp, f2);
            let cl_ls = loss_contrastive(&mut tape, h_ls1, h_ls2)?;

            // strong feature views: shared weak encoding, two dropout masks
            let x_u = tape.constant(u.images.clone());
            let z_hw = encode_on_tape(&mut tape, &arch, &tp, x_u);
            let z_shape = tape.value(z_hw).shape().to_vec();
            let rate = cfg.aug.feature_dropout_rate;
            let mut m1 = ArrayD::<f64>::zeros(z_shape.clone());
            let mut m2 = ArrayD::<f64>::zeros(z_shape.clone());
            for (i, &vs) in u.view_seeds.iter().enumerate() {
                let item_shape = &z_shape[1..];
                let d1 = feature_dropout_mask(item_shape, rate, derive_seed(&[vs, 1, FEATURE_DROP]))?;
                let d2 = feature_dropout_mask(item_shape, rate, derive_seed(&[vs, 2, FEATURE_DROP]))?;
                m1.index_axis_mut(Axis(0), i).assign(&d1);
                m2.index_axis_mut(Axis(0), i).assign(&d2);
            }
            let z1 = tape.mul_const(z_hw, m1);
            let z2 = tape.mul_const(z_hw, m2);
            let h_hs1 = decode_on_tape(&mut tape, &arch, &tp, z1);
            let h_hs2 = decode_on_tape(&mut tape, &arch, &tp, z2);
            let cl_hs = loss_contrastive(&mut tape, h_hs1, h_hs2)?;

            // teacher pseudo labels for the image-level strong views,
            // cut-mixed with the same per-item boxes as the inputs
            let ft = encode(&state.teacher.params, &u.images)?;
            let ht = decode(&state.teacher.params, &ft)?;
            let yt = predict_probs(&ht)?;
            let (pl_t, eff_t, _) = pseudo_select(&yt, cfg)?;
            let mut classes = pl_t.classes.clone();
            let mut eff = eff_t.clone();
            for i in 0..bu {
                if let Some(bx) = &boxes[i] {
                    let j = (i + 1) % bu;
                    let cm = apply_cutmix_plane(
                        &pl_t.classes.index_axis(Axis(0), i).to_owned(),
                        &pl_t.classes.index_axis(Axis(0), j).to_owned(),
                        bx,
                    )?;
                    classes.index_axis_mut(Axis(0), i).assign(&cm);
                    let em = apply_cutmix_plane(
                        &eff_t.index_axis(Axis(0), i).to_owned(),
                        &eff_t.index_axis(Axis(0), j).to_owned(),
                        bx,
                    )?;
                    eff.index_axis_mut(Axis(0), i).assign(&em);
                }
            }
            let pl_mixed = PseudoLabel {
                classes,
                num_classes: pl_t.num_classes,
            };
            let y_s1 = tape.softmax_channels(h_ls1);
            let y_s2 = tape.softmax_channels(h_ls2);
            let (w2s_l, n_l) = loss_w2s(&mut tape, y_s1, y_s2, &pl_mixed, &eff)?;
            selected_l = n_l;

            // detached student decode of the weak encoding supervises the
            // feature-level strong views; this path never sees a box
            let z_plain = tape
                .value(z_hw)
                .clone()
                .into_dimensionality::<Ix4>()
                .map_err(|_| Error::numeric("encoder output is not 4-dimensional"))?;
            let h_hw = decode(&state.student, &z_plain)?;
            let y_hw = predict_probs(&h_hw)?;
            let (pl_h, eff_h, n_h) = pseudo_select(&y_hw, cfg)?;
            let y_h1 = tape.softmax_channels(h_hs1);
            let y_h2 = tape.softmax_channels(h_hs2);
            let (w2s_h, _) = loss_w2s(&mut tape, y_h1, y_h2, &pl_h, &eff_h)?;
            selected_h = n_h;

            terms = LossTerms {
                sup,
                cl_ls,
                cl_hs,
                w2s_l,
                w2s_h,
            };
        }
    }

    let partial = LossBundle {
        sup: tape.scalar(terms.sup),
        cl_ls: tape.scalar(terms.cl_ls),
        cl_hs: tape.scalar(terms.cl_hs),
        w2s_l: tape.scalar(terms.w2s_l),
        w2s_h: tape.scalar(terms.w2s_h),
        total: f64::NAN,
        selected_px_l: selected_l as f64,
        selected_px_h: selected_h as f64,
    };
    let total = total_loss(&mut tape, &terms, &cfg.loss_weights)
        .map_err(|e| Error::numeric(format!("{e}; term values: {partial:?}")))?;

    let grads = tape.backward(total);
    let grad_tensors: Vec<ArrayD<f64>> = tp.vars.iter().map(|&v| grads.wrt(v).clone()).collect();
    state.optimizer.step(&mut state.student, &grad_tensors, lr)?;
    ema_update(&mut state.teacher, &state.student)?;

    Ok(LossBundle {
        total: tape.scalar(total),
        ..partial
    })
}

/// Dataset split handed to [`train`].
#[derive(Debug, Clone)]
pub struct TrainInputs<'a> {
    pub index: &'a DatasetIndex,
    pub labeled: &'a [String],
    pub unlabeled: &'a [String],
    pub val: &'a [String],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub best_val_miou_teacher: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

pub fn config_hash(cfg: &TrainConfig, arch: &Arch) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(cfg).expect("config serializes"));
    hasher.update(serde_json::to_vec(arch).expect("arch serializes"));
    hasher.finalize().into()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn load_labeled_batch(
    index: &DatasetIndex,
    items: &[(String, usize)],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<LabeledBatch> {
    let cs = cfg.aug.crop_size;
    let mut images = Array4::<f64>::zeros((items.len(), 3, cs, cs));
    let mut labels = Array3::<u8>::from_elem((items.len(), cs, cs), IGNORE);
    for (i, (id, slot)) in items.iter().enumerate() {
        let (img, mask) = load_item(index, id)?;
        let mask = mask
            .ok_or_else(|| Error::validation(format!("labeled item {id} has no mask")))?;
        let seed = derive_seed(&[cfg.seed, epoch as u64, hash_id(id), *slot as u64, WEAK_AUG]);
        let (wi, wm) = aug_weak(&img, Some(&mask), &cfg.aug, seed)?;
        images.index_axis_mut(Axis(0), i).assign(&wi);
        labels
            .index_axis_mut(Axis(0), i)
            .assign(&wm.expect("mask passed through weak augmentation"));
    }
    Ok(LabeledBatch { images, labels })
}

fn load_unlabeled_batch(
    index: &DatasetIndex,
    items: &[(String, usize)],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<UnlabeledBatch> {
    let cs = cfg.aug.crop_size;
    let mut images = Array4::<f64>::zeros((items.len(), 3, cs, cs));
    let mut view_seeds = Vec::with_capacity(items.len());
    for (i, (id, slot)) in items.iter().enumerate() {
        let (img, _) = load_item(index, id)?;
        let seed = derive_seed(&[cfg.seed, epoch as u64, hash_id(id), *slot as u64, WEAK_AUG]);
        let (wi, _) = aug_weak(&img, None, &cfg.aug, seed)?;
        images.index_axis_mut(Axis(0), i).assign(&wi);
        view_seeds.push(derive_seed(&[
            cfg.seed,
            epoch as u64,
            hash_id(id),
            *slot as u64,
            STRONG_BASE,
        ]));
    }
    Ok(UnlabeledBatch { images, view_seeds })
}

fn metrics_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_metrics(run_dir: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::with_capacity(64 * (history.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in history {
        let l = &r.losses;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.lr,
            l.sup,
            l.cl_ls,
            l.cl_hs,
            l.w2s_l,
            l.w2s_h,
            l.total,
            metrics_cell(r.val_miou_teacher),
            metrics_cell(r.val_miou_student),
            l.selected_px_l,
            l.selected_px_h,
        ));
    }
    let path = run_dir.join("metrics.csv");
    fs::write(&path, out).map_err(|e| Error::io(path, e))
}

fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(format!("ckpt_{epoch}"))
}

/// Newest checkpoint in a run directory, by epoch number in the file
/// name. A missing directory holds no checkpoints.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let mut best: Option<(usize, PathBuf)> = None;
    let entries = match fs::read_dir(run_dir) {
        Ok(entries) => entries,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(run_dir, e)),
    };
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(run_dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(num) = name.strip_prefix("ckpt_") else { continue };
        let Ok(epoch) = num.parse::<usize>() else { continue };
        if best.as_ref().is_none_or(|(b, _)| epoch > *b) {
            best = Some((epoch, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Trains for `cfg.epochs` epochs (or resumes to that point), writing
/// `metrics.csv` and `ckpt_<epoch>` files into `run_dir`. One epoch is one
/// pass over the labeled split; the unlabeled split is reshuffled per epoch
/// and cycled to fill every step. `stop_after` ends the run early after
/// that many completed epochs, checkpointing first (used to exercise
/// interruption and resume).
pub fn train(
    cfg: &TrainConfig,
    arch: &Arch,
    inputs: &TrainInputs,
    run_dir: &Path,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<TrainReport> {
    cfg.validate()?;
    arch.validate()?;
    if inputs.labeled.is_empty() {
        return Err(Error::validation("labeled split is empty"));
    }
    if inputs.val.is_empty() {
        return Err(Error::validation("validation split is empty"));
    }
    if inputs.unlabeled.is_empty() && !cfg.supervised_only {
        return Err(Error::validation(
            "unlabeled split is empty; set supervised_only to train without one",
        ));
    }
    if cfg.aug.crop_size % arch.stride() != 0 {
        return Err(Error::validation(format!(
            "crop size {} is not divisible by the model stride {}",
            cfg.aug.crop_size,
            arch.stride()
        )));
    }

    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let hash = config_hash(cfg, arch);
    let mut state = if resume {
        let path = latest_checkpoint(run_dir)?
            .ok_or_else(|| Error::validation("no checkpoint found to resume from"))?;
        let (state, stored) = load_checkpoint(&path)?;
        if stored != hash {
            return Err(Error::checkpoint_mismatch(format!(
                "config hash {} does not match checkpoint hash {}",
                hex(&hash),
                hex(&stored)
            )));
        }
        log::info!("resuming from {} at epoch {}", path.display(), state.epoch);
        state
    } else {
        init_state(cfg, arch)?
    };

    let steps = inputs.labeled.len().div_ceil(cfg.batch_labeled);
    while state.epoch < cfg.epochs {
        let e = state.epoch;
        let lr = lr_at(e, cfg);

        let mut perm_l: Vec<usize> = (0..inputs.labeled.len()).collect();
        perm_l.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[
            cfg.seed,
            e as u64,
            SHUFFLE_LABELED,
        ])));
        let mut perm_u: Vec<usize> = (0..inputs.unlabeled.len()).collect();
        perm_u.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[
            cfg.seed,
            e as u64,
            SHUFFLE_UNLABELED,
        ])));

        let mut sums = LossBundle::default();
        for s in 0..steps {
            let lo = s * cfg.batch_labeled;
            let hi = (lo + cfg.batch_labeled).min(inputs.labeled.len());
            let labeled_items: Vec<(String, usize)> = (lo..hi)
                .map(|k| (inputs.labeled[perm_l[k]].clone(), k))
                .collect();
            let labeled = load_labeled_batch(inputs.index, &labeled_items, cfg, e)?;

            let unlabeled = if cfg.supervised_only || inputs.unlabeled.is_empty() {
                None
            } else {
                let items: Vec<(String, usize)> = (0..cfg.batch_unlabeled)
                    .map(|j| {
                        let k = s * cfg.batch_unlabeled + j;
                        (inputs.unlabeled[perm_u[k % perm_u.len()]].clone(), k)
                    })
                    .collect();
                Some(load_unlabeled_batch(inputs.index, &items, cfg, e)?)
            };

            let bundle = train_step(cfg, &mut state, lr, &labeled, unlabeled.as_ref())?;
            sums.sup += bundle.sup;
            sums.cl_ls += bundle.cl_ls;
            sums.cl_hs += bundle.cl_hs;
            sums.w2s_l += bundle.w2s_l;
            sums.w2s_h += bundle.w2s_h;
            sums.total += bundle.total;
            sums.selected_px_l += bundle.selected_px_l;
            sums.selected_px_h += bundle.selected_px_h;
        }
        let inv = 1.0 / steps as f64;
        let losses = LossBundle {
            sup: sums.sup * inv,
            cl_ls: sums.cl_ls * inv,
            cl_hs: sums.cl_hs * inv,
            w2s_l: sums.w2s_l * inv,
            w2s_h: sums.w2s_h * inv,
            total: sums.total * inv,
            selected_px_l: sums.selected_px_l * inv,
            selected_px_h: sums.selected_px_h * inv,
        };

        let finished = e + 1;
        let do_eval = finished % cfg.eval_every == 0 || finished == cfg.epochs;
        let (val_t, val_s) = if do_eval {
            let t = evaluate(&state.teacher.params, inputs.index, inputs.val)?;
            let s = evaluate(&state.student, inputs.index, inputs.val)?;
            (Some(t.miou), Some(s.miou))
        } else {
            (None, None)
        };

        state.history.push(EpochRecord {
            epoch: e,
            lr,
            losses,
            val_miou_teacher: val_t,
            val_miou_student: val_s,
        });
        state.epoch = finished;
        write_metrics(run_dir, &state.history)?;

        let interrupted = stop_after == Some(finished);
        if finished % cfg.checkpoint_every == 0 || finished == cfg.epochs || interrupted {
            save_checkpoint(&state, &hash, &checkpoint_path(run_dir, e))?;
        }
        if interrupted {
            log::info!("stopping early after epoch {e} as requested");
            break;
        }
    }

    let (best_epoch, best) = state
        .history
        .iter()
        .filter_map(|r| r.val_miou_teacher.map(|m| (r.epoch, m)))
        .fold((0, f64::NEG_INFINITY), |acc, (e, m)| {
            if m > acc.1 {
                (e, m)
            } else {
                acc
            }
        });
    Ok(TrainReport {
        best_val_miou_teacher: best,
        best_epoch,
        history: state.history,
    })
}
