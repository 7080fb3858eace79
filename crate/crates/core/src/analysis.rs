//! Pseudo-label quality analysis: per-image, per-class selection counts
//! under the class-adaptive thresholds and under fixed cutoffs, scored
//! against ground truth where a mask exists.

use ndarray::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{decode, encode, predict_probs, SegModelParams};
use crate::pseudolabel::{
    class_max, cplg_mask, cplg_thresholds, effective_pixel_mask, fixed_threshold_mask,
    make_pseudo_label, CplgParams,
};
use crate::synthdata::{load_item, DatasetIndex};
use crate::types::{Mask, ProbMap, IGNORE};

/// Fixed cutoffs reported alongside the adaptive thresholds.
pub const FIXED_TAUS: [f64; 2] = [0.92, 0.96];

/// Column set of the analysis CSV, one row per (image, class).
pub const PSEUDO_CSV_HEADER: &str = "image_id,class,has_gt,y_max,tau,gt_px,pl_px,sel_cplg,sel_cplg_correct,sel_f92,sel_f92_correct,sel_f96,sel_f96_correct";

/// Selection counts for one class of one image.
///
/// `sel_*` counts pixels whose pseudo label is this class and whose
/// confidence cleared the respective threshold; the `_correct` twin
/// additionally requires ground-truth agreement and stays 0 when the
/// image has no mask.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PseudoRow {
    pub image_id: String,
    pub class: usize,
    pub has_gt: bool,
    /// Image-wide maximum predicted probability of this class.
    pub y_max: f64,
    /// Adaptive threshold applied to this class.
    pub tau: f64,
    /// Ground-truth pixels of this class.
    pub gt_px: u64,
    /// Pixels whose pseudo label (argmax) is this class.
    pub pl_px: u64,
    pub sel_cplg: u64,
    pub sel_cplg_correct: u64,
    /// Selected under the fixed cutoffs in [`FIXED_TAUS`], in order.
    pub sel_fixed: [u64; 2],
    pub sel_fixed_correct: [u64; 2],
}

/// Per-class totals over every row that carries ground truth.
///
/// Recall is correct-selected over ground-truth pixels; precision is
/// correct-selected over selected. Either is `None` when its denominator
/// is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAgg {
    pub class: usize,
    pub gt_px: u64,
    pub pl_px: u64,
    pub sel_cplg: u64,
    pub sel_cplg_correct: u64,
    pub sel_fixed: [u64; 2],
    pub sel_fixed_correct: [u64; 2],
    pub recall_cplg: Option<f64>,
    pub precision_cplg: Option<f64>,
    pub recall_fixed: [Option<f64>; 2],
    pub precision_fixed: [Option<f64>; 2],
}

fn count_selected(
    selected: &Array3<bool>,
    classes: &Array3<u8>,
    gt: Option<&Mask>,
    class: usize,
) -> (u64, u64) {
    let (_, h, w) = classes.dim();
    let mut sel = 0u64;
    let mut correct = 0u64;
    for y in 0..h {
        for x in 0..w {
            if classes[(0, y, x)] as usize == class && selected[(0, y, x)] {
                sel += 1;
                if let Some(m) = gt {
                    if m[(y, x)] as usize == class {
                        correct += 1;
                    }
                }
            }
        }
    }
    (sel, correct)
}

/// Scores the pseudo labels of a single image (`probs` of shape
/// `(1, C, H, W)`) and returns one row per class.
pub fn analyze_probs(
    image_id: &str,
    probs: &ProbMap,
    gt: Option<&Mask>,
    params: &CplgParams,
) -> Result<Vec<PseudoRow>> {
    let (b, num_classes, h, w) = probs.dim();
    if b != 1 {
        return Err(Error::validation(format!(
            "analysis expects one image at a time, got a batch of {b}"
        )));
    }
    if let Some(m) = gt {
        if m.dim() != (h, w) {
            return Err(Error::validation(format!(
                "mask is {:?}, probabilities are {h}x{w}",
                m.dim()
            )));
        }
    }
    let pl = make_pseudo_label(probs);
    let thresholds = cplg_thresholds(&class_max(probs, params.scope), params)?;
    let adaptive = effective_pixel_mask(&cplg_mask(probs, &thresholds), &pl);
    let mut fixed = Vec::with_capacity(FIXED_TAUS.len());
    for tau in FIXED_TAUS {
        fixed.push(effective_pixel_mask(&fixed_threshold_mask(probs, tau)?, &pl));
    }

    let mut rows = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let gt_px = gt.map_or(0, |m| {
            m.iter().filter(|&&v| v as usize == class && v != IGNORE).count() as u64
        });
        let pl_px = pl.classes.iter().filter(|&&v| v as usize == class).count() as u64;
        let (sel_cplg, sel_cplg_correct) = count_selected(&adaptive, &pl.classes, gt, class);
        let mut sel_fixed = [0u64; 2];
        let mut sel_fixed_correct = [0u64; 2];
        for (k, mask) in fixed.iter().enumerate() {
            let (s, c) = count_selected(mask, &pl.classes, gt, class);
            sel_fixed[k] = s;
            sel_fixed_correct[k] = c;
        }
        rows.push(PseudoRow {
            image_id: image_id.to_string(),
            class,
            has_gt: gt.is_some(),
            y_max: thresholds.y_max[(0, class)],
            tau: thresholds.tau[(0, class)],
            gt_px,
            pl_px,
            sel_cplg,
            sel_cplg_correct,
            sel_fixed,
            sel_fixed_correct,
        });
    }
    Ok(rows)
}

/// Runs the model over each listed item at native resolution and scores
/// its pseudo labels. Rows come back grouped by item, in `ids` order.
pub fn analyze_items(
    params: &SegModelParams,
    index: &DatasetIndex,
    ids: &[String],
    cplg: &CplgParams,
) -> Result<Vec<PseudoRow>> {
    if ids.is_empty() {
        return Err(Error::validation("analysis split is empty"));
    }
    if params.arch.num_classes != index.num_classes {
        return Err(Error::validation(format!(
            "model predicts {} classes, dataset has {}",
            params.arch.num_classes, index.num_classes
        )));
    }
    let per_item: Vec<Vec<PseudoRow>> = ids
        .par_iter()
        .map(|id| {
            let (image, mask) = load_item(index, id)?;
            let batch = image.insert_axis(Axis(0));
            let probs = predict_probs(&decode(params, &encode(params, &batch)?)?)?;
            analyze_probs(id, &probs, mask.as_ref(), cplg)
        })
        .collect::<Result<_>>()?;
    Ok(per_item.into_iter().flatten().collect())
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Sums the rows that carry ground truth into per-class totals and rates.
pub fn aggregate(rows: &[PseudoRow], num_classes: usize) -> Result<Vec<ClassAgg>> {
    for row in rows {
        if row.class >= num_classes {
            return Err(Error::validation(format!(
                "row for {} names class {}, expected fewer than {num_classes}",
                row.image_id, row.class
            )));
        }
    }
    let mut aggs: Vec<ClassAgg> = (0..num_classes)
        .map(|class| ClassAgg {
            class,
            gt_px: 0,
            pl_px: 0,
            sel_cplg: 0,
            sel_cplg_correct: 0,
            sel_fixed: [0; 2],
            sel_fixed_correct: [0; 2],
            recall_cplg: None,
            precision_cplg: None,
            recall_fixed: [None; 2],
            precision_fixed: [None; 2],
        })
        .collect();
    for row in rows.iter().filter(|r| r.has_gt) {
        let a = &mut aggs[row.class];
        a.gt_px += row.gt_px;
        a.pl_px += row.pl_px;
        a.sel_cplg += row.sel_cplg;
        a.sel_cplg_correct += row.sel_cplg_correct;
        for k in 0..FIXED_TAUS.len() {
            a.sel_fixed[k] += row.sel_fixed[k];
            a.sel_fixed_correct[k] += row.sel_fixed_correct[k];
        }
    }
    for a in &mut aggs {
        a.recall_cplg = ratio(a.sel_cplg_correct, a.gt_px);
        a.precision_cplg = ratio(a.sel_cplg_correct, a.sel_cplg);
        for k in 0..FIXED_TAUS.len() {
            a.recall_fixed[k] = ratio(a.sel_fixed_correct[k], a.gt_px);
            a.precision_fixed[k] = ratio(a.sel_fixed_correct[k], a.sel_fixed[k]);
        }
    }
    Ok(aggs)
}

/// Renders rows as CSV under [`PSEUDO_CSV_HEADER`], LF line endings.
pub fn rows_to_csv(rows: &[PseudoRow]) -> String {
    let mut out = String::from(PSEUDO_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.image_id,
            r.class,
            r.has_gt,
            r.y_max,
            r.tau,
            r.gt_px,
            r.pl_px,
            r.sel_cplg,
            r.sel_cplg_correct,
            r.sel_fixed[0],
            r.sel_fixed_correct[0],
            r.sel_fixed[1],
            r.sel_fixed_correct[1],
        ));
    }
    out
}
