//! Training objectives: supervised cross-entropy (plain and hard-example
//! variants), positive-pair contrastive terms, masked weak-to-strong
//! cross-entropy over two strong views, and the weighted total.
//!
//! All loss builders append to a [`Tape`] and return scalar `Var`s so every
//! term participates in one backward pass. Per-pixel normalization keeps the
//! default weights meaningful across image sizes.

use ndarray::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::pseudolabel::PseudoLabel;
use crate::types::{LabelMask, IGNORE};

/// Floor applied inside every log so saturated probabilities stay finite.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight on the two contrastive terms.
    pub gamma1: f64,
    /// Weight on the two weak-to-strong terms.
    pub gamma2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma1: 0.01,
            gamma2: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma1.is_finite() && self.gamma1 >= 0.0) {
            return Err(Error::validation("gamma1 must be finite and >= 0"));
        }
        if !(self.gamma2.is_finite() && self.gamma2 >= 0.0) {
            return Err(Error::validation("gamma2 must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Scalar values of one optimization step's loss terms plus the
/// selected-pixel counts behind the two weak-to-strong terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub sup: f64,
    pub cl_ls: f64,
    pub cl_hs: f64,
    pub w2s_l: f64,
    pub w2s_h: f64,
    pub total: f64,
    pub selected_px_l: f64,
    pub selected_px_h: f64,
}

/// The five term `Var`s combined by [`total_loss`].
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub sup: Var,
    pub cl_ls: Var,
    pub cl_hs: Var,
    pub w2s_l: Var,
    pub w2s_h: Var,
}

fn check_label_shape(probs_shape: &[usize], labels: &LabelMask) -> Result<(usize, usize, usize, usize)> {
    if probs_shape.len() != 4 {
        return Err(Error::validation("probability map must be 4-dimensional"));
    }
    let (b, c, h, w) = (probs_shape[0], probs_shape[1], probs_shape[2], probs_shape[3]);
    if labels.dim() != (b, h, w) {
        return Err(Error::validation(format!(
            "label shape {:?} does not match probability map {:?}",
            labels.dim(),
            probs_shape
        )));
    }
    for &v in labels.iter() {
        if v != IGNORE && v as usize >= c {
            return Err(Error::validation(format!(
                "label value {v} out of range for {c} classes"
            )));
        }
    }
    Ok((b, c, h, w))
}

/// Builds `-sum(weights * log(probs)) `, the shared core of all CE terms.
fn weighted_nll(tape: &mut Tape, probs: Var, weights: ArrayD<f64>) -> Var {
    let lg = tape.log_clamped(probs, LOG_EPS);
    let masked = tape.mul_const(lg, weights);
    let s = tape.sum_all(masked);
    tape.scale(s, -1.0)
}

/// Cross-entropy at the true class, averaged over pixels not marked
/// [`IGNORE`]. Returns the loss and the number of contributing pixels; with
/// no valid pixels the loss is exactly 0 and a warning is logged.
pub fn loss_sup(tape: &mut Tape, probs: Var, labels: &LabelMask) -> Result<(Var, usize)> {
    let shape = tape.value(probs).shape().to_vec();
    let (_, _, _, _) = check_label_shape(&shape, labels)?;
    let n = labels.iter().filter(|&&v| v != IGNORE).count();
    if n == 0 {
        log::warn!("supervised loss saw a batch with every pixel ignored");
    }
    let mut weights = ArrayD::<f64>::zeros(shape);
    let inv = 1.0 / n.max(1) as f64;
    for ((bi, y, x), &lab) in labels.indexed_iter() {
        if lab != IGNORE {
            weights[[bi, lab as usize, y, x]] = inv;
        }
    }
    Ok((weighted_nll(tape, probs, weights), n))
}

/// Hard-example variant of [`loss_sup`]: averages only over pixels whose
/// true-class probability is strictly below `keep_thresh`, falling back to
/// the `min_kept` hardest pixels when too few qualify.
pub fn loss_sup_ohem(
    tape: &mut Tape,
    probs: Var,
    labels: &LabelMask,
    keep_thresh: f64,
    min_kept: usize,
) -> Result<(Var, usize)> {
    if !(0.0..=1.0).contains(&keep_thresh) {
        return Err(Error::validation("keep_thresh must be in [0, 1]"));
    }
    if min_kept == 0 {
        return Err(Error::validation("min_kept must be >= 1"));
    }
    let values = tape.value(probs).clone();
    let shape = values.shape().to_vec();
    check_label_shape(&shape, labels)?;

    // (true-class probability, flat position) for every valid pixel
    let mut candidates: Vec<(f64, usize)> = Vec::new();
    for (flat, ((bi, y, x), &lab)) in labels.indexed_iter().enumerate() {
        if lab != IGNORE {
            candidates.push((values[[bi, lab as usize, y, x]], flat));
        }
    }
    if candidates.is_empty() {
        log::warn!("hard-example loss saw a batch with every pixel ignored");
    }
    let mut kept: Vec<usize> = candidates
        .iter()
        .filter(|(p, _)| *p < keep_thresh)
        .map(|&(_, flat)| flat)
        .collect();
    if kept.len() < min_kept && !candidates.is_empty() {
        candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        kept = candidates
            .iter()
            .take(min_kept.min(candidates.len()))
            .map(|&(_, flat)| flat)
            .collect();
    }

    let k = kept.len();
    let inv = 1.0 / k.max(1) as f64;
    let mut weights = ArrayD::<f64>::zeros(shape.clone());
    let (h, w) = (shape[2], shape[3]);
    for flat in kept {
        let bi = flat / (h * w);
        let y = flat / w % h;
        let x = flat % w;
        let lab = labels[(bi, y, x)] as usize;
        weights[[bi, lab, y, x]] = inv;
    }
    Ok((weighted_nll(tape, probs, weights), k))
}

/// Per-pixel similarity `exp(-||h1_i - h2_i||^2)` over the channel
/// dimension: 1 for identical vectors, decaying with squared distance.
pub fn gaussian_similarity(h1: &Array4<f64>, h2: &Array4<f64>) -> Result<Array3<f64>> {
    if h1.dim() != h2.dim() {
        return Err(Error::validation(format!(
            "similarity inputs differ in shape: {:?} vs {:?}",
            h1.dim(),
            h2.dim()
        )));
    }
    let (b, c, h, w) = h1.dim();
    Ok(Array3::from_shape_fn((b, h, w), |(bi, y, x)| {
        let mut sq = 0.0;
        for ci in 0..c {
            let d = h1[(bi, ci, y, x)] - h2[(bi, ci, y, x)];
            sq += d * d;
        }
        (-sq).exp()
    }))
}

/// Positive-pair consistency between two aligned views: the mean over
/// pixels of the squared channel distance. Gradients reach both views.
pub fn loss_contrastive(tape: &mut Tape, h1: Var, h2: Var) -> Result<Var> {
    let s1 = tape.value(h1).shape().to_vec();
    let s2 = tape.value(h2).shape().to_vec();
    if s1 != s2 {
        return Err(Error::validation(format!(
            "contrastive views differ in shape: {s1:?} vs {s2:?}"
        )));
    }
    if s1.len() != 4 {
        return Err(Error::validation("contrastive views must be 4-dimensional"));
    }
    let (b, h, w) = (s1[0], s1[2], s1[3]);
    let d = tape.sub(h1, h2);
    let q = tape.square(d);
    let s = tape.sum_all(q);
    Ok(tape.scale(s, 1.0 / (b * h * w) as f64))
}

/// 0/1 weight volume placing mass at each selected pixel's pseudo class,
/// plus the count of selected pixels.
pub fn w2s_weights(pl: &PseudoLabel, px_mask: &Array3<bool>) -> Result<(ArrayD<f64>, usize)> {
    if pl.classes.dim() != px_mask.dim() {
        return Err(Error::validation(format!(
            "pixel mask shape {:?} does not match pseudo labels {:?}",
            px_mask.dim(),
            pl.classes.dim()
        )));
    }
    let (b, h, w) = pl.classes.dim();
    let mut weights = ArrayD::<f64>::zeros(vec![b, pl.num_classes, h, w]);
    let mut n = 0usize;
    for ((bi, y, x), &sel) in px_mask.indexed_iter() {
        if sel {
            weights[[bi, pl.classes[(bi, y, x)] as usize, y, x]] = 1.0;
            n += 1;
        }
    }
    Ok((weights, n))
}

fn check_w2s_shape(tape: &Tape, probs: Var, weights: &ArrayD<f64>) -> Result<()> {
    if tape.value(probs).shape() != weights.shape() {
        return Err(Error::validation(format!(
            "strong-view shape {:?} does not match pseudo-label volume {:?}",
            tape.value(probs).shape(),
            weights.shape()
        )));
    }
    Ok(())
}

/// Masked cross-entropy from one pseudo-labeled weak view onto two strong
/// views, normalized by `max(1, selected)`. An empty mask yields exactly 0.
pub fn loss_w2s(
    tape: &mut Tape,
    y_s1: Var,
    y_s2: Var,
    pl: &PseudoLabel,
    px_mask: &Array3<bool>,
) -> Result<(Var, usize)> {
    let (weights, n) = w2s_weights(pl, px_mask)?;
    check_w2s_shape(tape, y_s1, &weights)?;
    check_w2s_shape(tape, y_s2, &weights)?;
    let nll1 = weighted_nll(tape, y_s1, weights.clone());
    let nll2 = weighted_nll(tape, y_s2, weights);
    let sum = tape.add(nll1, nll2);
    Ok((tape.scale(sum, 1.0 / n.max(1) as f64), n))
}

/// Variant of [`loss_w2s`] where each strong view carries its own targets
/// and mask, as happens when the views were cut-and-pasted independently.
/// The normalizer is the mean selected count, so when the two sides agree
/// this matches [`loss_w2s`] exactly.
pub fn loss_w2s_per_view(
    tape: &mut Tape,
    y_s1: Var,
    pl1: &PseudoLabel,
    px_mask1: &Array3<bool>,
    y_s2: Var,
    pl2: &PseudoLabel,
    px_mask2: &Array3<bool>,
) -> Result<(Var, usize, usize)> {
    let (w1, n1) = w2s_weights(pl1, px_mask1)?;
    let (w2, n2) = w2s_weights(pl2, px_mask2)?;
    check_w2s_shape(tape, y_s1, &w1)?;
    check_w2s_shape(tape, y_s2, &w2)?;
    let nll1 = weighted_nll(tape, y_s1, w1);
    let nll2 = weighted_nll(tape, y_s2, w2);
    let sum = tape.add(nll1, nll2);
    let norm = ((n1 + n2) as f64 / 2.0).max(1.0);
    Ok((tape.scale(sum, 1.0 / norm), n1, n2))
}

/// Weighted sum of the five terms:
/// `sup + gamma1*(cl_ls + cl_hs) + gamma2*(w2s_l + w2s_h)`.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, weights: &LossWeights) -> Result<Var> {
    weights.validate()?;
    for (name, var) in [
        ("sup", terms.sup),
        ("cl_ls", terms.cl_ls),
        ("cl_hs", terms.cl_hs),
        ("w2s_l", terms.w2s_l),
        ("w2s_h", terms.w2s_h),
    ] {
        let v = tape.scalar(var);
        if !v.is_finite() {
            return Err(Error::numeric(format!("loss term {name} is {v}")));
        }
    }
    let cl = tape.add(terms.cl_ls, terms.cl_hs);
    let w2s = tape.add(terms.w2s_l, terms.w2s_h);
    let partial = tape.add_scaled(terms.sup, cl, weights.gamma1);
    Ok(tape.add_scaled(partial, w2s, weights.gamma2))
}
