//! Pseudo-label construction and confidence-based pixel selection: per-pixel
//! argmax labels, class-aware thresholds derived from per-class probability
//! maxima, and the fixed-threshold baseline used for comparisons.

use ndarray::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ProbMap, SelectionMask};

/// Per-pixel argmax classes with ties broken toward the lowest index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabel {
    /// `(B, H, W)` class indices.
    pub classes: Array3<u8>,
    pub num_classes: usize,
}

impl PseudoLabel {
    /// One-hot view, `(B, C, H, W)` with exactly one 1 per pixel.
    pub fn onehot(&self) -> Array4<f64> {
        let (b, h, w) = self.classes.dim();
        let mut out = Array4::<f64>::zeros((b, self.num_classes, h, w));
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    out[(bi, self.classes[(bi, y, x)] as usize, y, x)] = 1.0;
                }
            }
        }
        out
    }
}

/// Whether per-class maxima are taken over each image separately or over
/// the whole batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CplgScope {
    #[default]
    PerImage,
    PerBatch,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CplgParams {
    /// Threshold ratio in percent.
    pub r_percent: f64,
    /// Classes whose maximum probability does not exceed this floor select
    /// no pixels at all.
    pub tau_low: f64,
    pub scope: CplgScope,
}

impl Default for CplgParams {
    fn default() -> Self {
        Self {
            r_percent: 96.0,
            tau_low: 0.92,
            scope: CplgScope::PerImage,
        }
    }
}

impl CplgParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_percent > 0.0 && self.r_percent <= 100.0) {
            return Err(Error::validation("r_percent must be in (0, 100]"));
        }
        if !(0.0..1.0).contains(&self.tau_low) {
            return Err(Error::validation("tau_low must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Per-scope-unit, per-class thresholds and the maxima they came from.
/// Row count is B for per-image scope, 1 for per-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassThresholds {
    pub tau: Array2<f64>,
    pub y_max: Array2<f64>,
    pub scope: CplgScope,
}

/// Argmax over channels, lowest index winning ties.
pub fn make_pseudo_label(y: &ProbMap) -> PseudoLabel {
    let (b, c, h, w) = y.dim();
    let mut classes = Array3::<u8>::zeros((b, h, w));
    for bi in 0..b {
        for yy in 0..h {
            for xx in 0..w {
                let mut best = 0usize;
                let mut best_v = y[(bi, 0, yy, xx)];
                for ci in 1..c {
                    let v = y[(bi, ci, yy, xx)];
                    if v > best_v {
                        best_v = v;
                        best = ci;
                    }
                }
                classes[(bi, yy, xx)] = best as u8;
            }
        }
    }
    PseudoLabel {
        classes,
        num_classes: c,
    }
}

/// Maximum of each class channel over all pixels of the scope unit.
pub fn class_max(y: &ProbMap, scope: CplgScope) -> Array2<f64> {
    let (b, c, h, w) = y.dim();
    let units = match scope {
        CplgScope::PerImage => b,
        CplgScope::PerBatch => 1,
    };
    let mut out = Array2::<f64>::from_elem((units, c), f64::NEG_INFINITY);
    for bi in 0..b {
        let u = match scope {
            CplgScope::PerImage => bi,
            CplgScope::PerBatch => 0,
        };
        for ci in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let v = y[(bi, ci, yy, xx)];
                    if v > out[(u, ci)] {
                        out[(u, ci)] = v;
                    }
                }
            }
        }
    }
    out
}

/// Scales each class maximum by r% when it clears the floor; otherwise the
/// threshold equals the maximum itself, so nothing can strictly exceed it.
pub fn cplg_thresholds(y_max: &Array2<f64>, params: &CplgParams) -> Result<ClassThresholds> {
    params.validate()?;
    let r = params.r_percent / 100.0;
    let tau = y_max.mapv(|m| if m > params.tau_low { m * r } else { m });
    Ok(ClassThresholds {
        tau,
        y_max: y_max.clone(),
        scope: params.scope,
    })
}

/// Selection mask: pixel i is selected for class j iff `y_ij > tau_j`,
/// strictly.
pub fn cplg_mask(y: &ProbMap, thresholds: &ClassThresholds) -> SelectionMask {
    let (b, c, h, w) = y.dim();
    let mut out = SelectionMask::from_elem((b, c, h, w), false);
    for bi in 0..b {
        let u = match thresholds.scope {
            CplgScope::PerImage => bi,
            CplgScope::PerBatch => 0,
        };
        for ci in 0..c {
            let t = thresholds.tau[(u, ci)];
            for yy in 0..h {
                for xx in 0..w {
                    out[(bi, ci, yy, xx)] = y[(bi, ci, yy, xx)] > t;
                }
            }
        }
    }
    out
}

/// Uniform baseline: pixel selected for every class whose probability
/// strictly exceeds `tau_fixed`.
pub fn fixed_threshold_mask(y: &ProbMap, tau_fixed: f64) -> Result<SelectionMask> {
    if !(0.0..1.0).contains(&tau_fixed) {
        return Err(Error::validation("tau_fixed must be in [0, 1)"));
    }
    Ok(y.mapv(|v| v > tau_fixed))
}

/// Collapses a per-class selection mask to one bit per pixel by reading the
/// channel of the pixel's pseudo class.
pub fn effective_pixel_mask(m: &SelectionMask, pl: &PseudoLabel) -> Array3<bool> {
    let (b, _, h, w) = m.dim();
    Array3::from_shape_fn((b, h, w), |(bi, y, x)| {
        m[(bi, pl.classes[(bi, y, x)] as usize, y, x)]
    })
}

/// Convenience composition: argmax labels plus CPLG selection for one
/// probability map.
pub fn cplg_select(y: &ProbMap, params: &CplgParams) -> Result<(PseudoLabel, SelectionMask)> {
    let pl = make_pseudo_label(y);
    let y_max = class_max(y, params.scope);
    let thresholds = cplg_thresholds(&y_max, params)?;
    Ok((pl, cplg_mask(y, &thresholds)))
}
