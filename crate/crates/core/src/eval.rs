//! Validation metrics: confusion-matrix accumulation, per-class IoU, mean
//! IoU, and pixel accuracy over a labeled dataset split.

use ndarray::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{decode, encode, predict_probs, SegModelParams};
use crate::pseudolabel::make_pseudo_label;
use crate::synthdata::{load_item, DatasetIndex};
use crate::types::{LabelMask, Mask, IGNORE};

/// Square count matrix with ground truth on rows and predictions on
/// columns. Pixels whose ground truth is [`IGNORE`] are never counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: Array2::zeros((num_classes, num_classes)),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    /// Total evaluated (non-ignored) pixels.
    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Adds one image's per-pixel outcomes.
    pub fn accumulate(&mut self, pred: &Mask, gt: &Mask) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::validation(format!(
                "prediction shape {:?} does not match ground truth {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        let c = self.num_classes();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if g == IGNORE {
                continue;
            }
            if g as usize >= c || p as usize >= c {
                return Err(Error::validation(format!(
                    "class out of range: gt {g}, pred {p}, {c} classes"
                )));
            }
            self.counts[(g as usize, p as usize)] += 1;
        }
        Ok(())
    }

    /// Batched form of [`accumulate`](Self::accumulate).
    pub fn accumulate_batch(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::validation(format!(
                "prediction shape {:?} does not match ground truth {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        for (p, g) in pred.outer_iter().zip(gt.outer_iter()) {
            self.accumulate(&p.to_owned(), &g.to_owned())?;
        }
        Ok(())
    }

    /// Elementwise sum; exact because counts are integers.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.num_classes() != other.num_classes() {
            return Err(Error::validation("confusion matrices differ in class count"));
        }
        self.counts += &other.counts;
        Ok(())
    }

    /// Per-class IoU (`None` for classes absent from both ground truth and
    /// prediction) and the mean over defined classes.
    pub fn miou(&self) -> Result<(Vec<Option<f64>>, f64)> {
        if self.total() == 0 {
            return Err(Error::validation("no evaluated pixels"));
        }
        let c = self.num_classes();
        let mut per_class = Vec::with_capacity(c);
        let mut sum = 0.0;
        let mut defined = 0usize;
        for j in 0..c {
            let tp = self.counts[(j, j)];
            let fp: u64 = (0..c).filter(|&g| g != j).map(|g| self.counts[(g, j)]).sum();
            let fneg: u64 = (0..c).filter(|&p| p != j).map(|p| self.counts[(j, p)]).sum();
            let denom = tp + fp + fneg;
            if denom == 0 {
                per_class.push(None);
            } else {
                let iou = tp as f64 / denom as f64;
                per_class.push(Some(iou));
                sum += iou;
                defined += 1;
            }
        }
        Ok((per_class, sum / defined as f64))
    }

    /// Fraction of evaluated pixels predicted correctly.
    pub fn pixel_acc(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::validation("no evaluated pixels"));
        }
        let diag: u64 = (0..self.num_classes()).map(|j| self.counts[(j, j)]).sum();
        Ok(diag as f64 / total as f64)
    }
}

/// Summary written to `eval.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub pixel_acc: f64,
    pub num_pixels: u64,
}

/// Full-pass evaluation of one parameter set over the given labeled items,
/// at native resolution. Item order does not affect the result.
pub fn evaluate(params: &SegModelParams, index: &DatasetIndex, ids: &[String]) -> Result<EvalMetrics> {
    if ids.is_empty() {
        return Err(Error::validation("evaluation split is empty"));
    }
    let c = params.arch.num_classes;
    if c != index.num_classes {
        return Err(Error::validation(format!(
            "model has {c} classes but dataset has {}",
            index.num_classes
        )));
    }
    let per_image: Vec<ConfusionMatrix> = ids
        .par_iter()
        .map(|id| -> Result<ConfusionMatrix> {
            let (image, mask) = load_item(index, id)?;
            let mask = mask.ok_or_else(|| {
                Error::validation(format!("evaluation item {id} has no ground-truth mask"))
            })?;
            let batch = image.insert_axis(Axis(0));
            let features = encode(params, &batch)?;
            let logits = decode(params, &features)?;
            let probs = predict_probs(&logits)?;
            let pred = make_pseudo_label(&probs);
            let mut cm = ConfusionMatrix::new(c);
            cm.accumulate(&pred.classes.index_axis(Axis(0), 0).to_owned(), &mask)?;
            Ok(cm)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cm = ConfusionMatrix::new(c);
    for m in &per_image {
        cm.merge(m)?;
    }
    let (per_class_iou, miou) = cm.miou()?;
    Ok(EvalMetrics {
        miou,
        per_class_iou,
        pixel_acc: cm.pixel_acc()?,
        num_pixels: cm.total(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn random_mask(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, p_ignore: f64) -> Mask {
        Array2::from_shape_fn((h, w), |_| {
            if rng.random::<f64>() < p_ignore {
                IGNORE
            } else {
                rng.random_range(0..c) as u8
            }
        })
    }

    #[test]
    fn perfect_prediction_fills_diagonal_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let gt = random_mask(&mut rng, 3, 6, 6, 0.1);
        let pred = gt.mapv(|v| if v == IGNORE { 0 } else { v });
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&pred, &gt).unwrap();
        for g in 0..3 {
            for p in 0..3 {
                if g != p {
                    assert_eq!(cm.counts()[(g, p)], 0);
                }
            }
        }
        let (per_class, miou) = cm.miou().unwrap();
        assert_eq!(miou, 1.0);
        assert!(per_class.iter().flatten().all(|&v| v == 1.0));
        assert_eq!(cm.pixel_acc().unwrap(), 1.0);
    }

    #[test]
    fn ignored_ground_truth_is_not_counted() {
        let gt = Array2::from_elem((4, 4), IGNORE);
        let pred = Array2::zeros((4, 4));
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &gt).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(cm.miou().is_err());
        assert!(cm.pixel_acc().is_err());
    }

    #[test]
    fn accumulate_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let c = rng.random_range(2..=5);
            let gt = random_mask(&mut rng, c, 8, 8, 0.2);
            let pred = random_mask(&mut rng, c, 8, 8, 0.0);
            let mut cm = ConfusionMatrix::new(c);
            cm.accumulate(&pred, &gt).unwrap();

            let mut expect = Array2::<u64>::zeros((c, c));
            for y in 0..8 {
                for x in 0..8 {
                    let g = gt[(y, x)];
                    if g != IGNORE {
                        expect[(g as usize, pred[(y, x)] as usize)] += 1;
                    }
                }
            }
            assert_eq!(cm.counts(), &expect);
        }
    }

    #[test]
    fn out_of_range_classes_rejected() {
        let gt = Array2::from_elem((2, 2), 3u8);
        let pred = Array2::zeros((2, 2));
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&pred, &gt).is_err());
        let gt = Array2::zeros((2, 2));
        let pred = Array2::from_elem((2, 2), 2u8);
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&pred, &gt).is_err());
        assert!(cm.accumulate(&Array2::zeros((2, 3)), &gt).is_err());
    }

    #[test]
    fn half_coverage_analytic_case() {
        // ground truth: left half class 0, right half class 1; prediction all 0
        let mut gt = Array2::<u8>::zeros((4, 4));
        for y in 0..4 {
            for x in 2..4 {
                gt[(y, x)] = 1;
            }
        }
        let pred = Array2::<u8>::zeros((4, 4));
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &gt).unwrap();
        let (per_class, miou) = cm.miou().unwrap();
        assert_eq!(per_class[0], Some(0.5));
        assert_eq!(per_class[1], Some(0.0));
        assert_eq!(miou, 0.25);
        assert_eq!(cm.pixel_acc().unwrap(), 0.5);
    }

    #[test]
    fn miou_matches_set_arithmetic_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..100 {
            let c = rng.random_range(2..=6);
            let h = rng.random_range(2..=8);
            let w = rng.random_range(2..=8);
            let gt = random_mask(&mut rng, c, h, w, 0.15);
            let pred = random_mask(&mut rng, c, h, w, 0.0);
            let mut cm = ConfusionMatrix::new(c);
            cm.accumulate(&pred, &gt).unwrap();
            if cm.total() == 0 {
                continue;
            }
            let (per_class, miou) = cm.miou().unwrap();

            let mut sum = 0.0;
            let mut defined = 0usize;
            for j in 0..c {
                let mut gt_set = HashSet::new();
                let mut pred_set = HashSet::new();
                for y in 0..h {
                    for x in 0..w {
                        if gt[(y, x)] == IGNORE {
                            continue;
                        }
                        if gt[(y, x)] as usize == j {
                            gt_set.insert((y, x));
                        }
                        if pred[(y, x)] as usize == j {
                            pred_set.insert((y, x));
                        }
                    }
                }
                let union = gt_set.union(&pred_set).count();
                if union == 0 {
                    assert_eq!(per_class[j], None);
                } else {
                    let inter = gt_set.intersection(&pred_set).count();
                    let iou = inter as f64 / union as f64;
                    assert!((per_class[j].unwrap() - iou).abs() < 1e-12);
                    sum += iou;
                    defined += 1;
                }
            }
            assert!((miou - sum / defined as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn absent_classes_are_excluded_from_the_mean() {
        let gt = Array2::<u8>::zeros((2, 2));
        let pred = Array2::<u8>::zeros((2, 2));
        let mut cm = ConfusionMatrix::new(5);
        cm.accumulate(&pred, &gt).unwrap();
        let (per_class, miou) = cm.miou().unwrap();
        assert_eq!(per_class[0], Some(1.0));
        assert!(per_class[1..].iter().all(|v| v.is_none()));
        assert_eq!(miou, 1.0);
    }

    #[test]
    fn accumulation_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let items: Vec<(Mask, Mask)> = (0..6)
            .map(|_| {
                (
                    random_mask(&mut rng, 3, 5, 5, 0.0),
                    random_mask(&mut rng, 3, 5, 5, 0.2),
                )
            })
            .collect();
        let mut forward = ConfusionMatrix::new(3);
        for (p, g) in &items {
            forward.accumulate(p, g).unwrap();
        }
        let mut backward = ConfusionMatrix::new(3);
        for (p, g) in items.iter().rev() {
            backward.accumulate(p, g).unwrap();
        }
        assert_eq!(forward, backward);
    }

    #[test]
    fn miou_is_invariant_under_joint_class_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let c = 4;
        let gt = random_mask(&mut rng, c, 6, 6, 0.1);
        let pred = random_mask(&mut rng, c, 6, 6, 0.0);
        let mut perm: Vec<u8> = (0..c as u8).collect();
        perm.shuffle(&mut rng);
        let remap = |m: &Mask| m.mapv(|v| if v == IGNORE { IGNORE } else { perm[v as usize] });

        let mut cm = ConfusionMatrix::new(c);
        cm.accumulate(&pred, &gt).unwrap();
        let (per_class, miou) = cm.miou().unwrap();

        let mut cmp = ConfusionMatrix::new(c);
        cmp.accumulate(&remap(&pred), &remap(&gt)).unwrap();
        let (per_class_p, miou_p) = cmp.miou().unwrap();

        assert!((miou - miou_p).abs() < 1e-15);
        for j in 0..c {
            assert_eq!(per_class[j], per_class_p[perm[j] as usize]);
        }
    }

    #[test]
    fn batch_accumulate_equals_per_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let gt: LabelMask = Array3::from_shape_fn((3, 4, 4), |_| rng.random_range(0..3) as u8);
        let pred: LabelMask = Array3::from_shape_fn((3, 4, 4), |_| rng.random_range(0..3) as u8);
        let mut batched = ConfusionMatrix::new(3);
        batched.accumulate_batch(&pred, &gt).unwrap();
        let mut single = ConfusionMatrix::new(3);
        for i in 0..3 {
            single
                .accumulate(
                    &pred.index_axis(Axis(0), i).to_owned(),
                    &gt.index_axis(Axis(0), i).to_owned(),
                )
                .unwrap();
        }
        assert_eq!(batched, single);
    }
}
