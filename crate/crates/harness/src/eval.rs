//! Average-precision scoring for detection outputs.
//!
//! Matching is greedy in confidence order: each prediction claims the
//! still-unmatched ground-truth box of its class, in its image, with the
//! highest IoU, provided that IoU clears the threshold. Precision/recall
//! points from that sweep are summarized with 101-point interpolation and
//! averaged over the classes that have at least one ground-truth box.

use fmc_core::error::{Error, Result};
use fmc_core::model::{DetectionBox, GtBox};

pub const COCO_IOUS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Pixel-area cutoff below which an object counts as small.
pub const SMALL_AREA: f64 = 32.0 * 32.0;

#[derive(Clone, Copy, Debug)]
pub struct ApSummary {
    /// Mean over the ten IoU thresholds.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Mean over the ten thresholds with both sides restricted to boxes
    /// whose pixel area is under 32x32.
    pub ap_s: f64,
}

impl std::fmt::Display for ApSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "ap={:.6} ap50={:.6} ap75={:.6} ap_s={:.6}",
            self.ap, self.ap50, self.ap75, self.ap_s
        )
    }
}

fn iou(p: &DetectionBox, g: &GtBox) -> f64 {
    let iw = (p.cx + p.w / 2.0).min(g.cx + g.w / 2.0) - (p.cx - p.w / 2.0).max(g.cx - g.w / 2.0);
    let ih = (p.cy + p.h / 2.0).min(g.cy + g.h / 2.0) - (p.cy - p.h / 2.0).max(g.cy - g.h / 2.0);
    let inter = iw.max(0.0) * ih.max(0.0);
    let union = p.w * p.h + g.w * g.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// 101-point interpolated AP from a confidence-ordered TP/FP sweep.
fn interpolated_ap(tp_flags: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &hit) in tp_flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }
    // Monotone precision envelope over descending recall.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut acc = 0.0;
    let mut j = 0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        while j < recall.len() && recall[j] + 1e-12 < r {
            j += 1;
        }
        if j < recall.len() {
            acc += precision[j];
        }
    }
    acc / 101.0
}

/// One class at one IoU threshold. `preds` must already be confidence-sorted
/// and restricted to the class; `gts[i]` holds that class's boxes in image i.
fn class_ap(preds: &[(usize, DetectionBox)], gts: &[Vec<GtBox>], iou_t: f64) -> f64 {
    let total_gt: usize = gts.iter().map(Vec::len).sum();
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut flags = Vec::with_capacity(preds.len());
    for (img, p) in preds {
        let mut best = (-1.0, usize::MAX);
        for (gi, g) in gts[*img].iter().enumerate() {
            if taken[*img][gi] {
                continue;
            }
            let v = iou(p, g);
            if v > best.0 {
                best = (v, gi);
            }
        }
        if best.0 >= iou_t {
            taken[*img][best.1] = true;
            flags.push(true);
        } else {
            flags.push(false);
        }
    }
    interpolated_ap(&flags, total_gt)
}

fn pred_area(p: &DetectionBox, extent: (usize, usize)) -> f64 {
    p.w * extent.1 as f64 * p.h * extent.0 as f64
}

fn gt_area(g: &GtBox, extent: (usize, usize)) -> f64 {
    g.w * extent.1 as f64 * g.h * extent.0 as f64
}

struct PerClass {
    preds: Vec<(usize, DetectionBox)>,
    gts: Vec<Vec<GtBox>>,
}

fn split_by_class(
    preds: &[Vec<DetectionBox>],
    gts: &[Vec<GtBox>],
    keep_pred: impl Fn(&DetectionBox) -> bool,
    keep_gt: impl Fn(&GtBox) -> bool,
) -> Vec<PerClass> {
    let classes = preds
        .iter()
        .flatten()
        .map(|p| p.class + 1)
        .chain(gts.iter().flatten().map(|g| g.class + 1))
        .max()
        .unwrap_or(0);
    let mut out: Vec<PerClass> = (0..classes)
        .map(|_| PerClass { preds: Vec::new(), gts: vec![Vec::new(); preds.len()] })
        .collect();
    for (img, boxes) in preds.iter().enumerate() {
        for p in boxes {
            if keep_pred(p) {
                out[p.class].preds.push((img, p.clone()));
            }
        }
    }
    for (img, boxes) in gts.iter().enumerate() {
        for g in boxes {
            if keep_gt(g) {
                out[g.class].gts[img].push(g.clone());
            }
        }
    }
    for pc in &mut out {
        pc.preds
            .sort_by(|a, b| b.1.confidence.partial_cmp(&a.1.confidence).unwrap());
    }
    out
}

/// Mean AP over `ious` and over the classes that have ground truth.
fn mean_ap(per_class: &[PerClass], ious: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for pc in per_class {
        if pc.gts.iter().all(Vec::is_empty) {
            continue;
        }
        let class_mean: f64 =
            ious.iter().map(|&t| class_ap(&pc.preds, &pc.gts, t)).sum::<f64>() / ious.len() as f64;
        sum += class_mean;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Score `preds[i]` against `gts[i]` for every image i. `extent` is the
/// pixel size (H, W) used to decide which boxes count as small.
pub fn evaluate_ap(
    preds: &[Vec<DetectionBox>],
    gts: &[Vec<GtBox>],
    extent: (usize, usize),
) -> Result<ApSummary> {
    if preds.len() != gts.len() {
        return Err(Error::contract(
            "evaluate_ap",
            format!("{} prediction lists vs {} ground-truth lists", preds.len(), gts.len()),
        ));
    }
    let all = split_by_class(preds, gts, |_| true, |_| true);
    let small = split_by_class(
        preds,
        gts,
        |p| pred_area(p, extent) < SMALL_AREA,
        |g| gt_area(g, extent) < SMALL_AREA,
    );
    Ok(ApSummary {
        ap: mean_ap(&all, &COCO_IOUS),
        ap50: mean_ap(&all, &[0.50]),
        ap75: mean_ap(&all, &[0.75]),
        ap_s: mean_ap(&small, &COCO_IOUS),
    })
}
