//! Prediction decoding, suppression, and input ingestion helpers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One decoded detection, all coordinates normalized to [0,1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionBox {
    pub class: usize,
    pub confidence: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Raw head outputs of one forward pass, as plain tensors.
#[derive(Clone, Debug)]
pub struct HeadMaps {
    pub level: usize,
    pub stride: usize,
    pub cls: Tensor,
    pub boxes: Tensor,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Intersection-over-union on corner form.
pub fn corner_iou(a: &DetectionBox, b: &DetectionBox) -> f64 {
    let (al, ar) = (a.cx - a.w / 2.0, a.cx + a.w / 2.0);
    let (at, ab) = (a.cy - a.h / 2.0, a.cy + a.h / 2.0);
    let (bl, br) = (b.cx - b.w / 2.0, b.cx + b.w / 2.0);
    let (bt, bb) = (b.cy - b.h / 2.0, b.cy + b.h / 2.0);
    let iw = (ar.min(br) - al.max(bl)).max(0.0);
    let ih = (ab.min(bb) - at.max(bt)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Decode raw head maps into thresholded candidate boxes per image.
///
/// Each cell emits one candidate per class whose sigmoid confidence clears
/// `conf_thresh`; centers decode as `sigmoid` offsets inside the cell, sizes
/// as `exp` multiples of the stride, and corners are clamped to the image.
pub fn decode_boxes(
    input_extent: (usize, usize),
    maps: &[HeadMaps],
    conf_thresh: f64,
) -> Result<Vec<Vec<DetectionBox>>> {
    if !(conf_thresh > 0.0 && conf_thresh < 1.0) {
        return Err(Error::config("conf_thresh", "must lie strictly inside (0,1)"));
    }
    let (ih, iw) = (input_extent.0 as f64, input_extent.1 as f64);
    let batch = match maps.first() {
        Some(m) => m.cls.shape()[0],
        None => return Ok(Vec::new()),
    };
    let mut out = vec![Vec::new(); batch];
    for m in maps {
        let (n, classes, h, w) = m.cls.dims4()?;
        let (bn, four, bh, bw) = m.boxes.dims4()?;
        if n != batch || bn != batch || four != 4 || bh != h || bw != w {
            return Err(Error::shape("decode_boxes", "class and box maps disagree"));
        }
        let s = m.stride as f64;
        for img in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let tx = m.boxes.at4(img, 0, i, j);
                    let ty = m.boxes.at4(img, 1, i, j);
                    let tw = m.boxes.at4(img, 2, i, j);
                    let th = m.boxes.at4(img, 3, i, j);
                    let cx = (j as f64 + sigmoid(tx)) * s / iw;
                    let cy = (i as f64 + sigmoid(ty)) * s / ih;
                    let bw = tw.clamp(-8.0, 8.0).exp() * s / iw;
                    let bh = th.clamp(-8.0, 8.0).exp() * s / ih;
                    let l = (cx - bw / 2.0).clamp(0.0, 1.0);
                    let r = (cx + bw / 2.0).clamp(0.0, 1.0);
                    let t = (cy - bh / 2.0).clamp(0.0, 1.0);
                    let b = (cy + bh / 2.0).clamp(0.0, 1.0);
                    for class in 0..classes {
                        let confidence = sigmoid(m.cls.at4(img, class, i, j));
                        if confidence >= conf_thresh {
                            out[img].push(DetectionBox {
                                class,
                                confidence,
                                cx: (l + r) / 2.0,
                                cy: (t + b) / 2.0,
                                w: r - l,
                                h: b - t,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Greedy class-wise non-maximum suppression by descending confidence.
pub fn nms(dets: &[DetectionBox], iou_thresh: f64) -> Vec<DetectionBox> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<DetectionBox> = Vec::new();
    for idx in order {
        let d = dets[idx];
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && corner_iou(k, &d) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Threshold, decode, and suppress in one step.
pub fn decode_and_nms(
    input_extent: (usize, usize),
    maps: &[HeadMaps],
    conf_thresh: f64,
    iou_thresh: f64,
) -> Result<Vec<Vec<DetectionBox>>> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(Error::config("iou_thresh", "must lie strictly inside (0,1)"));
    }
    let decoded = decode_boxes(input_extent, maps, conf_thresh)?;
    Ok(decoded.iter().map(|d| nms(d, iou_thresh)).collect())
}

/// Reflection-pad the bottom/right of an [N,C,H,W] tensor to the target
/// extent. Mirroring excludes the border sample, so the pad must be smaller
/// than the source extent.
pub fn reflect_pad_to(x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (th, tw) = target;
    if th < h || tw < w {
        return Err(Error::shape("reflect_pad_to", format!("target {th}x{tw} below source {h}x{w}")));
    }
    if th >= 2 * h || tw >= 2 * w {
        return Err(Error::shape(
            "reflect_pad_to",
            format!("pad to {th}x{tw} needs more context than a {h}x{w} image can mirror"),
        ));
    }
    if (th, tw) == (h, w) {
        return Ok(x.clone());
    }
    let mut out = Tensor::zeros(&[n, c, th, tw]);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..th {
                let si = if i < h { i } else { 2 * h - 2 - i };
                for j in 0..tw {
                    let sj = if j < w { j } else { 2 * w - 2 - j };
                    out.set4(b, ch, i, j, x.at4(b, ch, si, sj));
                }
            }
        }
    }
    Ok(out)
}

/// Re-normalize a box after its image grew from `old` to `new` pixels.
pub fn rescale_box_for_pad(cx: f64, cy: f64, w: f64, h: f64, old: (usize, usize), new: (usize, usize)) -> (f64, f64, f64, f64) {
    let fy = old.0 as f64 / new.0 as f64;
    let fx = old.1 as f64 / new.1 as f64;
    (cx * fx, cy * fy, w * fx, h * fy)
}
