//! Dense detection loss: focal binary classification plus IoU box regression
//! on center-cell assigned targets.

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::net::HeadOut;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

const FOCAL_ALPHA: f64 = 0.25;
const BOX_WEIGHT: f64 = 2.0;
const SIZE_CLAMP: f64 = 8.0;

/// One ground-truth box, coordinates normalized to [0,1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

pub struct LossParts {
    pub total: VarId,
    pub cls: VarId,
    pub boxes: VarId,
    pub positives: usize,
}

struct LayerTargets {
    cls: Tensor,
    alpha: Tensor,
    boxes: Tensor,
    mask: Tensor,
    positives: usize,
}

/// Pick the head whose cells best match the object: the object should span
/// about two cells of its layer.
fn assign_layer(strides: &[usize], pixel_size: f64) -> usize {
    let mut best = 0;
    let mut best_score = f64::INFINITY;
    for (idx, &s) in strides.iter().enumerate() {
        let score = (pixel_size / (2.0 * s as f64)).ln().abs();
        if score < best_score {
            best_score = score;
            best = idx;
        }
    }
    best
}

fn build_targets(
    cfg: &ModelConfig,
    heads: &[HeadOut],
    shapes: &[(usize, usize, usize)],
    targets: &[Vec<GtBox>],
) -> Result<Vec<LayerTargets>> {
    let strides: Vec<usize> = heads.iter().map(|h| h.stride).collect();
    let (ih, iw) = (cfg.input_extent.0 as f64, cfg.input_extent.1 as f64);
    let batch = targets.len();
    let mut layers: Vec<LayerTargets> = shapes
        .iter()
        .map(|&(_, h, w)| LayerTargets {
            cls: Tensor::zeros(&[batch, cfg.classes, h, w]),
            alpha: Tensor::full(&[batch, cfg.classes, h, w], 1.0 - FOCAL_ALPHA),
            boxes: Tensor::zeros(&[batch, 4, h, w]),
            mask: Tensor::zeros(&[batch, 1, h, w]),
            positives: 0,
        })
        .collect();
    for (img, gts) in targets.iter().enumerate() {
        for g in gts {
            if g.class >= cfg.classes {
                return Err(Error::contract("detection_loss", format!("class {} out of range", g.class)));
            }
            if !(g.w > 0.0 && g.h > 0.0) || g.cx < 0.0 || g.cx > 1.0 || g.cy < 0.0 || g.cy > 1.0 {
                return Err(Error::contract("detection_loss", "degenerate ground-truth box"));
            }
            let pixel = (g.w * iw).max(g.h * ih).max(1.0);
            let li = assign_layer(&strides, pixel);
            let (_, h, w) = shapes[li];
            let s = strides[li] as f64;
            let col = ((g.cx * iw / s).floor() as usize).min(w - 1);
            let row = ((g.cy * ih / s).floor() as usize).min(h - 1);
            let layer = &mut layers[li];
            if layer.mask.at4(img, 0, row, col) != 0.0 {
                continue;
            }
            layer.mask.set4(img, 0, row, col, 1.0);
            layer.cls.set4(img, g.class, row, col, 1.0);
            layer.alpha.set4(img, g.class, row, col, FOCAL_ALPHA);
            layer.boxes.set4(img, 0, row, col, g.cx);
            layer.boxes.set4(img, 1, row, col, g.cy);
            layer.boxes.set4(img, 2, row, col, g.w);
            layer.boxes.set4(img, 3, row, col, g.h);
            layer.positives += 1;
        }
    }
    Ok(layers)
}

/// Focal binary cross-entropy from logits, gamma fixed at 2.
///
/// With t in {0,1}: pt = t*p + (1-t)*(1-p), and since
/// log(p) - log(1-p) = z the positive/negative log terms combine to
/// softplus(z) - t*z, which stays finite for any logit.
fn focal_sum(tape: &mut Tape, logits: VarId, cls_t: &Tensor, alpha_t: &Tensor) -> Result<VarId> {
    let t = tape.constant(cls_t.clone())?;
    let a = tape.constant(alpha_t.clone())?;
    let p = tape.sigmoid(logits)?;
    let tp = tape.mul(t, p)?;
    let tp2 = tape.mul_scalar(tp, -2.0)?;
    let t_plus_p = tape.add(t, p)?;
    let q = tape.add(t_plus_p, tp2)?;
    let sp = tape.softplus(logits)?;
    let tz = tape.mul(t, logits)?;
    let nll = tape.sub(sp, tz)?;
    let q2 = tape.mul(q, q)?;
    let aq2 = tape.mul(a, q2)?;
    let focal = tape.mul(aq2, nll)?;
    tape.sum_all(focal)
}

/// Decode a raw box map into normalized center/size form against its grid.
pub fn decode_box_map(
    tape: &mut Tape,
    stride: usize,
    input_extent: (usize, usize),
    raw: VarId,
) -> Result<VarId> {
    let shape = tape.value(raw).shape().to_vec();
    if shape.len() != 4 || shape[1] != 4 {
        return Err(Error::shape("decode_box_map", format!("expected [N,4,h,w], got {shape:?}")));
    }
    let (h, w) = (shape[2], shape[3]);
    let (ih, iw) = (input_extent.0 as f64, input_extent.1 as f64);
    let s = stride as f64;
    let mut gx = Tensor::zeros(&[1, 1, h, w]);
    let mut gy = Tensor::zeros(&[1, 1, h, w]);
    for i in 0..h {
        for j in 0..w {
            gx.set4(0, 0, i, j, j as f64);
            gy.set4(0, 0, i, j, i as f64);
        }
    }
    let gx = tape.constant(gx)?;
    let gy = tape.constant(gy)?;
    let tx = tape.slice_channels(raw, 0, 1)?;
    let ty = tape.slice_channels(raw, 1, 1)?;
    let tw = tape.slice_channels(raw, 2, 1)?;
    let th = tape.slice_channels(raw, 3, 1)?;
    let sx = tape.sigmoid(tx)?;
    let sy = tape.sigmoid(ty)?;
    let ox = tape.add(sx, gx)?;
    let oy = tape.add(sy, gy)?;
    let cx = tape.mul_scalar(ox, s / iw)?;
    let cy = tape.mul_scalar(oy, s / ih)?;
    let cw = tape.clamp(tw, -SIZE_CLAMP, SIZE_CLAMP)?;
    let ch = tape.clamp(th, -SIZE_CLAMP, SIZE_CLAMP)?;
    let ew = tape.exp(cw)?;
    let eh = tape.exp(ch)?;
    let bw = tape.mul_scalar(ew, s / iw)?;
    let bh = tape.mul_scalar(eh, s / ih)?;
    tape.concat(&[cx, cy, bw, bh], 1)
}

/// Elementwise IoU of two [N,4,h,w] center-form box maps -> [N,1,h,w].
fn iou_map(tape: &mut Tape, a: VarId, b: VarId) -> Result<VarId> {
    let corner = |tape: &mut Tape, m: VarId| -> Result<(VarId, VarId, VarId, VarId, VarId)> {
        let cx = tape.slice_channels(m, 0, 1)?;
        let cy = tape.slice_channels(m, 1, 1)?;
        let w = tape.slice_channels(m, 2, 1)?;
        let h = tape.slice_channels(m, 3, 1)?;
        let w2 = tape.mul_scalar(w, 0.5)?;
        let h2 = tape.mul_scalar(h, 0.5)?;
        let l = tape.sub(cx, w2)?;
        let r = tape.add(cx, w2)?;
        let t = tape.sub(cy, h2)?;
        let bt = tape.add(cy, h2)?;
        let area = tape.mul(w, h)?;
        Ok((l, r, t, bt, area))
    };
    let (al, ar, at, ab, aa) = corner(tape, a)?;
    let (bl, br, bt, bb, ba) = corner(tape, b)?;
    let rmin = tape.min(ar, br)?;
    let lmax = tape.max(al, bl)?;
    let wdiff = tape.sub(rmin, lmax)?;
    let iw = tape.relu(wdiff)?;
    let bmin = tape.min(ab, bb)?;
    let tmax = tape.max(at, bt)?;
    let hdiff = tape.sub(bmin, tmax)?;
    let ih = tape.relu(hdiff)?;
    let inter = tape.mul(iw, ih)?;
    let asum = tape.add(aa, ba)?;
    let without = tape.sub(asum, inter)?;
    let union = tape.add_scalar(without, 1e-9)?;
    tape.div(inter, union)
}

/// Combined loss over all heads. Both terms are normalized by the positive
/// count (floored at one) so empty batches stay finite.
pub fn detection_loss(
    tape: &mut Tape,
    cfg: &ModelConfig,
    heads: &[HeadOut],
    targets: &[Vec<GtBox>],
) -> Result<LossParts> {
    if heads.is_empty() {
        return Err(Error::contract("detection_loss", "no prediction heads"));
    }
    let mut shapes = Vec::new();
    for h in heads {
        let s = tape.value(h.cls).shape().to_vec();
        if s[0] != targets.len() {
            return Err(Error::shape(
                "detection_loss",
                format!("batch {} but {} target lists", s[0], targets.len()),
            ));
        }
        if s[1] != cfg.classes {
            return Err(Error::shape("detection_loss", "class map width mismatch"));
        }
        shapes.push((s[0], s[2], s[3]));
    }
    let layers = build_targets(cfg, heads, &shapes, targets)?;
    let positives: usize = layers.iter().map(|l| l.positives).sum();
    let norm = 1.0 / positives.max(1) as f64;

    let mut cls_sum: Option<VarId> = None;
    let mut box_sum: Option<VarId> = None;
    for (head, layer) in heads.iter().zip(&layers) {
        let f = focal_sum(tape, head.cls, &layer.cls, &layer.alpha)?;
        cls_sum = Some(match cls_sum {
            Some(acc) => tape.add(acc, f)?,
            None => f,
        });
        if layer.positives > 0 {
            let pred = decode_box_map(tape, head.stride, cfg.input_extent, head.boxes)?;
            let gt = tape.constant(layer.boxes.clone())?;
            let iou = iou_map(tape, pred, gt)?;
            let mask = tape.constant(layer.mask.clone())?;
            let one_minus = tape.mul_scalar(iou, -1.0)?;
            let shifted = tape.add_scalar(one_minus, 1.0)?;
            let masked = tape.mul(mask, shifted)?;
            let s = tape.sum_all(masked)?;
            box_sum = Some(match box_sum {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
    }
    let cls = tape.mul_scalar(cls_sum.unwrap(), norm)?;
    let boxes = match box_sum {
        Some(b) => tape.mul_scalar(b, BOX_WEIGHT * norm)?,
        None => tape.constant(Tensor::zeros(&[1]))?,
    };
    let total = tape.add(cls, boxes)?;
    Ok(LossParts { total, cls, boxes, positives })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, FdOptions};
    use crate::model::config::DetectSet;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fake_heads(tape: &mut Tape, batch: usize, classes: usize, seed: u64) -> Vec<HeadOut> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let build = |tape: &mut Tape, rng: &mut ChaCha8Rng, level: usize, stride: usize, h: usize, w: usize| {
            let cls = tape.leaf(Tensor::randn(&[batch, classes, h, w], rng)).unwrap();
            let boxes = tape.leaf(Tensor::randn(&[batch, 4, h, w], rng)).unwrap();
            HeadOut { level, stride, cls, boxes }
        };
        vec![
            build(tape, &mut rng, 2, 4, 8, 8),
            build(tape, &mut rng, 4, 16, 2, 2),
        ]
    }

    fn cfg_for(classes: usize) -> ModelConfig {
        ModelConfig {
            classes,
            detect: DetectSet::D24,
            include_s5: false,
            input_extent: (32, 32),
            widths: [16, 32, 64, 128],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn small_objects_go_to_the_fine_layer_and_large_to_the_coarse() {
        assert_eq!(assign_layer(&[4, 16], 6.0), 0);
        assert_eq!(assign_layer(&[4, 16], 40.0), 1);
        assert_eq!(assign_layer(&[4, 8, 16, 32], 16.0), 1);
    }

    #[test]
    fn positive_count_and_cell_placement_follow_the_targets() {
        let cfg = cfg_for(3);
        let heads_shapes = [(2usize, 8usize, 8usize), (2, 2, 2)];
        let mut tape = Tape::new();
        let heads = fake_heads(&mut tape, 2, 3, 160);
        let targets = vec![
            vec![
                GtBox { class: 0, cx: 0.3, cy: 0.3, w: 0.15, h: 0.15 },
                GtBox { class: 2, cx: 0.9, cy: 0.1, w: 0.9, h: 0.9 },
            ],
            vec![],
        ];
        let layers = build_targets(&cfg, &heads, &heads_shapes, &targets).unwrap();
        assert_eq!(layers[0].positives, 1);
        assert_eq!(layers[1].positives, 1);
        // 0.3 * 32 / 4 = 2.4 -> cell (2,2) on the stride-4 map.
        assert_eq!(layers[0].cls.at4(0, 0, 2, 2), 1.0);
        assert_eq!(layers[0].mask.at4(0, 0, 2, 2), 1.0);
        assert_eq!(layers[0].alpha.at4(0, 0, 2, 2), 0.25);
        assert_eq!(layers[0].alpha.at4(0, 1, 2, 2), 0.75);
        // 0.9 * 32 / 16 = 1.8 -> cell (0,1) on the stride-16 map.
        assert_eq!(layers[1].cls.at4(0, 2, 0, 1), 1.0);
        assert_eq!(layers[1].boxes.at4(0, 2, 0, 1), 0.9);
    }

    #[test]
    fn duplicate_cell_assignments_keep_the_first_box() {
        let cfg = cfg_for(2);
        let mut tape = Tape::new();
        let heads = fake_heads(&mut tape, 1, 2, 161);
        let g = GtBox { class: 0, cx: 0.31, cy: 0.31, w: 0.1, h: 0.1 };
        let g2 = GtBox { class: 1, cx: 0.33, cy: 0.33, w: 0.1, h: 0.1 };
        let layers = build_targets(&cfg, &heads, &[(1, 8, 8), (1, 2, 2)], &vec![vec![g, g2]]).unwrap();
        assert_eq!(layers[0].positives, 1);
        assert_eq!(layers[0].cls.at4(0, 0, 2, 2), 1.0);
        assert_eq!(layers[0].cls.at4(0, 1, 2, 2), 0.0);
    }

    #[test]
    fn focal_matches_a_scalar_reference() {
        let mut tape = Tape::new();
        let logits_t = Tensor::new(&[1, 2, 1, 1], vec![1.3, -0.7]).unwrap();
        let logits = tape.leaf(logits_t.clone()).unwrap();
        let cls = Tensor::new(&[1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let alpha = cls.map(|t| if t == 1.0 { 0.25 } else { 0.75 });
        let got = focal_sum(&mut tape, logits, &cls, &alpha).unwrap();
        let reference: f64 = logits_t
            .data()
            .iter()
            .zip(cls.data())
            .map(|(&z, &t)| {
                let p = 1.0 / (1.0 + (-z).exp());
                let pt = if t == 1.0 { p } else { 1.0 - p };
                let a = if t == 1.0 { 0.25 } else { 0.75 };
                -a * (1.0 - pt).powi(2) * pt.ln()
            })
            .sum();
        assert!((tape.value(got).data()[0] - reference).abs() <= 1e-12);
    }

    #[test]
    fn perfect_predictions_drive_box_loss_to_zero() {
        let cfg = cfg_for(1);
        let mut tape = Tape::new();
        // Single positive at stride 4, cell (2,2); build raw offsets whose
        // decoding reproduces the target exactly.
        let g = GtBox { class: 0, cx: 10.0 / 32.0, cy: 10.0 / 32.0, w: 8.0 / 32.0, h: 8.0 / 32.0 };
        let mut raw = Tensor::zeros(&[1, 4, 8, 8]);
        // cx*32/4 = 2.5 -> offset 0.5 -> logit 0; w = exp(t)*4/32 -> t = ln(2).
        raw.set4(0, 2, 2, 2, 2.0f64.ln());
        raw.set4(0, 3, 2, 2, 2.0f64.ln());
        let boxes = tape.leaf(raw).unwrap();
        let cls = tape.leaf(Tensor::full(&[1, 1, 8, 8], -9.0)).unwrap();
        let heads = vec![HeadOut { level: 2, stride: 4, cls, boxes }];
        let parts = detection_loss(&mut tape, &cfg, &heads, &[vec![g]]).unwrap();
        assert_eq!(parts.positives, 1);
        // Only the stabilizing epsilon in the union keeps this off zero.
        assert!(tape.value(parts.boxes).data()[0] <= 1e-6, "box loss {}", tape.value(parts.boxes).data()[0]);
        let g2 = tape.backward(parts.total).unwrap();
        assert!(g2.get(boxes).is_some());
    }

    #[test]
    fn no_positives_still_yields_a_finite_normalized_loss() {
        let cfg = cfg_for(3);
        let mut tape = Tape::new();
        let heads = fake_heads(&mut tape, 2, 3, 162);
        let parts = detection_loss(&mut tape, &cfg, &heads, &[vec![], vec![]]).unwrap();
        assert_eq!(parts.positives, 0);
        let v = tape.value(parts.total).data()[0];
        assert!(v.is_finite() && v > 0.0);
        assert_eq!(tape.value(parts.boxes).numel(), 1);
    }

    #[test]
    fn degenerate_targets_are_contract_errors() {
        let cfg = cfg_for(2);
        let mut tape = Tape::new();
        let heads = fake_heads(&mut tape, 1, 2, 163);
        let bad_class = GtBox { class: 5, cx: 0.5, cy: 0.5, w: 0.1, h: 0.1 };
        assert!(detection_loss(&mut tape, &cfg, &heads, &[vec![bad_class]]).is_err());
        let heads2 = fake_heads(&mut tape, 1, 2, 164);
        let bad_size = GtBox { class: 0, cx: 0.5, cy: 0.5, w: 0.0, h: 0.1 };
        assert!(detection_loss(&mut tape, &cfg, &heads2, &[vec![bad_size]]).is_err());
    }

    #[test]
    fn loss_gradients_pass_finite_differences() {
        let cfg = cfg_for(2);
        let mut rng = ChaCha8Rng::seed_from_u64(165);
        let inputs = vec![
            Tensor::randn(&[1, 2, 8, 8], &mut rng),
            Tensor::randn(&[1, 4, 8, 8], &mut rng),
            Tensor::randn(&[1, 2, 2, 2], &mut rng),
            Tensor::randn(&[1, 4, 2, 2], &mut rng),
        ];
        let targets = vec![vec![
            GtBox { class: 0, cx: 0.4, cy: 0.4, w: 0.2, h: 0.2 },
            GtBox { class: 1, cx: 0.7, cy: 0.2, w: 0.9, h: 0.6 },
        ]];
        let opts = FdOptions { max_probes_per_input: 60, ..FdOptions::default() };
        let report = finite_diff_check(&inputs, opts, |tape, ids| {
            let heads = vec![
                HeadOut { level: 2, stride: 4, cls: ids[0], boxes: ids[1] },
                HeadOut { level: 4, stride: 16, cls: ids[2], boxes: ids[3] },
            ];
            Ok(detection_loss(tape, &cfg, &heads, &targets)?.total)
        })
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
