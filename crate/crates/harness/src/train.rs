//! Optimizer and training loop.
//!
//! The optimizer is Adam with decoupled weight decay: the decay term is
//! applied directly to the parameter, outside the adaptive rescaling, so a
//! zero learning rate leaves weights bitwise untouched.

use std::collections::BTreeMap;

use fmc_core::error::{Error, Result};
use fmc_core::model::{decode_and_nms, detection_loss, model_forward, Model};
use fmc_core::param::{Bound, ParamStore};
use fmc_core::tape::{Gradients, Tape};
use fmc_core::Tensor;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::FlatConfig;
use crate::data::Dataset;
use crate::eval::{evaluate_ap, ApSummary};

pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> AdamW {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over every parameter in the store. `bound` must be the
    /// binding the gradients were computed through.
    pub fn step(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in store.iter_mut() {
            let id = bound.id(name)?;
            let g = grads.get_or_zeros(id, p.shape());
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; p.numel()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; p.numel()]);
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                pd[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * pd[i]);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainSettings {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub iters: usize,
    pub seed: u64,
    /// Evaluate and log AP every this many epochs.
    pub eval_every: usize,
    /// Stop early once evaluation AP50 reaches this value.
    pub stop_at_ap50: Option<f64>,
    pub conf_thresh: f64,
    pub nms_iou: f64,
}

impl Default for TrainSettings {
    fn default() -> TrainSettings {
        TrainSettings {
            lr: 1e-3,
            weight_decay: 5e-4,
            batch: 4,
            iters: 200,
            seed: 11,
            eval_every: 1,
            stop_at_ap50: None,
            conf_thresh: 0.05,
            nms_iou: 0.5,
        }
    }
}

impl TrainSettings {
    pub fn from_config(cfg: &mut FlatConfig) -> Result<TrainSettings> {
        let d = TrainSettings::default();
        let stop_at_ap50 = match cfg.take("train.stop_at_ap50") {
            Some(s) => Some(s.trim().parse::<f64>().map_err(|_| {
                Error::config("train.stop_at_ap50", format!("expected a number, got {s:?}"))
            })?),
            None => None,
        };
        let s = TrainSettings {
            lr: cfg.take_f64("train.lr", d.lr)?,
            weight_decay: cfg.take_f64("train.weight_decay", d.weight_decay)?,
            batch: cfg.take_usize("train.batch", d.batch)?,
            iters: cfg.take_usize("train.iters", d.iters)?,
            seed: cfg.take_u64("train.seed", d.seed)?,
            eval_every: cfg.take_usize("train.eval_every", d.eval_every)?,
            stop_at_ap50,
            conf_thresh: cfg.take_f64("train.conf_thresh", d.conf_thresh)?,
            nms_iou: cfg.take_f64("train.nms_iou", d.nms_iou)?,
        };
        if s.batch == 0 {
            return Err(Error::config("train.batch", "batch size must be positive"));
        }
        if s.eval_every == 0 {
            return Err(Error::config("train.eval_every", "period must be positive"));
        }
        Ok(s)
    }
}

pub struct TrainOutcome {
    pub model: Model,
    /// Total loss per iteration, in order.
    pub losses: Vec<f64>,
    pub last_eval: Option<ApSummary>,
}

/// When something goes non-finite, point at the first offending parameter
/// tensor by name; if the parameters are all clean the blow-up happened in
/// an activation, so report the failing op instead.
fn name_non_finite(store: &ParamStore, origin: &Error) -> Error {
    for (name, t) in store.iter() {
        if !t.all_finite() {
            return Error::contract(
                "train",
                format!("aborting: parameter tensor {name} is non-finite"),
            );
        }
    }
    Error::contract("train", format!("aborting on non-finite value: {origin}"))
}

fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &Tensor,
    gts: &[Vec<fmc_core::model::GtBox>],
) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::new();
    let run = (|| -> Result<(f64, f64, f64, Gradients, Bound)> {
        let bound = model.params.bind(&mut tape)?;
        let img = tape.constant(batch.clone())?;
        let trace = model_forward(&mut tape, &model.cfg, &bound, img)?;
        let parts = detection_loss(&mut tape, &model.cfg, &trace.heads, gts)?;
        let total = tape.value(parts.total).data()[0];
        let cls = tape.value(parts.cls).data()[0];
        let bx = tape.value(parts.boxes).data()[0];
        if !total.is_finite() {
            return Err(Error::contract("train", "loss is non-finite"));
        }
        let grads = tape.backward(parts.total)?;
        Ok((total, cls, bx, grads, bound))
    })();
    let (total, cls, bx, grads, bound) = match run {
        Ok(v) => v,
        Err(e @ Error::NonFinite { .. }) => return Err(name_non_finite(&model.params, &e)),
        Err(Error::Contract { op: "train", detail }) => {
            return Err(name_non_finite(&model.params, &Error::contract("train", detail)))
        }
        Err(e) => return Err(e),
    };
    opt.step(&mut model.params, &bound, &grads)?;
    Ok((total, cls, bx))
}

/// Inference plus scoring over a whole dataset. Images smaller than the
/// model extent are reflect-padded up and the ground truth rescaled to
/// match, which preserves pixel areas.
pub fn evaluate_model(model: &Model, data: &Dataset, conf: f64, nms_iou: f64) -> Result<ApSummary> {
    use fmc_core::model::{reflect_pad_to, rescale_box_for_pad};
    let extent = model.cfg.input_extent;
    let mut preds = Vec::with_capacity(data.len());
    let mut gts = Vec::with_capacity(data.len());
    let chunk = 8;
    let mut at = 0;
    while at < data.len() {
        let ids: Vec<usize> = (at..(at + chunk).min(data.len())).collect();
        let (mut batch, mut g) = data.batch(&ids)?;
        if data.extent != extent {
            batch = reflect_pad_to(&batch, extent)?;
            for boxes in &mut g {
                for b in boxes.iter_mut() {
                    let (cx, cy, w, h) = rescale_box_for_pad(b.cx, b.cy, b.w, b.h, data.extent, extent);
                    (b.cx, b.cy, b.w, b.h) = (cx, cy, w, h);
                }
            }
        }
        let maps = model.forward_detect(&batch)?;
        preds.append(&mut decode_and_nms(extent, &maps, conf, nms_iou)?);
        gts.extend(g);
        at += ids.len();
    }
    evaluate_ap(&preds, &gts, extent)
}

/// Train `model` in place for `settings.iters` iterations. Emits one
/// structured line per epoch through `log`, with AP fields on evaluation
/// epochs, and a closing `final ...` line.
pub fn run_training(
    mut model: Model,
    settings: &TrainSettings,
    data: &Dataset,
    log: &mut dyn FnMut(&str),
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::contract("train", "dataset has no images"));
    }
    if data.extent != model.cfg.input_extent {
        return Err(Error::contract(
            "train",
            format!(
                "dataset images are {}x{} but the model expects {}x{}",
                data.extent.0, data.extent.1, model.cfg.input_extent.0, model.cfg.input_extent.1
            ),
        ));
    }
    if data.classes() > model.cfg.classes {
        return Err(Error::contract(
            "train",
            format!("dataset uses {} classes, model has {}", data.classes(), model.cfg.classes),
        ));
    }

    let mut opt = AdamW::new(settings.lr, settings.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut epoch = 0usize;
    let (mut e_loss, mut e_cls, mut e_box, mut e_n) = (0.0, 0.0, 0.0, 0usize);
    let mut losses = Vec::with_capacity(settings.iters);
    let mut last_eval = None;
    let mut stopped = false;

    for it in 0..settings.iters {
        if cursor >= order.len() {
            epoch += 1;
            let mut line = format!(
                "epoch={epoch} iters={it} loss={:.6} cls={:.6} box={:.6}",
                e_loss / e_n as f64,
                e_cls / e_n as f64,
                e_box / e_n as f64,
            );
            if epoch % settings.eval_every == 0 {
                let s = evaluate_model(&model, data, settings.conf_thresh, settings.nms_iou)?;
                line.push_str(&format!(" ap50={:.4} ap={:.4}", s.ap50, s.ap));
                last_eval = Some(s);
                if settings.stop_at_ap50.map_or(false, |t| s.ap50 >= t) {
                    log(&line);
                    stopped = true;
                    break;
                }
            }
            log(&line);
            order.shuffle(&mut rng);
            cursor = 0;
            (e_loss, e_cls, e_box, e_n) = (0.0, 0.0, 0.0, 0);
        }
        let end = (cursor + settings.batch).min(order.len());
        let ids: Vec<usize> = order[cursor..end].to_vec();
        cursor = end;
        let (batch, gts) = data.batch(&ids)?;
        let (total, cls, bx) = train_step(&mut model, &mut opt, &batch, &gts)?;
        losses.push(total);
        e_loss += total;
        e_cls += cls;
        e_box += bx;
        e_n += 1;
    }

    if !stopped {
        let s = evaluate_model(&model, data, settings.conf_thresh, settings.nms_iou)?;
        let mean = if e_n > 0 { e_loss / e_n as f64 } else { f64::NAN };
        log(&format!(
            "final iters={} loss={mean:.6} ap50={:.4} ap={:.4} ap_s={:.4}",
            losses.len(),
            s.ap50,
            s.ap,
            s.ap_s
        ));
        last_eval = Some(s);
    }

    Ok(TrainOutcome { model, losses, last_eval })
}
