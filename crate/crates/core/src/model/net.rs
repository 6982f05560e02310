//! Detector registration and forward pass.
//!
//! Layout: a stride-4 stem, stages S2..S5 of gated blocks (wavelet kernels
//! in S2/S3, attention kernels in S4/S5), a pairwise top-down/bottom-up
//! fusion neck at a single width, and dense per-scale heads. The bottom-up
//! merge next to S2 is the dual-domain coordination block; the configuration
//! toggles swap each specialized piece for a plain convolution.

use crate::blocks::akat::{akat_forward_bound, register_akat};
use crate::blocks::cpf::{cpf_forward_bound, merge_reparam_store, register_cpf};
use crate::blocks::hsg::{hsg_forward_bound, HsgConfig};
use crate::blocks::mdfc::{mdfc_forward_bound, register_mdfc};
use crate::blocks::wave::{register_wave, wave_forward, WaveParams};
use crate::blocks::{hsg::register_hsg, wave::WaveConfig};
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::model::config::{stride_of, ModelConfig};
use crate::param::{bound_conv, register_conv, Bound, ParamStore};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Classification bias prior so fresh models start predicting background
/// with probability 0.99.
const CLS_PRIOR: f64 = 0.01;

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOut {
    pub level: usize,
    pub stride: usize,
    pub cls: VarId,
    pub boxes: VarId,
}

/// Every named intermediate plus the head outputs of one forward pass.
pub struct Trace {
    pub features: Vec<(String, VarId)>,
    pub heads: Vec<HeadOut>,
}

impl Trace {
    pub fn feature(&self, name: &str) -> Result<VarId> {
        self.features
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| {
                let known: Vec<&str> = self.features.iter().map(|(n, _)| n.as_str()).collect();
                Error::contract("trace", format!("no feature named {name}; known: {}", known.join(", ")))
            })
    }
}

fn stem_mid(cfg: &ModelConfig) -> usize {
    (cfg.width(2) / 2).max(1)
}

fn stem_specs(cfg: &ModelConfig) -> (ConvSpec, ConvSpec) {
    let mid = stem_mid(cfg);
    (ConvSpec::new(3, mid, 3, 2, 1), ConvSpec::new(mid, cfg.width(2), 3, 2, 1))
}

fn down_spec(cfg: &ModelConfig, level: usize) -> ConvSpec {
    ConvSpec::new(cfg.width(level - 1), cfg.width(level), 3, 2, 1)
}

fn plain_kernel_spec(compute: usize) -> ConvSpec {
    ConvSpec::new(compute, compute, 3, 1, 1)
}

fn lateral_spec(cfg: &ModelConfig, level: usize) -> ConvSpec {
    ConvSpec::new(cfg.width(level), cfg.neck_width(), 1, 1, 0)
}

fn reduce_spec(cfg: &ModelConfig) -> ConvSpec {
    ConvSpec::new(2 * cfg.neck_width(), cfg.neck_width(), 1, 1, 0)
}

fn fuse_conv_spec(cfg: &ModelConfig) -> ConvSpec {
    let w = cfg.neck_width();
    ConvSpec::new(w, w, 3, 1, 1)
}

fn neck_down_spec(cfg: &ModelConfig) -> ConvSpec {
    let w = cfg.neck_width();
    ConvSpec::new(w, w, 3, 2, 1)
}

fn head_stem_spec(cfg: &ModelConfig) -> ConvSpec {
    let w = cfg.neck_width();
    ConvSpec::new(w, w, 3, 1, 1)
}

fn cls_spec(cfg: &ModelConfig) -> ConvSpec {
    ConvSpec::new(cfg.neck_width(), cfg.classes, 1, 1, 0)
}

fn box_spec(cfg: &ModelConfig) -> ConvSpec {
    ConvSpec::new(cfg.neck_width(), 4, 1, 1, 0)
}

fn register_stage_block(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    level: usize,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let hsg = HsgConfig::new(cfg.width(level), cfg.alpha)?;
    register_hsg(store, prefix, &hsg, rng)?;
    if !cfg.use_wekat {
        register_conv(store, &format!("{prefix}.pk"), &plain_kernel_spec(hsg.compute), rng)
    } else if level <= 3 {
        register_wave(store, &format!("{prefix}.wave"), &cfg.wave_config(level)?, rng)
    } else {
        register_akat(store, &format!("{prefix}.akat"), &cfg.akat_config(level)?, rng)
    }
}

fn register_fuse_block(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if cfg.use_cpf {
        register_cpf(store, &format!("{prefix}.cpf"), &cfg.cpf_config()?, rng)
    } else {
        register_conv(store, &format!("{prefix}.conv"), &fuse_conv_spec(cfg), rng)
    }
}

fn register_model(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let (c1, c2) = stem_specs(cfg);
    register_conv(store, "stem.c1", &c1, rng)?;
    register_conv(store, "stem.c2", &c2, rng)?;
    for level in cfg.levels() {
        if level > 2 {
            register_conv(store, &format!("s{level}.down"), &down_spec(cfg, level), rng)?;
        }
        for b in 0..cfg.depth(level) {
            register_stage_block(store, cfg, level, &format!("s{level}.b{b}"), rng)?;
        }
    }
    let top = cfg.top_level();
    for level in cfg.levels() {
        register_conv(store, &format!("neck.lat{level}"), &lateral_spec(cfg, level), rng)?;
    }
    for level in 2..top {
        register_conv(store, &format!("neck.td{level}.red"), &reduce_spec(cfg), rng)?;
        register_fuse_block(store, cfg, &format!("neck.td{level}"), rng)?;
    }
    if cfg.use_mdfc {
        register_mdfc(store, "neck.mdfc", &cfg.mdfc_config()?, rng)?;
    } else {
        register_conv(store, "neck.bu3.down", &neck_down_spec(cfg), rng)?;
        register_conv(store, "neck.bu3.red", &reduce_spec(cfg), rng)?;
    }
    for level in 4..=top {
        register_conv(store, &format!("neck.bu{level}.down"), &neck_down_spec(cfg), rng)?;
        register_conv(store, &format!("neck.bu{level}.red"), &reduce_spec(cfg), rng)?;
        register_fuse_block(store, cfg, &format!("neck.bu{level}"), rng)?;
    }
    for level in cfg.detect.levels() {
        register_conv(store, &format!("head.d{level}.cls.c"), &head_stem_spec(cfg), rng)?;
        register_conv(store, &format!("head.d{level}.cls.p"), &cls_spec(cfg), rng)?;
        register_conv(store, &format!("head.d{level}.box.c"), &head_stem_spec(cfg), rng)?;
        register_conv(store, &format!("head.d{level}.box.p"), &box_spec(cfg), rng)?;
        let bias = store.get_mut(&format!("head.d{level}.cls.p.b"))?;
        *bias = Tensor::full(&[cfg.classes], -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln());
    }
    Ok(())
}

/// Validate the configuration and draw fresh parameters.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    register_model(&mut store, cfg, &mut rng)?;
    Ok(Model { cfg: cfg.clone(), params: store })
}

fn conv_silu(tape: &mut Tape, bound: &Bound, prefix: &str, spec: &ConvSpec, x: VarId) -> Result<VarId> {
    let y = bound_conv(tape, bound, prefix, spec, x)?;
    tape.silu(y)
}

fn stage_kernel(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    level: usize,
    prefix: &str,
    compute: usize,
    x: VarId,
) -> Result<VarId> {
    if !cfg.use_wekat {
        conv_silu(tape, bound, &format!("{prefix}.pk"), &plain_kernel_spec(compute), x)
    } else if level <= 3 {
        let wcfg: WaveConfig = cfg.wave_config(level)?;
        let p = WaveParams::bind(bound, &format!("{prefix}.wave"), &wcfg)?;
        wave_forward(tape, &wcfg, &p, x)
    } else {
        akat_forward_bound(tape, bound, &format!("{prefix}.akat"), &cfg.akat_config(level)?, x)
    }
}

/// Run the full detector on an already-bound tape.
pub fn model_forward(tape: &mut Tape, cfg: &ModelConfig, bound: &Bound, image: VarId) -> Result<Trace> {
    let shape = tape.value(image).shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 || (shape[2], shape[3]) != cfg.input_extent {
        return Err(Error::shape(
            "model_forward",
            format!(
                "expected [N,3,{},{}] input, got {shape:?}",
                cfg.input_extent.0, cfg.input_extent.1
            ),
        ));
    }
    let mut features: Vec<(String, VarId)> = Vec::new();
    let (c1, c2) = stem_specs(cfg);
    let mut x = conv_silu(tape, bound, "stem.c1", &c1, image)?;
    x = conv_silu(tape, bound, "stem.c2", &c2, x)?;
    features.push(("stem".to_string(), x));

    let top = cfg.top_level();
    let mut stage_out: Vec<VarId> = Vec::new();
    for level in cfg.levels() {
        if level > 2 {
            x = conv_silu(tape, bound, &format!("s{level}.down"), &down_spec(cfg, level), x)?;
        }
        let hsg = HsgConfig::new(cfg.width(level), cfg.alpha)?;
        for b in 0..cfg.depth(level) {
            let prefix = format!("s{level}.b{b}");
            x = hsg_forward_bound(tape, bound, &prefix, &hsg, x, |tape, c| {
                stage_kernel(tape, bound, cfg, level, &prefix, hsg.compute, c)
            })?;
        }
        features.push((format!("s{level}"), x));
        stage_out.push(x);
    }

    let lat: Vec<VarId> = cfg
        .levels()
        .iter()
        .zip(&stage_out)
        .map(|(level, s)| bound_conv(tape, bound, &format!("neck.lat{level}"), &lateral_spec(cfg, *level), *s))
        .collect::<Result<_>>()?;
    let at = |level: usize| level - 2;

    let mut td: Vec<Option<VarId>> = vec![None; top - 1];
    td[at(top)] = Some(lat[at(top)]);
    for level in (2..top).rev() {
        let up = tape.upsample_nearest2(td[at(level + 1)].unwrap())?;
        let cat = tape.concat(&[lat[at(level)], up], 1)?;
        let red = conv_silu(tape, bound, &format!("neck.td{level}.red"), &reduce_spec(cfg), cat)?;
        let fused = if cfg.use_cpf {
            cpf_forward_bound(tape, bound, &format!("neck.td{level}.cpf"), &cfg.cpf_config()?, red)?
        } else {
            conv_silu(tape, bound, &format!("neck.td{level}.conv"), &fuse_conv_spec(cfg), red)?
        };
        td[at(level)] = Some(fused);
    }
    for level in 2..=top {
        features.push((format!("t{level}"), td[at(level)].unwrap()));
    }

    let mut bu: Vec<Option<VarId>> = vec![None; top - 1];
    bu[at(2)] = td[at(2)];
    let b3 = if cfg.use_mdfc {
        mdfc_forward_bound(tape, bound, "neck.mdfc", &cfg.mdfc_config()?, bu[at(2)].unwrap(), td[at(3)].unwrap())?
    } else {
        let down = conv_silu(tape, bound, "neck.bu3.down", &neck_down_spec(cfg), bu[at(2)].unwrap())?;
        let cat = tape.concat(&[down, td[at(3)].unwrap()], 1)?;
        conv_silu(tape, bound, "neck.bu3.red", &reduce_spec(cfg), cat)?
    };
    bu[at(3)] = Some(b3);
    for level in 4..=top {
        let down = conv_silu(tape, bound, &format!("neck.bu{level}.down"), &neck_down_spec(cfg), bu[at(level - 1)].unwrap())?;
        let cat = tape.concat(&[down, td[at(level)].unwrap()], 1)?;
        let red = conv_silu(tape, bound, &format!("neck.bu{level}.red"), &reduce_spec(cfg), cat)?;
        let fused = if cfg.use_cpf {
            cpf_forward_bound(tape, bound, &format!("neck.bu{level}.cpf"), &cfg.cpf_config()?, red)?
        } else {
            conv_silu(tape, bound, &format!("neck.bu{level}.conv"), &fuse_conv_spec(cfg), red)?
        };
        bu[at(level)] = Some(fused);
    }
    for level in 3..=top {
        features.push((format!("b{level}"), bu[at(level)].unwrap()));
    }

    let mut heads = Vec::new();
    for &level in cfg.detect.levels() {
        let feat = bu[at(level)].unwrap();
        let cs = conv_silu(tape, bound, &format!("head.d{level}.cls.c"), &head_stem_spec(cfg), feat)?;
        let cls = bound_conv(tape, bound, &format!("head.d{level}.cls.p"), &cls_spec(cfg), cs)?;
        let bs = conv_silu(tape, bound, &format!("head.d{level}.box.c"), &head_stem_spec(cfg), feat)?;
        let boxes = bound_conv(tape, bound, &format!("head.d{level}.box.p"), &box_spec(cfg), bs)?;
        heads.push(HeadOut { level, stride: stride_of(level), cls, boxes });
    }
    Ok(Trace { features, heads })
}

/// Merge every reparameterizable branch group in the store; returns how many
/// blocks were rewritten.
pub fn merge_all_reparam(store: &mut ParamStore) -> Result<usize> {
    let prefixes: Vec<String> = store
        .names()
        .filter_map(|n| n.strip_suffix(".pr.w3").map(String::from))
        .collect();
    for p in &prefixes {
        merge_reparam_store(store, p)?;
    }
    Ok(prefixes.len())
}

impl Model {
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        self.params.bind(tape)
    }

    /// One inference pass; returns the head maps as plain tensors.
    pub fn forward_detect(&self, image: &Tensor) -> Result<Vec<crate::model::post::HeadMaps>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let img = tape.constant(image.clone())?;
        let trace = model_forward(&mut tape, &self.cfg, &bound, img)?;
        Ok(trace
            .heads
            .iter()
            .map(|h| crate::model::post::HeadMaps {
                level: h.level,
                stride: h.stride,
                cls: tape.value(h.cls).clone(),
                boxes: tape.value(h.boxes).clone(),
            })
            .collect())
    }
}
