//! Cross-stage partial fusion block.
//!
//! A multi-branch 3x3/1x1/identity convolution runs on the leading quarter of
//! the channels while the rest pass through untouched; a 1x1
//! expand-contract pair then mixes channels and a residual closes the block.
//! The branches collapse into one 3x3 kernel for deployment.

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::param::{register_conv, Bound, ParamStore};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct CpfConfig {
    pub channels: usize,
    pub partial: f64,
    pub expansion: usize,
}

impl CpfConfig {
    pub fn new(channels: usize) -> Result<Self> {
        CpfConfig::with_ratios(channels, 0.25, 2)
    }

    pub fn with_ratios(channels: usize, partial: f64, expansion: usize) -> Result<Self> {
        let cfg = CpfConfig { channels, partial, expansion };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let width = self.channels as f64 * self.partial;
        if width.fract() != 0.0 || width < 1.0 {
            return Err(Error::config(
                "partial",
                format!("{} of {} channels is not a whole positive width", self.partial, self.channels),
            ));
        }
        if self.expansion == 0 {
            return Err(Error::config("expansion", "expansion ratio must be at least 1"));
        }
        Ok(())
    }

    /// Channels covered by the multi-branch convolution.
    pub fn partial_channels(&self) -> usize {
        (self.channels as f64 * self.partial) as usize
    }

    pub fn spec3(&self) -> ConvSpec {
        let cp = self.partial_channels();
        ConvSpec::new(cp, cp, 3, 1, 1).no_bias()
    }

    pub fn spec1(&self) -> ConvSpec {
        let cp = self.partial_channels();
        ConvSpec::new(cp, cp, 1, 1, 0).no_bias()
    }

    pub fn expand_spec(&self) -> ConvSpec {
        ConvSpec::new(self.channels, self.channels * self.expansion, 1, 1, 0)
    }

    pub fn contract_spec(&self) -> ConvSpec {
        ConvSpec::new(self.channels * self.expansion, self.channels, 1, 1, 0)
    }
}

/// Partial convolution parameters, either as training-time branches or as
/// the deploy-time merged kernel.
pub enum PrParams {
    Branches { w3: VarId, w1: VarId, gamma: VarId, b: VarId },
    Merged { w: VarId, b: VarId },
}

pub struct CpfParams {
    pub pr: PrParams,
    pub expand_w: VarId,
    pub expand_b: VarId,
    pub contract_w: VarId,
    pub contract_b: VarId,
}

impl CpfParams {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        let pr = if bound.contains(&format!("{prefix}.pr.merged.w")) {
            PrParams::Merged {
                w: bound.id(&format!("{prefix}.pr.merged.w"))?,
                b: bound.id(&format!("{prefix}.pr.merged.b"))?,
            }
        } else {
            PrParams::Branches {
                w3: bound.id(&format!("{prefix}.pr.w3"))?,
                w1: bound.id(&format!("{prefix}.pr.w1"))?,
                gamma: bound.id(&format!("{prefix}.pr.gamma"))?,
                b: bound.id(&format!("{prefix}.pr.b"))?,
            }
        };
        Ok(CpfParams {
            pr,
            expand_w: bound.id(&format!("{prefix}.ex.w"))?,
            expand_b: bound.id(&format!("{prefix}.ex.b"))?,
            contract_w: bound.id(&format!("{prefix}.ct.w"))?,
            contract_b: bound.id(&format!("{prefix}.ct.b"))?,
        })
    }
}

pub fn register_cpf(store: &mut ParamStore, prefix: &str, cfg: &CpfConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    let cp = cfg.partial_channels();
    store.insert(
        &format!("{prefix}.pr.w3"),
        crate::param::kaiming_conv(&cfg.spec3(), rng),
    )?;
    store.insert(
        &format!("{prefix}.pr.w1"),
        crate::param::kaiming_conv(&cfg.spec1(), rng),
    )?;
    store.insert(&format!("{prefix}.pr.gamma"), Tensor::ones(&[cp]))?;
    store.insert(&format!("{prefix}.pr.b"), Tensor::zeros(&[cp]))?;
    register_conv(store, &format!("{prefix}.ex"), &cfg.expand_spec(), rng)?;
    register_conv(store, &format!("{prefix}.ct"), &cfg.contract_spec(), rng)
}

/// Multi-branch (or merged) convolution on the leading partial slice; the
/// remaining channels pass through bitwise.
pub fn prconv_forward(tape: &mut Tape, cfg: &CpfConfig, p: &CpfParams, x: VarId) -> Result<VarId> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 || shape[1] != cfg.channels {
        return Err(Error::shape(
            "prconv_forward",
            format!("expected [N,{},H,W] input, got {:?}", cfg.channels, shape),
        ));
    }
    let cp = cfg.partial_channels();
    let head = tape.slice_channels(x, 0, cp)?;
    let mixed = match &p.pr {
        PrParams::Branches { w3, w1, gamma, b } => {
            let y3 = tape.conv2d(head, &cfg.spec3(), *w3, None)?;
            let y1 = tape.conv2d(head, &cfg.spec1(), *w1, None)?;
            let gshaped = tape.reshape(*gamma, &[1, cp, 1, 1])?;
            let yid = tape.mul(head, gshaped)?;
            let sum = tape.add(y3, y1)?;
            let sum = tape.add(sum, yid)?;
            let bshaped = tape.reshape(*b, &[1, cp, 1, 1])?;
            tape.add(sum, bshaped)?
        }
        PrParams::Merged { w, b } => {
            let spec = ConvSpec::new(cp, cp, 3, 1, 1);
            tape.conv2d(head, &spec, *w, Some(*b))?
        }
    };
    if cp == cfg.channels {
        return Ok(mixed);
    }
    let tail = tape.slice_channels(x, cp, cfg.channels - cp)?;
    tape.concat(&[mixed, tail], 1)
}

/// Collapse branch tensors into one 3x3 kernel and bias: the 1x1 weight is
/// embedded at the kernel center and the identity becomes a center spike.
pub fn merge_reparam(w3: &Tensor, w1: &Tensor, gamma: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let cp = gamma.numel();
    if w3.shape() != [cp, cp, 3, 3] || w1.shape() != [cp, cp, 1, 1] || b.numel() != cp {
        return Err(Error::shape(
            "merge_reparam",
            format!("inconsistent branch shapes {:?} {:?} {:?}", w3.shape(), w1.shape(), b.shape()),
        ));
    }
    let mut merged = w3.clone();
    for o in 0..cp {
        for i in 0..cp {
            let center = ((o * cp + i) * 3 + 1) * 3 + 1;
            let mut v = merged.data()[center] + w1.data()[o * cp + i];
            if o == i {
                v += gamma.data()[o];
            }
            merged.data_mut()[center] = v;
        }
    }
    Ok((merged, b.clone()))
}

/// Rewrite a store in place: branch tensors under `prefix.pr.*` are replaced
/// by the merged kernel.
pub fn merge_reparam_store(store: &mut ParamStore, prefix: &str) -> Result<()> {
    let w3 = store.get(&format!("{prefix}.pr.w3"))?.clone();
    let w1 = store.get(&format!("{prefix}.pr.w1"))?.clone();
    let gamma = store.get(&format!("{prefix}.pr.gamma"))?.clone();
    let b = store.get(&format!("{prefix}.pr.b"))?.clone();
    let (mw, mb) = merge_reparam(&w3, &w1, &gamma, &b)?;
    store.remove(&format!("{prefix}.pr.w3"));
    store.remove(&format!("{prefix}.pr.w1"));
    store.remove(&format!("{prefix}.pr.gamma"));
    store.remove(&format!("{prefix}.pr.b"));
    store.insert(&format!("{prefix}.pr.merged.w"), mw)?;
    store.insert(&format!("{prefix}.pr.merged.b"), mb)
}

pub fn cpf_forward(tape: &mut Tape, cfg: &CpfConfig, p: &CpfParams, x: VarId) -> Result<VarId> {
    let mixed = prconv_forward(tape, cfg, p, x)?;
    let expanded = tape.conv2d(mixed, &cfg.expand_spec(), p.expand_w, Some(p.expand_b))?;
    let active = tape.relu(expanded)?;
    let contracted = tape.conv2d(active, &cfg.contract_spec(), p.contract_w, Some(p.contract_b))?;
    tape.add(x, contracted)
}

pub fn cpf_forward_bound(tape: &mut Tape, bound: &Bound, prefix: &str, cfg: &CpfConfig, x: VarId) -> Result<VarId> {
    let p = CpfParams::bind(bound, prefix)?;
    cpf_forward(tape, cfg, &p, x)
}
