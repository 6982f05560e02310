//! Heterogeneous split-gating scaffold.
//!
//! A block first peels off a slice of identity channels, remaps the rest with
//! a 1x1 convolution, and splits the result into gate, retain, and compute
//! streams. After the compute kernel runs, the streams are fused back to the
//! input width and a residual is added.

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::param::{register_conv, Bound, ParamStore};
use crate::tape::{Tape, VarId};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct HsgConfig {
    pub channels: usize,
    pub alpha: f64,
    pub gate: usize,
    pub retain: usize,
    pub compute: usize,
}

impl HsgConfig {
    /// Split `channels` with ratio `alpha` into identity and processing
    /// streams, then carve the processing width into near-equal thirds with
    /// gate and compute forced to the same width so the gate can modulate the
    /// compute stream elementwise.
    pub fn new(channels: usize, alpha: f64) -> Result<Self> {
        if !(0.0 < alpha && alpha < 1.0) {
            return Err(Error::config("alpha", "must lie in (0,1)"));
        }
        let keep = (alpha * channels as f64).round() as usize;
        let proc = channels
            .checked_sub(keep)
            .ok_or_else(|| Error::config("channels", "split ratio leaves no processing channels"))?;
        let third = proc / 3;
        let cfg = HsgConfig {
            channels,
            alpha,
            gate: third,
            retain: proc - 2 * third,
            compute: third,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.identity_channels() < 1 {
            return Err(Error::config("channels", "identity stream must keep at least one channel"));
        }
        if self.gate < 1 || self.retain < 1 || self.compute < 1 {
            return Err(Error::config(
                "channels",
                format!(
                    "stream widths (gate {}, retain {}, compute {}) must all be at least 1",
                    self.gate, self.retain, self.compute
                ),
            ));
        }
        if self.gate != self.compute {
            return Err(Error::config("gate", "gate width must equal compute width"));
        }
        Ok(())
    }

    pub fn identity_channels(&self) -> usize {
        (self.alpha * self.channels as f64).round() as usize
    }

    pub fn proc_channels(&self) -> usize {
        self.channels - self.identity_channels()
    }

    /// Width after the 1x1 remap: gate + retain + compute.
    pub fn expanded(&self) -> usize {
        self.gate + self.retain + self.compute
    }

    pub fn mix_spec(&self) -> ConvSpec {
        ConvSpec::new(self.proc_channels(), self.expanded(), 1, 1, 0)
    }

    pub fn fuse_spec(&self) -> ConvSpec {
        ConvSpec::new(self.identity_channels() + self.retain + self.compute, self.channels, 1, 1, 0)
    }
}

/// Tape nodes for the three routed streams.
pub struct StreamSplit {
    pub gate: VarId,
    pub retain: VarId,
    pub compute: VarId,
}

pub struct HsgParams {
    pub mix_w: VarId,
    pub mix_b: VarId,
    pub fuse_w: VarId,
    pub fuse_b: VarId,
}

impl HsgParams {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(HsgParams {
            mix_w: bound.id(&format!("{prefix}.mix.w"))?,
            mix_b: bound.id(&format!("{prefix}.mix.b"))?,
            fuse_w: bound.id(&format!("{prefix}.fuse.w"))?,
            fuse_b: bound.id(&format!("{prefix}.fuse.b"))?,
        })
    }
}

pub fn register_hsg(store: &mut ParamStore, prefix: &str, cfg: &HsgConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    register_conv(store, &format!("{prefix}.mix"), &cfg.mix_spec(), rng)?;
    register_conv(store, &format!("{prefix}.fuse"), &cfg.fuse_spec(), rng)
}

/// Peel identity channels, remap the tail with the 1x1 mix, and slice the
/// result into the three streams.
pub fn hsg_partition(
    tape: &mut Tape,
    cfg: &HsgConfig,
    p: &HsgParams,
    x: VarId,
) -> Result<(VarId, StreamSplit)> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 || shape[1] != cfg.channels {
        return Err(Error::shape(
            "hsg_partition",
            format!("expected [N,{},H,W] input, got {:?}", cfg.channels, shape),
        ));
    }
    let keep = cfg.identity_channels();
    let identity = tape.slice_channels(x, 0, keep)?;
    let tail = tape.slice_channels(x, keep, cfg.proc_channels())?;
    let mixed = tape.conv2d(tail, &cfg.mix_spec(), p.mix_w, Some(p.mix_b))?;
    let gate = tape.slice_channels(mixed, 0, cfg.gate)?;
    let retain = tape.slice_channels(mixed, cfg.gate, cfg.retain)?;
    let compute = tape.slice_channels(mixed, cfg.gate + cfg.retain, cfg.compute)?;
    Ok((identity, StreamSplit { gate, retain, compute }))
}

/// Gate the processed compute stream, fuse all streams back to the input
/// width with a 1x1 projection, and add the block residual.
pub fn hsg_recombine(
    tape: &mut Tape,
    cfg: &HsgConfig,
    p: &HsgParams,
    x: VarId,
    identity: VarId,
    streams: &StreamSplit,
    processed: VarId,
) -> Result<VarId> {
    if tape.value(processed).shape() != tape.value(streams.compute).shape() {
        return Err(Error::shape(
            "hsg_recombine",
            format!(
                "processed compute stream {:?} does not match the compute slice {:?}",
                tape.value(processed).shape(),
                tape.value(streams.compute).shape()
            ),
        ));
    }
    let g = tape.sigmoid(streams.gate)?;
    let gated = tape.mul(g, processed)?;
    let cat = tape.concat(&[identity, streams.retain, gated], 1)?;
    let fused = tape.conv2d(cat, &cfg.fuse_spec(), p.fuse_w, Some(p.fuse_b))?;
    tape.add(fused, x)
}

/// Full block: partition, run `kernel` on the compute stream, recombine.
pub fn hsg_forward<F>(
    tape: &mut Tape,
    cfg: &HsgConfig,
    p: &HsgParams,
    x: VarId,
    kernel: F,
) -> Result<VarId>
where
    F: FnOnce(&mut Tape, VarId) -> Result<VarId>,
{
    let (identity, streams) = hsg_partition(tape, cfg, p, x)?;
    let processed = kernel(tape, streams.compute)?;
    hsg_recombine(tape, cfg, p, x, identity, &streams, processed)
}

/// Convenience wrapper binding parameters by name.
pub fn hsg_forward_bound<F>(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    cfg: &HsgConfig,
    x: VarId,
    kernel: F,
) -> Result<VarId>
where
    F: FnOnce(&mut Tape, VarId) -> Result<VarId>,
{
    let p = HsgParams::bind(bound, prefix)?;
    hsg_forward(tape, cfg, &p, x, kernel)
}
