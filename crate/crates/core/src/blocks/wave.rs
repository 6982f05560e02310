//! Cascaded wavelet compute kernel for the shallow stages.
//!
//! Each level runs a Haar analysis, recurses on the raw low-frequency band to
//! build a coarse prior, mixes the four bands with a grouped 5x5 convolution,
//! injects the prior into the mixed low-frequency band, and synthesizes back.
//! The deepest level uses a zero prior.

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::param::{register_conv, Bound, ParamStore};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct WaveConfig {
    pub channels: usize,
    pub levels: usize,
}

impl WaveConfig {
    pub fn new(channels: usize, levels: usize) -> Result<Self> {
        let cfg = WaveConfig { channels, levels };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("channels", "wave kernel needs at least one channel"));
        }
        if self.levels == 0 {
            return Err(Error::config("levels", "wave depth must be at least 1"));
        }
        Ok(())
    }

    /// Band-mixing convolution at every level: one group per sub-band, so
    /// mixing happens within a band but never across bands.
    pub fn band_spec(&self) -> ConvSpec {
        ConvSpec::new(4 * self.channels, 4 * self.channels, 5, 1, 2)
            .grouped(4)
            .no_bias()
    }

    fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << self.levels;
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape(
                "wave_forward",
                format!("extent {h}x{w} is not divisible by 2^{}", self.levels),
            ));
        }
        Ok(())
    }
}

pub struct WaveParams {
    /// One grouped 5x5 kernel per level, index 0 = finest.
    pub level_w: Vec<VarId>,
}

impl WaveParams {
    pub fn bind(bound: &Bound, prefix: &str, cfg: &WaveConfig) -> Result<Self> {
        let level_w = (1..=cfg.levels)
            .map(|l| bound.id(&format!("{prefix}.l{l}.w")))
            .collect::<Result<Vec<_>>>()?;
        Ok(WaveParams { level_w })
    }
}

pub fn register_wave(store: &mut ParamStore, prefix: &str, cfg: &WaveConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    for l in 1..=cfg.levels {
        register_conv(store, &format!("{prefix}.l{l}"), &cfg.band_spec(), rng)?;
    }
    Ok(())
}

pub fn wave_forward(tape: &mut Tape, cfg: &WaveConfig, p: &WaveParams, x: VarId) -> Result<VarId> {
    cfg.validate()?;
    if p.level_w.len() != cfg.levels {
        return Err(Error::contract(
            "wave_forward",
            format!("expected {} level kernels, got {}", cfg.levels, p.level_w.len()),
        ));
    }
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 || shape[1] != cfg.channels {
        return Err(Error::shape(
            "wave_forward",
            format!("expected [N,{},H,W] input, got {:?}", cfg.channels, shape),
        ));
    }
    cfg.check_extent(shape[2], shape[3])?;
    wave_level(tape, cfg, p, x, 0)
}

fn wave_level(tape: &mut Tape, cfg: &WaveConfig, p: &WaveParams, x: VarId, level: usize) -> Result<VarId> {
    let c = cfg.channels;
    let packed = tape.hwt(x)?;
    let prior = if level + 1 < cfg.levels {
        let ll = tape.slice_channels(packed, 0, c)?;
        Some(wave_level(tape, cfg, p, ll, level + 1)?)
    } else {
        None
    };
    let mixed = tape.conv2d(packed, &cfg.band_spec(), p.level_w[level], None)?;
    let assembled = match prior {
        Some(r) => {
            let ll = tape.slice_channels(mixed, 0, c)?;
            let rest = tape.slice_channels(mixed, c, 3 * c)?;
            let ll = tape.add(ll, r)?;
            tape.concat(&[ll, rest], 1)?
        }
        None => mixed,
    };
    tape.ihwt(assembled)
}

/// Gradient of one centered output pixel with respect to the input, collapsed
/// over channels into a spatial magnitude map.
pub fn wave_receptive_probe(cfg: &WaveConfig, params: &[Tensor], extent: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = WaveParams {
        level_w: params
            .iter()
            .map(|w| tape.leaf(w.clone()))
            .collect::<Result<Vec<_>>>()?,
    };
    let x = tape.leaf(Tensor::zeros(&[1, cfg.channels, extent, extent]))?;
    let y = wave_forward(&mut tape, cfg, &p, x)?;
    let mid = extent / 2;
    let pixel_c = tape.slice_channels(y, 0, 1)?;
    let pixel_h = tape.slice_axis(pixel_c, 2, mid, 1)?;
    let pixel = tape.slice_axis(pixel_h, 3, mid, 1)?;
    let scalar = tape.sum_all(pixel)?;
    let grads = tape.backward(scalar)?;
    let gx = grads.get_or_zeros(x, &[1, cfg.channels, extent, extent]);
    let mut map = Tensor::zeros(&[extent, extent]);
    for ch in 0..cfg.channels {
        for i in 0..extent {
            for j in 0..extent {
                let v = map.data()[i * extent + j] + gx.at4(0, ch, i, j).abs();
                map.data_mut()[i * extent + j] = v;
            }
        }
    }
    Ok(map)
}

/// Number of strictly nonzero cells in a probe map.
pub fn probe_support(map: &Tensor) -> usize {
    map.data().iter().filter(|v| **v != 0.0).count()
}
