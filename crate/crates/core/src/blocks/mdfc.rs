//! Multi-domain feature coordination.
//!
//! Phase 1 halves the channels into a spatial branch (two 3x3 convolutions,
//! the first stride 2) and a frequency branch (max pool, 1x1 remap, then a
//! normalized spectral cross-gate of two 1x1 projections), multiplies the
//! branches, and projects the concatenation. Phase 2 adds an aligned neighbor feature and
//! refines the sum with three cues: a learnable symmetric spectral gate, a
//! pooled channel attention, and a Sobel edge prior.

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::freq::SOBEL_EPS;
use crate::param::{register_conv, register_norm, Bound, ParamStore};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// How the adjacent-scale feature is brought to the fused extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignMode {
    None,
    Up,
    Down,
}

#[derive(Clone, Copy, Debug)]
pub struct MdfcConfig {
    pub channels: usize,
    pub out_channels: usize,
    /// Spatial extent after phase 1, which fixes the spectral gate shape.
    pub spectral_extent: (usize, usize),
    pub align: AlignMode,
}

impl MdfcConfig {
    pub fn new(channels: usize, out_channels: usize, spectral_extent: (usize, usize)) -> Result<Self> {
        let cfg = MdfcConfig { channels, out_channels, spectral_extent, align: AlignMode::None };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_align(mut self, align: AlignMode) -> Self {
        self.align = align;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 || self.channels % 2 != 0 {
            return Err(Error::config("channels", "phase 1 needs an even channel count"));
        }
        if self.out_channels < 4 || self.out_channels % 4 != 0 {
            return Err(Error::config(
                "out_channels",
                "channel attention reduces by 4, so the output width must be a positive multiple of 4",
            ));
        }
        if self.spectral_extent.0 == 0 || self.spectral_extent.1 == 0 {
            return Err(Error::config("spectral_extent", "extent must be positive"));
        }
        Ok(())
    }

    pub fn half(&self) -> usize {
        self.channels / 2
    }

    pub fn sp2_spec(&self) -> ConvSpec {
        ConvSpec::new(self.half(), self.half(), 3, 2, 1)
    }

    pub fn sp1_spec(&self) -> ConvSpec {
        ConvSpec::new(self.half(), self.half(), 3, 1, 1)
    }

    pub fn fq_spec(&self) -> ConvSpec {
        ConvSpec::new(self.half(), self.half(), 1, 1, 0)
    }

    pub fn p1_proj_spec(&self) -> ConvSpec {
        ConvSpec::new(self.channels, self.out_channels, 1, 1, 0)
    }

    pub fn ca_a_spec(&self) -> ConvSpec {
        ConvSpec::new(self.out_channels, self.out_channels / 4, 1, 1, 0)
    }

    pub fn ca_b_spec(&self) -> ConvSpec {
        ConvSpec::new(self.out_channels / 4, self.out_channels, 1, 1, 0)
    }

    pub fn sobel_spec(&self) -> ConvSpec {
        ConvSpec::new(self.out_channels, self.out_channels, 1, 1, 0).no_bias()
    }

    pub fn rf_proj_spec(&self) -> ConvSpec {
        ConvSpec::new(self.out_channels, self.out_channels, 1, 1, 0)
    }

    pub fn align_spec(&self) -> ConvSpec {
        ConvSpec::new(self.out_channels, self.out_channels, 3, 2, 1)
    }

    pub fn gate_shape(&self) -> [usize; 4] {
        [1, 2 * self.out_channels, self.spectral_extent.0, self.spectral_extent.1]
    }

    /// Spectral gate that leaves every bin untouched: 1 + 0i.
    pub fn unit_gate(&self) -> Tensor {
        let mut g = Tensor::zeros(&self.gate_shape());
        let plane = self.spectral_extent.0 * self.spectral_extent.1;
        for v in g.data_mut()[..self.out_channels * plane].iter_mut() {
            *v = 1.0;
        }
        g
    }
}

pub struct MdfcParams {
    pub sp2_w: VarId,
    pub sp2_b: VarId,
    pub sp1_w: VarId,
    pub sp1_b: VarId,
    pub fq_pre_w: VarId,
    pub fq_pre_b: VarId,
    pub fq_a_w: VarId,
    pub fq_a_b: VarId,
    pub fq_b_w: VarId,
    pub fq_b_b: VarId,
    pub fq_nm_g: VarId,
    pub fq_nm_b: VarId,
    pub p1_w: VarId,
    pub p1_b: VarId,
    pub gate: VarId,
    pub ca_a_w: VarId,
    pub ca_a_b: VarId,
    pub ca_b_w: VarId,
    pub ca_b_b: VarId,
    pub sob_w: VarId,
    pub rf_w: VarId,
    pub rf_b: VarId,
    pub align: Option<(VarId, VarId)>,
}

impl MdfcParams {
    pub fn bind(bound: &Bound, prefix: &str, cfg: &MdfcConfig) -> Result<Self> {
        let align = match cfg.align {
            AlignMode::Down => Some((
                bound.id(&format!("{prefix}.align.w"))?,
                bound.id(&format!("{prefix}.align.b"))?,
            )),
            _ => None,
        };
        Ok(MdfcParams {
            sp2_w: bound.id(&format!("{prefix}.sp.s2.w"))?,
            sp2_b: bound.id(&format!("{prefix}.sp.s2.b"))?,
            sp1_w: bound.id(&format!("{prefix}.sp.s1.w"))?,
            sp1_b: bound.id(&format!("{prefix}.sp.s1.b"))?,
            fq_pre_w: bound.id(&format!("{prefix}.fq.pre.w"))?,
            fq_pre_b: bound.id(&format!("{prefix}.fq.pre.b"))?,
            fq_a_w: bound.id(&format!("{prefix}.fq.a.w"))?,
            fq_a_b: bound.id(&format!("{prefix}.fq.a.b"))?,
            fq_b_w: bound.id(&format!("{prefix}.fq.b.w"))?,
            fq_b_b: bound.id(&format!("{prefix}.fq.b.b"))?,
            fq_nm_g: bound.id(&format!("{prefix}.fq.nm.g"))?,
            fq_nm_b: bound.id(&format!("{prefix}.fq.nm.bias"))?,
            p1_w: bound.id(&format!("{prefix}.p1.w"))?,
            p1_b: bound.id(&format!("{prefix}.p1.b"))?,
            gate: bound.id(&format!("{prefix}.rf.gate"))?,
            ca_a_w: bound.id(&format!("{prefix}.rf.ca.a.w"))?,
            ca_a_b: bound.id(&format!("{prefix}.rf.ca.a.b"))?,
            ca_b_w: bound.id(&format!("{prefix}.rf.ca.b.w"))?,
            ca_b_b: bound.id(&format!("{prefix}.rf.ca.b.b"))?,
            sob_w: bound.id(&format!("{prefix}.rf.sob.w"))?,
            rf_w: bound.id(&format!("{prefix}.rf.proj.w"))?,
            rf_b: bound.id(&format!("{prefix}.rf.proj.b"))?,
            align,
        })
    }
}

pub fn register_mdfc(store: &mut ParamStore, prefix: &str, cfg: &MdfcConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    register_conv(store, &format!("{prefix}.sp.s2"), &cfg.sp2_spec(), rng)?;
    register_conv(store, &format!("{prefix}.sp.s1"), &cfg.sp1_spec(), rng)?;
    register_conv(store, &format!("{prefix}.fq.pre"), &cfg.fq_spec(), rng)?;
    register_conv(store, &format!("{prefix}.fq.a"), &cfg.fq_spec(), rng)?;
    register_conv(store, &format!("{prefix}.fq.b"), &cfg.fq_spec(), rng)?;
    register_norm(store, &format!("{prefix}.fq.nm"), cfg.half())?;
    register_conv(store, &format!("{prefix}.p1"), &cfg.p1_proj_spec(), rng)?;
    store.insert(&format!("{prefix}.rf.gate"), cfg.unit_gate())?;
    register_conv(store, &format!("{prefix}.rf.ca.a"), &cfg.ca_a_spec(), rng)?;
    register_conv(store, &format!("{prefix}.rf.ca.b"), &cfg.ca_b_spec(), rng)?;
    register_conv(store, &format!("{prefix}.rf.sob"), &cfg.sobel_spec(), rng)?;
    register_conv(store, &format!("{prefix}.rf.proj"), &cfg.rf_proj_spec(), rng)?;
    if cfg.align == AlignMode::Down {
        register_conv(store, &format!("{prefix}.align"), &cfg.align_spec(), rng)?;
    }
    Ok(())
}

/// Bin-wise product of two packed spectra with `c` complex channels each.
fn complex_mul(tape: &mut Tape, a: VarId, b: VarId, c: usize) -> Result<VarId> {
    let ar = tape.slice_channels(a, 0, c)?;
    let ai = tape.slice_channels(a, c, c)?;
    let br = tape.slice_channels(b, 0, c)?;
    let bi = tape.slice_channels(b, c, c)?;
    let rr = tape.mul(ar, br)?;
    let ii = tape.mul(ai, bi)?;
    let ri = tape.mul(ar, bi)?;
    let ir = tape.mul(ai, br)?;
    let re = tape.sub(rr, ii)?;
    let im = tape.add(ri, ir)?;
    tape.concat(&[re, im], 1)
}

/// Frequency-adaptive modulation: halve the extent, cross-gate the frequency
/// branch, multiply it into the spatial branch, and project.
pub fn mdfc_phase1(tape: &mut Tape, cfg: &MdfcConfig, p: &MdfcParams, x: VarId) -> Result<VarId> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 || shape[1] != cfg.channels {
        return Err(Error::shape(
            "mdfc_phase1",
            format!("expected [N,{},H,W] input, got {:?}", cfg.channels, shape),
        ));
    }
    if shape[2] % 2 != 0 || shape[3] % 2 != 0 {
        return Err(Error::shape(
            "mdfc_phase1",
            format!("extent {}x{} must be even to halve", shape[2], shape[3]),
        ));
    }
    let half = cfg.half();
    let sp_in = tape.slice_channels(x, 0, half)?;
    let fp_in = tape.slice_channels(x, half, half)?;

    let sp = tape.conv2d(sp_in, &cfg.sp2_spec(), p.sp2_w, Some(p.sp2_b))?;
    let sp = tape.conv2d(sp, &cfg.sp1_spec(), p.sp1_w, Some(p.sp1_b))?;

    let pooled = tape.max_pool2(fp_in)?;
    let pre = tape.conv2d(pooled, &cfg.fq_spec(), p.fq_pre_w, Some(p.fq_pre_b))?;
    let op_a = tape.conv2d(pre, &cfg.fq_spec(), p.fq_a_w, Some(p.fq_a_b))?;
    let op_b = tape.conv2d(pre, &cfg.fq_spec(), p.fq_b_w, Some(p.fq_b_b))?;
    let spec_a = tape.fft2d(op_a)?;
    let spec_b = tape.fft2d(op_b)?;
    let prod = complex_mul(tape, spec_a, spec_b, half)?;
    let fp = tape.ifft2d(prod)?;
    // The bin-wise product of two transforms is a circular convolution with
    // H*W summed terms; dividing by the pooled cell count keeps the modulating
    // field on the same scale as its operands, and the normalization keeps it
    // there regardless of how large the incoming features run.
    let cells = ((shape[2] / 2) * (shape[3] / 2)) as f64;
    let fp = tape.mul_scalar(fp, 1.0 / cells)?;
    let fp = tape.channel_norm(fp, p.fq_nm_g, p.fq_nm_b)?;

    let modulated = tape.mul(sp, fp)?;
    let cat = tape.concat(&[modulated, sp], 1)?;
    tape.conv2d(cat, &cfg.p1_proj_spec(), p.p1_w, Some(p.p1_b))
}

fn channel_attention(tape: &mut Tape, cfg: &MdfcConfig, p: &MdfcParams, z: VarId) -> Result<VarId> {
    let pooled = tape.global_avg_pool(z)?;
    let squeezed = tape.conv2d(pooled, &cfg.ca_a_spec(), p.ca_a_w, Some(p.ca_a_b))?;
    let active = tape.relu(squeezed)?;
    let expanded = tape.conv2d(active, &cfg.ca_b_spec(), p.ca_b_w, Some(p.ca_b_b))?;
    tape.sigmoid(expanded)
}

/// Multi-domain refinement of `fused + neighbor`.
pub fn mdfc_phase2(tape: &mut Tape, cfg: &MdfcConfig, p: &MdfcParams, fused: VarId, neighbor: VarId) -> Result<VarId> {
    let fs = tape.value(fused).shape().to_vec();
    let ns = tape.value(neighbor).shape().to_vec();
    if fs != ns {
        return Err(Error::shape(
            "mdfc_phase2",
            format!("fused {fs:?} and aligned neighbor {ns:?} disagree"),
        ));
    }
    if fs[1] != cfg.out_channels || (fs[2], fs[3]) != cfg.spectral_extent {
        return Err(Error::shape(
            "mdfc_phase2",
            format!(
                "expected [N,{},{},{}], got {fs:?}",
                cfg.out_channels, cfg.spectral_extent.0, cfg.spectral_extent.1
            ),
        ));
    }
    let z = tape.add(fused, neighbor)?;

    let spectrum = tape.fft2d(z)?;
    let sym_gate = tape.spectral_reflect(p.gate)?;
    let gated = complex_mul(tape, sym_gate, spectrum, cfg.out_channels)?;
    let spectral_cue = tape.ifft2d(gated)?;

    let weights = channel_attention(tape, cfg, p, z)?;
    let channel_cue = tape.mul(z, weights)?;

    let mag = tape.sobel_mag(z)?;
    let edges = tape.add_scalar(mag, -SOBEL_EPS.sqrt())?;
    let edge_cue = tape.conv2d(edges, &cfg.sobel_spec(), p.sob_w, None)?;

    let sum = tape.add(spectral_cue, channel_cue)?;
    let sum = tape.add(sum, edge_cue)?;
    let projected = tape.conv2d(sum, &cfg.rf_proj_spec(), p.rf_w, Some(p.rf_b))?;
    tape.add(projected, z)
}

/// Phase 1 on the low-level feature, neighbor alignment, then phase 2.
pub fn mdfc_forward(tape: &mut Tape, cfg: &MdfcConfig, p: &MdfcParams, low: VarId, adjacent: VarId) -> Result<VarId> {
    let fused = mdfc_phase1(tape, cfg, p, low)?;
    let neighbor = match cfg.align {
        AlignMode::None => adjacent,
        AlignMode::Up => tape.upsample_nearest2(adjacent)?,
        AlignMode::Down => {
            let (w, b) = p.align.ok_or_else(|| {
                Error::contract("mdfc_forward", "downsample alignment requested without parameters")
            })?;
            tape.conv2d(adjacent, &cfg.align_spec(), w, Some(b))?
        }
    };
    mdfc_phase2(tape, cfg, p, fused, neighbor)
}

pub fn mdfc_forward_bound(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    cfg: &MdfcConfig,
    low: VarId,
    adjacent: VarId,
) -> Result<VarId> {
    let p = MdfcParams::bind(bound, prefix, cfg)?;
    mdfc_forward(tape, cfg, &p, low, adjacent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::freq::{fft2d, ifft2d, Spectrum};
    use crate::gradcheck::{finite_diff_check, FdOptions};
    use rand_chacha::rand_core::SeedableRng;

    fn param_tensors(cfg: &MdfcConfig, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        let scale = |t: Tensor| t.map(|v| v * 0.5);
        vec![
            scale(Tensor::randn(&cfg.sp2_spec().weight_shape(), rng)),
            Tensor::randn(&[cfg.half()], rng),
            scale(Tensor::randn(&cfg.sp1_spec().weight_shape(), rng)),
            Tensor::randn(&[cfg.half()], rng),
            scale(Tensor::randn(&cfg.fq_spec().weight_shape(), rng)),
            Tensor::randn(&[cfg.half()], rng),
            scale(Tensor::randn(&cfg.fq_spec().weight_shape(), rng)),
            Tensor::randn(&[cfg.half()], rng),
            scale(Tensor::randn(&cfg.fq_spec().weight_shape(), rng)),
            Tensor::randn(&[cfg.half()], rng),
            scale(Tensor::randn(&cfg.p1_proj_spec().weight_shape(), rng)),
            Tensor::randn(&[cfg.out_channels], rng),
            Tensor::randn(&cfg.gate_shape(), rng),
            scale(Tensor::randn(&cfg.ca_a_spec().weight_shape(), rng)),
            Tensor::randn(&[cfg.out_channels / 4], rng),
            scale(Tensor::randn(&cfg.ca_b_spec().weight_shape(), rng)),
            Tensor::randn(&[cfg.out_channels], rng),
            scale(Tensor::randn(&cfg.sobel_spec().weight_shape(), rng)),
            scale(Tensor::randn(&cfg.rf_proj_spec().weight_shape(), rng)),
            Tensor::randn(&[cfg.out_channels], rng),
            scale(Tensor::randn(&[cfg.half()], rng)),
            scale(Tensor::randn(&[cfg.half()], rng)),
        ]
    }

    fn params_from_ids(ids: &[VarId]) -> MdfcParams {
        MdfcParams {
            sp2_w: ids[0],
            sp2_b: ids[1],
            sp1_w: ids[2],
            sp1_b: ids[3],
            fq_pre_w: ids[4],
            fq_pre_b: ids[5],
            fq_a_w: ids[6],
            fq_a_b: ids[7],
            fq_b_w: ids[8],
            fq_b_b: ids[9],
            fq_nm_g: ids[20],
            fq_nm_b: ids[21],
            p1_w: ids[10],
            p1_b: ids[11],
            gate: ids[12],
            ca_a_w: ids[13],
            ca_a_b: ids[14],
            ca_b_w: ids[15],
            ca_b_b: ids[16],
            sob_w: ids[17],
            rf_w: ids[18],
            rf_b: ids[19],
            align: None,
        }
    }

    fn leaf_params(tape: &mut Tape, tensors: &[Tensor]) -> MdfcParams {
        let ids: Vec<VarId> = tensors.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
        params_from_ids(&ids)
    }

    #[test]
    fn phase1_halves_the_extent() {
        let cfg = MdfcConfig::new(8, 8, (4, 6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let tensors = param_tensors(&cfg, &mut rng);
        let mut tape = Tape::new();
        let p = leaf_params(&mut tape, &tensors);
        let x = tape.leaf(Tensor::randn(&[2, 8, 8, 12], &mut rng)).unwrap();
        let y = mdfc_phase1(&mut tape, &cfg, &p, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 8, 4, 6]);
    }

    #[test]
    fn constant_unit_frequency_branch_duplicates_the_spatial_slice() {
        let cfg = MdfcConfig::new(4, 4, (3, 3)).unwrap();
        let half = cfg.half();
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let mut tape = Tape::new();
        let zeros = |tape: &mut Tape, shape: &[usize]| tape.leaf(Tensor::zeros(shape)).unwrap();
        // Average-pool shaped stride-2 kernel, identity stride-1 kernel.
        let mut avg = Tensor::zeros(&cfg.sp2_spec().weight_shape());
        for c in 0..half {
            for (u, v) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
                avg.data_mut()[((c * half + c) * 3 + u) * 3 + v] = 0.25;
            }
        }
        let mut eye1 = Tensor::zeros(&cfg.sp1_spec().weight_shape());
        for c in 0..half {
            eye1.data_mut()[((c * half + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        // Frequency operands: both constant 1, so the spectral product comes
        // back constant and the norm collapses it to its bias, set to 1.
        let ones_b = Tensor::ones(&[half]);
        let inv_b = Tensor::ones(&[half]);
        // Projection keeps the concatenation as-is.
        let mut proj = Tensor::zeros(&cfg.p1_proj_spec().weight_shape());
        for c in 0..cfg.channels {
            proj.data_mut()[c * cfg.channels + c] = 1.0;
        }
        let ids = vec![
            tape.leaf(avg).unwrap(),
            zeros(&mut tape, &[half]),
            tape.leaf(eye1).unwrap(),
            zeros(&mut tape, &[half]),
            zeros(&mut tape, &cfg.fq_spec().weight_shape()),
            zeros(&mut tape, &[half]),
            zeros(&mut tape, &cfg.fq_spec().weight_shape()),
            tape.leaf(ones_b).unwrap(),
            zeros(&mut tape, &cfg.fq_spec().weight_shape()),
            tape.leaf(inv_b).unwrap(),
            tape.leaf(proj).unwrap(),
            zeros(&mut tape, &[cfg.out_channels]),
            tape.leaf(cfg.unit_gate()).unwrap(),
            zeros(&mut tape, &cfg.ca_a_spec().weight_shape()),
            zeros(&mut tape, &[cfg.out_channels / 4]),
            zeros(&mut tape, &cfg.ca_b_spec().weight_shape()),
            zeros(&mut tape, &[cfg.out_channels]),
            zeros(&mut tape, &cfg.sobel_spec().weight_shape()),
            zeros(&mut tape, &cfg.rf_proj_spec().weight_shape()),
            zeros(&mut tape, &[cfg.out_channels]),
            tape.leaf(Tensor::ones(&[half])).unwrap(),
            tape.leaf(Tensor::ones(&[half])).unwrap(),
        ];
        let p = params_from_ids(&ids);
        let x = Tensor::randn(&[1, 4, 6, 6], &mut rng);
        let xid = tape.leaf(x.clone()).unwrap();
        let y = mdfc_phase1(&mut tape, &cfg, &p, xid).unwrap();

        let mut pooled = Tensor::zeros(&[1, half, 3, 3]);
        for c in 0..half {
            for i in 0..3 {
                for j in 0..3 {
                    let mut acc = 0.0;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        acc += x.at4(0, c, 2 * i + di, 2 * j + dj);
                    }
                    pooled.set4(0, c, i, j, acc / 4.0);
                }
            }
        }
        for c in 0..half {
            for i in 0..3 {
                for j in 0..3 {
                    let want = pooled.at4(0, c, i, j);
                    let top = tape.value(y).at4(0, c, i, j);
                    let bottom = tape.value(y).at4(0, c + half, i, j);
                    assert!((top - want).abs() <= 1e-9, "modulated slice drifted: {top} vs {want}");
                    assert!((bottom - want).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn zero_frequency_weights_leave_projected_spatial_only() {
        let cfg = MdfcConfig::new(8, 8, (3, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let mut tensors = param_tensors(&cfg, &mut rng);
        for idx in [4, 5, 6, 7, 8, 9, 20, 21] {
            tensors[idx] = Tensor::zeros(tensors[idx].shape());
        }
        let x = Tensor::randn(&[1, 8, 6, 6], &mut rng);
        let mut tape = Tape::new();
        let p = leaf_params(&mut tape, &tensors);
        let xid = tape.leaf(x.clone()).unwrap();
        let y = mdfc_phase1(&mut tape, &cfg, &p, xid).unwrap();

        let mut tape2 = Tape::new();
        let p2 = leaf_params(&mut tape2, &tensors);
        let xid2 = tape2.leaf(x).unwrap();
        let half = cfg.half();
        let sp_in = tape2.slice_channels(xid2, 0, half).unwrap();
        let sp = tape2.conv2d(sp_in, &cfg.sp2_spec(), p2.sp2_w, Some(p2.sp2_b)).unwrap();
        let sp = tape2.conv2d(sp, &cfg.sp1_spec(), p2.sp1_w, Some(p2.sp1_b)).unwrap();
        let zero = tape2.mul_scalar(sp, 0.0).unwrap();
        let cat = tape2.concat(&[zero, sp], 1).unwrap();
        let want = tape2.conv2d(cat, &cfg.p1_proj_spec(), p2.p1_w, Some(p2.p1_b)).unwrap();
        assert!(tape.value(y).max_abs_diff(tape2.value(want)) <= 1e-12);
    }

    #[test]
    fn phase1_output_is_real_despite_complex_intermediates() {
        let cfg = MdfcConfig::new(6, 8, (5, 5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let tensors = param_tensors(&cfg, &mut rng);
        let x = Tensor::randn(&[1, 6, 10, 10], &mut rng);
        let mut tape = Tape::new();
        let p = leaf_params(&mut tape, &tensors);
        let xid = tape.leaf(x.clone()).unwrap();
        let _ = mdfc_phase1(&mut tape, &cfg, &p, xid).unwrap();

        // Rebuild the frequency branch with a full complex inverse transform
        // and measure the imaginary residue directly.
        let half = cfg.half();
        let take_half = |src: &Tensor, start: usize| {
            let (n, _, h, w) = src.dims4().unwrap();
            let mut d = Vec::new();
            for b in 0..n {
                for c in start..start + half {
                    for i in 0..h {
                        for j in 0..w {
                            d.push(src.at4(b, c, i, j));
                        }
                    }
                }
            }
            Tensor::new(&[n, half, h, w], d).unwrap()
        };
        let fp_in = take_half(&x, half);
        let mut pooled = Tensor::zeros(&[1, half, 5, 5]);
        for c in 0..half {
            for i in 0..5 {
                for j in 0..5 {
                    let mut m = f64::NEG_INFINITY;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        m = m.max(fp_in.at4(0, c, 2 * i + di, 2 * j + dj));
                    }
                    pooled.set4(0, c, i, j, m);
                }
            }
        }
        let pre = crate::conv::conv2d(&pooled, &cfg.fq_spec(), &tensors[4], Some(&tensors[5])).unwrap();
        let op_a = crate::conv::conv2d(&pre, &cfg.fq_spec(), &tensors[6], Some(&tensors[7])).unwrap();
        let op_b = crate::conv::conv2d(&pre, &cfg.fq_spec(), &tensors[8], Some(&tensors[9])).unwrap();
        let sa = fft2d(&op_a).unwrap();
        let sb = fft2d(&op_b).unwrap();
        let mut prod = Spectrum::zeros(sa.shape());
        for i in 0..sa.re.numel() {
            let (ar, ai) = (sa.re.data()[i], sa.im.data()[i]);
            let (br, bi) = (sb.re.data()[i], sb.im.data()[i]);
            prod.re.data_mut()[i] = ar * br - ai * bi;
            prod.im.data_mut()[i] = ar * bi + ai * br;
        }
        let back = ifft2d(&prod).unwrap();
        assert!(back.im.max_abs() <= 1e-10, "imaginary residue {}", back.im.max_abs());
    }

    #[test]
    fn phase2_identity_style_parameters_triple_the_input() {
        let cfg = MdfcConfig::new(8, 8, (4, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        let mut tape = Tape::new();
        let zeros = |tape: &mut Tape, shape: &[usize]| tape.leaf(Tensor::zeros(shape)).unwrap();
        let mut proj_eye = Tensor::zeros(&cfg.rf_proj_spec().weight_shape());
        for c in 0..8 {
            proj_eye.data_mut()[c * 8 + c] = 1.0;
        }
        let big_bias = Tensor::full(&[8], 30.0);
        let ids = vec![
            zeros(&mut tape, &cfg.sp2_spec().weight_shape()),
            zeros(&mut tape, &[4]),
            zeros(&mut tape, &cfg.sp1_spec().weight_shape()),
            zeros(&mut tape, &[4]),
            zeros(&mut tape, &cfg.fq_spec().weight_shape()),
            zeros(&mut tape, &[4]),
            zeros(&mut tape, &cfg.fq_spec().weight_shape()),
            zeros(&mut tape, &[4]),
            zeros(&mut tape, &cfg.fq_spec().weight_shape()),
            zeros(&mut tape, &[4]),
            zeros(&mut tape, &cfg.p1_proj_spec().weight_shape()),
            zeros(&mut tape, &[8]),
            tape.leaf(cfg.unit_gate()).unwrap(),
            zeros(&mut tape, &cfg.ca_a_spec().weight_shape()),
            zeros(&mut tape, &[2]),
            zeros(&mut tape, &cfg.ca_b_spec().weight_shape()),
            tape.leaf(big_bias).unwrap(),
            zeros(&mut tape, &cfg.sobel_spec().weight_shape()),
            tape.leaf(proj_eye).unwrap(),
            zeros(&mut tape, &[8]),
            zeros(&mut tape, &[4]),
            zeros(&mut tape, &[4]),
        ];
        let p = params_from_ids(&ids);
        let fused = Tensor::randn(&[1, 8, 4, 4], &mut rng);
        let neighbor = Tensor::randn(&[1, 8, 4, 4], &mut rng);
        let fid = tape.leaf(fused.clone()).unwrap();
        let nid = tape.leaf(neighbor.clone()).unwrap();
        let y = mdfc_phase2(&mut tape, &cfg, &p, fid, nid).unwrap();
        let mut want = fused;
        for (o, v) in want.data_mut().iter_mut().zip(neighbor.data()) {
            *o = 3.0 * (*o + v);
        }
        // sigmoid(30) is within 1e-13 of 1, so the channel cue is z itself.
        assert!(tape.value(y).max_abs_diff(&want) <= 1e-9);
    }

    #[test]
    fn constant_field_loses_its_edge_cue_and_keeps_its_spectrum() {
        let cfg = MdfcConfig::new(8, 8, (4, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(105);
        let tensors = param_tensors(&cfg, &mut rng);
        let mut tape = Tape::new();
        let mut p = leaf_params(&mut tape, &tensors);
        p.gate = tape.leaf(cfg.unit_gate()).unwrap();
        let z = Tensor::full(&[1, 8, 4, 4], 1.37);
        let zid = tape.leaf(z.clone()).unwrap();

        let mag = tape.sobel_mag(zid).unwrap();
        let edges = tape.add_scalar(mag, -SOBEL_EPS.sqrt()).unwrap();
        let cue = tape.conv2d(edges, &cfg.sobel_spec(), p.sob_w, None).unwrap();
        assert_eq!(tape.value(cue).max_abs(), 0.0);

        let spectrum = tape.fft2d(zid).unwrap();
        let sym = tape.spectral_reflect(p.gate).unwrap();
        let gated = complex_mul(&mut tape, sym, spectrum, 8).unwrap();
        let back = tape.ifft2d(gated).unwrap();
        assert!(tape.value(back).max_abs_diff(&z) <= 1e-12);
    }

    #[test]
    fn zeroed_refinement_passes_the_sum_through() {
        let cfg = MdfcConfig::new(8, 8, (4, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(106);
        let mut tensors = param_tensors(&cfg, &mut rng);
        for idx in [12, 13, 14, 15, 16, 17, 18, 19] {
            tensors[idx] = Tensor::zeros(tensors[idx].shape());
        }
        let mut tape = Tape::new();
        let p = leaf_params(&mut tape, &tensors);
        let fused = Tensor::randn(&[1, 8, 4, 4], &mut rng);
        let neighbor = Tensor::randn(&[1, 8, 4, 4], &mut rng);
        let fid = tape.leaf(fused.clone()).unwrap();
        let nid = tape.leaf(neighbor.clone()).unwrap();
        let y = mdfc_phase2(&mut tape, &cfg, &p, fid, nid).unwrap();
        let mut want = fused;
        for (o, v) in want.data_mut().iter_mut().zip(neighbor.data()) {
            *o += v;
        }
        assert!(tape.value(y).max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn channel_attention_stays_strictly_inside_the_unit_interval() {
        let cfg = MdfcConfig::new(8, 8, (4, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let tensors = param_tensors(&cfg, &mut rng);
        let mut tape = Tape::new();
        let p = leaf_params(&mut tape, &tensors);
        let z = tape.leaf(Tensor::randn(&[2, 8, 4, 4], &mut rng).map(|v| v * 5.0)).unwrap();
        let s = channel_attention(&mut tape, &cfg, &p, z).unwrap();
        for v in tape.value(s).data() {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn forward_composes_the_two_phases() {
        let cfg = MdfcConfig::new(8, 8, (4, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(108);
        let tensors = param_tensors(&cfg, &mut rng);
        let low = Tensor::randn(&[1, 8, 8, 8], &mut rng);
        let adjacent = Tensor::randn(&[1, 8, 4, 4], &mut rng);

        let mut tape = Tape::new();
        let p = leaf_params(&mut tape, &tensors);
        let lid = tape.leaf(low.clone()).unwrap();
        let aid = tape.leaf(adjacent.clone()).unwrap();
        let y = mdfc_forward(&mut tape, &cfg, &p, lid, aid).unwrap();

        let mut tape2 = Tape::new();
        let p2 = leaf_params(&mut tape2, &tensors);
        let lid2 = tape2.leaf(low).unwrap();
        let aid2 = tape2.leaf(adjacent).unwrap();
        let fused = mdfc_phase1(&mut tape2, &cfg, &p2, lid2).unwrap();
        let want = mdfc_phase2(&mut tape2, &cfg, &p2, fused, aid2).unwrap();
        assert_eq!(tape.value(y), tape2.value(want));
    }

    #[test]
    fn zero_adjacent_feature_reduces_to_self_refinement() {
        let cfg = MdfcConfig::new(8, 8, (4, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(109);
        let tensors = param_tensors(&cfg, &mut rng);
        let low = Tensor::randn(&[1, 8, 8, 8], &mut rng);
        let mut tape = Tape::new();
        let p = leaf_params(&mut tape, &tensors);
        let lid = tape.leaf(low).unwrap();
        let zid = tape.leaf(Tensor::zeros(&[1, 8, 4, 4])).unwrap();
        let via_forward = mdfc_forward(&mut tape, &cfg, &p, lid, zid).unwrap();
        let fused = mdfc_phase1(&mut tape, &cfg, &p, lid).unwrap();
        let via_phases = mdfc_phase2(&mut tape, &cfg, &p, fused, zid).unwrap();
        assert_eq!(tape.value(via_forward), tape.value(via_phases));
    }

    #[test]
    fn upsample_alignment_matches_manual_resize() {
        let cfg = MdfcConfig::new(8, 8, (4, 4)).unwrap().with_align(AlignMode::Up);
        let mut rng = ChaCha8Rng::seed_from_u64(110);
        let tensors = param_tensors(&cfg, &mut rng);
        let low = Tensor::randn(&[1, 8, 8, 8], &mut rng);
        let adjacent = Tensor::randn(&[1, 8, 2, 2], &mut rng);
        let mut tape = Tape::new();
        let p = leaf_params(&mut tape, &tensors);
        let lid = tape.leaf(low).unwrap();
        let aid = tape.leaf(adjacent).unwrap();
        let y = mdfc_forward(&mut tape, &cfg, &p, lid, aid).unwrap();
        let fused = mdfc_phase1(&mut tape, &cfg, &p, lid).unwrap();
        let up = tape.upsample_nearest2(aid).unwrap();
        let want = mdfc_phase2(&mut tape, &cfg, &p, fused, up).unwrap();
        assert_eq!(tape.value(y), tape.value(want));
    }

    #[test]
    fn phase1_passes_finite_differences() {
        let cfg = MdfcConfig::new(8, 8, (4, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(111);
        let mut inputs = vec![Tensor::randn(&[1, 8, 8, 8], &mut rng)];
        inputs.extend(param_tensors(&cfg, &mut rng));
        let opts = FdOptions { max_probes_per_input: 40, ..FdOptions::default() };
        let report = finite_diff_check(&inputs, opts, |tape, ids| {
            let p = params_from_ids(&ids[1..]);
            let y = mdfc_phase1(tape, &cfg, &p, ids[0])?;
            let sq = tape.mul(y, y)?;
            tape.sum_all(sq)
        })
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn full_block_passes_finite_differences() {
        let cfg = MdfcConfig::new(8, 8, (4, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(112);
        let mut inputs = vec![
            Tensor::randn(&[1, 8, 8, 8], &mut rng).map(|v| v * 0.5),
            Tensor::randn(&[1, 8, 4, 4], &mut rng).map(|v| v * 0.5),
        ];
        inputs.extend(param_tensors(&cfg, &mut rng).into_iter().map(|t| t.map(|v| v * 0.5)));
        let opts = FdOptions { max_probes_per_input: 24, ..FdOptions::default() };
        let report = finite_diff_check(&inputs, opts, |tape, ids| {
            let p = params_from_ids(&ids[2..]);
            let y = mdfc_forward(tape, &cfg, &p, ids[0], ids[1])?;
            let sq = tape.mul(y, y)?;
            tape.sum_all(sq)
        })
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn rejects_odd_shapes_and_mismatched_neighbors() {
        assert!(MdfcConfig::new(7, 8, (4, 4)).is_err());
        assert!(MdfcConfig::new(8, 6, (4, 4)).is_err());
        let cfg = MdfcConfig::new(8, 8, (4, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(113);
        let tensors = param_tensors(&cfg, &mut rng);
        let mut tape = Tape::new();
        let p = leaf_params(&mut tape, &tensors);
        let odd = tape.leaf(Tensor::randn(&[1, 8, 7, 8], &mut rng)).unwrap();
        assert!(mdfc_phase1(&mut tape, &cfg, &p, odd).is_err());
        let fused = tape.leaf(Tensor::randn(&[1, 8, 4, 4], &mut rng)).unwrap();
        let wrong = tape.leaf(Tensor::randn(&[1, 8, 2, 2], &mut rng)).unwrap();
        assert!(mdfc_phase2(&mut tape, &cfg, &p, fused, wrong).is_err());
    }
}
