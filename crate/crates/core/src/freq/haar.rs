//! Single-level and pyramidal 2D Haar transforms, orthonormal convention.
//!
//! Each non-overlapping 2x2 patch `[[a, b], [c, d]]` maps to
//!
//! ```text
//! ll = ( a + b + c + d) / 2      lh = (-a - b + c + d) / 2
//! hl = (-a + b - c + d) / 2      hh = ( a - b - c + d) / 2
//! ```
//!
//! The analysis matrix is orthogonal, so synthesis is its transpose and the
//! transform preserves the l2 norm exactly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One level of subband coefficients, each `[N, C, H/2, W/2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletBands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

/// Multi-level decomposition: `detail[0]` is the finest level, `coarse` is
/// the approximation left after the last split.
#[derive(Clone, Debug)]
pub struct WaveletPyramid {
    pub detail: Vec<WaveletBands>,
    pub coarse: Tensor,
}

fn check_even(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "hwt",
            format!("spatial extents {h}x{w} must be even"),
        ));
    }
    Ok((n, c, h, w))
}

/// Forward single-level transform.
pub fn hwt(x: &Tensor) -> Result<WaveletBands> {
    let (n, c, h, w) = check_even(x)?;
    let (oh, ow) = (h / 2, w / 2);
    let shape = [n, c, oh, ow];
    let mut ll = Tensor::zeros(&shape);
    let mut lh = Tensor::zeros(&shape);
    let mut hl = Tensor::zeros(&shape);
    let mut hh = Tensor::zeros(&shape);
    let xd = x.data();
    let planes = n * c;
    for p in 0..planes {
        let xp = &xd[p * h * w..(p + 1) * h * w];
        let base = p * oh * ow;
        for oy in 0..oh {
            let top = &xp[(2 * oy) * w..(2 * oy + 1) * w];
            let bot = &xp[(2 * oy + 1) * w..(2 * oy + 2) * w];
            for ox in 0..ow {
                let (a, b) = (top[2 * ox], top[2 * ox + 1]);
                let (c2, d) = (bot[2 * ox], bot[2 * ox + 1]);
                let idx = base + oy * ow + ox;
                ll.data_mut()[idx] = (a + b + c2 + d) / 2.0;
                lh.data_mut()[idx] = (-a - b + c2 + d) / 2.0;
                hl.data_mut()[idx] = (-a + b - c2 + d) / 2.0;
                hh.data_mut()[idx] = (a - b - c2 + d) / 2.0;
            }
        }
    }
    Ok(WaveletBands { ll, lh, hl, hh })
}

/// Inverse single-level transform (transpose of the analysis map).
pub fn ihwt(bands: &WaveletBands) -> Result<Tensor> {
    let (n, c, oh, ow) = bands.ll.dims4()?;
    for (name, t) in [("lh", &bands.lh), ("hl", &bands.hl), ("hh", &bands.hh)] {
        if t.shape() != bands.ll.shape() {
            return Err(Error::shape(
                "ihwt",
                format!("{name} shape {:?} != ll shape {:?}", t.shape(), bands.ll.shape()),
            ));
        }
    }
    let (h, w) = (oh * 2, ow * 2);
    let mut x = Tensor::zeros(&[n, c, h, w]);
    let xd = x.data_mut();
    let planes = n * c;
    for p in 0..planes {
        let base = p * oh * ow;
        let xp = &mut xd[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let idx = base + oy * ow + ox;
                let ll = bands.ll.data()[idx];
                let lh = bands.lh.data()[idx];
                let hl = bands.hl.data()[idx];
                let hh = bands.hh.data()[idx];
                xp[(2 * oy) * w + 2 * ox] = (ll - lh - hl + hh) / 2.0;
                xp[(2 * oy) * w + 2 * ox + 1] = (ll - lh + hl - hh) / 2.0;
                xp[(2 * oy + 1) * w + 2 * ox] = (ll + lh - hl - hh) / 2.0;
                xp[(2 * oy + 1) * w + 2 * ox + 1] = (ll + lh + hl + hh) / 2.0;
            }
        }
    }
    Ok(x)
}

/// Forward transform with the four subbands stacked along channels:
/// output `[N, 4C, H/2, W/2]` ordered `LL | LH | HL | HH`.
pub fn hwt_packed(x: &Tensor) -> Result<Tensor> {
    let bands = hwt(x)?;
    let (n, c, oh, ow) = bands.ll.dims4()?;
    let mut out = Tensor::zeros(&[n, 4 * c, oh, ow]);
    let plane = oh * ow;
    let od = out.data_mut();
    for ni in 0..n {
        for (bi, band) in [&bands.ll, &bands.lh, &bands.hl, &bands.hh].iter().enumerate() {
            let src = &band.data()[ni * c * plane..(ni + 1) * c * plane];
            let dst_off = (ni * 4 * c + bi * c) * plane;
            od[dst_off..dst_off + c * plane].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Inverse of [`hwt_packed`]: input `[N, 4C, H, W]`, output `[N, C, 2H, 2W]`.
pub fn ihwt_packed(packed: &Tensor) -> Result<Tensor> {
    let (n, c4, oh, ow) = packed.dims4()?;
    if c4 % 4 != 0 {
        return Err(Error::shape(
            "ihwt",
            format!("packed channel count {c4} not a multiple of 4"),
        ));
    }
    let c = c4 / 4;
    let plane = oh * ow;
    let shape = [n, c, oh, ow];
    let mut bands = WaveletBands {
        ll: Tensor::zeros(&shape),
        lh: Tensor::zeros(&shape),
        hl: Tensor::zeros(&shape),
        hh: Tensor::zeros(&shape),
    };
    let pd = packed.data();
    for ni in 0..n {
        for (bi, band) in [&mut bands.ll, &mut bands.lh, &mut bands.hl, &mut bands.hh]
            .iter_mut()
            .enumerate()
        {
            let src_off = (ni * 4 * c + bi * c) * plane;
            band.data_mut()[ni * c * plane..(ni + 1) * c * plane]
                .copy_from_slice(&pd[src_off..src_off + c * plane]);
        }
    }
    ihwt(&bands)
}

/// Recursive decomposition: split, keep the detail bands, recurse on LL.
pub fn decompose(x: &Tensor, levels: usize) -> Result<WaveletPyramid> {
    if levels == 0 {
        return Err(Error::contract("decompose", "levels must be >= 1"));
    }
    let (_, _, h, w) = x.dims4()?;
    let div = 1usize << levels;
    if h % div != 0 || w % div != 0 {
        return Err(Error::shape(
            "decompose",
            format!("extents {h}x{w} not divisible by 2^{levels}"),
        ));
    }
    let mut detail = Vec::with_capacity(levels);
    let mut current = x.clone();
    for _ in 0..levels {
        let bands = hwt(&current)?;
        current = bands.ll.clone();
        detail.push(bands);
    }
    Ok(WaveletPyramid { detail, coarse: current })
}

/// Exact inverse of [`decompose`].
pub fn reconstruct(pyr: &WaveletPyramid) -> Result<Tensor> {
    if pyr.detail.is_empty() {
        return Err(Error::contract("reconstruct", "pyramid has no levels"));
    }
    let mut current = pyr.coarse.clone();
    for bands in pyr.detail.iter().rev() {
        let level = WaveletBands {
            ll: current,
            lh: bands.lh.clone(),
            hl: bands.hl.clone(),
            hh: bands.hh.clone(),
        };
        current = ihwt(&level)?;
    }
    Ok(current)
}
