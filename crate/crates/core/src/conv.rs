//! 2D cross-correlation kernels (forward plus the two adjoints).
//!
//! Direct loops, no im2col. The inner loops run over contiguous output rows
//! with hoisted bounds so they vectorize; everything is sequential and
//! bitwise deterministic.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shape contract for a convolution: square-stride cross-correlation with
/// zero padding and contiguous channel groups.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, k: usize, stride: usize, pad: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kh: k,
            kw: k,
            stride,
            pad,
            groups: 1,
            has_bias: true,
        }
    }

    pub fn grouped(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn depthwise(channels: usize, k: usize, stride: usize, pad: usize) -> Self {
        ConvSpec::new(channels, channels, k, stride, pad).grouped(channels)
    }

    pub fn no_bias(mut self) -> Self {
        self.has_bias = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride < 1 {
            return Err(Error::config("stride", "must be >= 1"));
        }
        if self.groups == 0 || self.in_channels % self.groups != 0 {
            return Err(Error::config(
                "groups",
                format!("{} does not divide in_channels {}", self.groups, self.in_channels),
            ));
        }
        if self.out_channels % self.groups != 0 {
            return Err(Error::config(
                "groups",
                format!("{} does not divide out_channels {}", self.groups, self.out_channels),
            ));
        }
        if self.kh == 0 || self.kw == 0 {
            return Err(Error::config("kernel", "zero kernel extent"));
        }
        Ok(())
    }

    /// Expected weight shape `[out, in/groups, kh, kw]`.
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels / self.groups, self.kh, self.kw]
    }

    pub fn out_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let he = h + 2 * self.pad;
        let we = w + 2 * self.pad;
        if he < self.kh || we < self.kw {
            return Err(Error::shape(
                "conv2d",
                format!("input {h}x{w} smaller than kernel {}x{} after padding {}", self.kh, self.kw, self.pad),
            ));
        }
        Ok(((he - self.kh) / self.stride + 1, (we - self.kw) / self.stride + 1))
    }
}

fn check_args(x: &Tensor, spec: &ConvSpec, w: &Tensor, b: Option<&Tensor>) -> Result<(usize, usize, usize, usize)> {
    spec.validate()?;
    let (n, c, h, wd) = x.dims4()?;
    if c != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, spec wants {}", spec.in_channels),
        ));
    }
    if w.shape() != spec.weight_shape() {
        return Err(Error::shape(
            "conv2d",
            format!("weight shape {:?} does not match spec {:?}", w.shape(), spec.weight_shape()),
        ));
    }
    match (spec.has_bias, b) {
        (true, Some(bt)) => {
            if bt.shape() != [spec.out_channels] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?}, expected [{}]", bt.shape(), spec.out_channels),
                ));
            }
        }
        (true, None) => return Err(Error::shape("conv2d", "spec declares bias but none given")),
        (false, Some(_)) => return Err(Error::shape("conv2d", "spec declares no bias but one given")),
        (false, None) => {}
    }
    Ok((n, c, h, wd))
}

/// For a kernel tap offset `k`, the output-coordinate range whose input
/// index `o*stride + k - pad` stays inside `[0, extent)`.
#[inline]
fn valid_out_range(extent: usize, out_extent: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    // o*stride + k - pad >= 0  and  o*stride + k - pad < extent
    let lo = if k >= pad { 0 } else { (pad - k + stride - 1) / stride };
    let hi_excl = {
        let limit = extent + pad;
        if limit <= k {
            0
        } else {
            (((limit - k - 1) / stride) + 1).min(out_extent)
        }
    };
    (lo.min(hi_excl), hi_excl)
}

pub fn conv2d(x: &Tensor, spec: &ConvSpec, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (n, _c, h, wd) = check_args(x, spec, w, b)?;
    let (oh, ow) = spec.out_extent(h, wd)?;
    let (cout, cpg_in) = (spec.out_channels, spec.in_channels / spec.groups);
    let copg = cout / spec.groups;
    let (s, p, kh, kw) = (spec.stride, spec.pad, spec.kh, spec.kw);

    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let xd = x.data();
    let wdz = w.data();
    let od = out.data_mut();

    for ni in 0..n {
        for g in 0..spec.groups {
            for col in 0..copg {
                let co = g * copg + col;
                let oplane = &mut od[((ni * cout + co) * oh * ow)..((ni * cout + co + 1) * oh * ow)];
                if let Some(bt) = b {
                    let bv = bt.data()[co];
                    oplane.fill(bv);
                }
                for cil in 0..cpg_in {
                    let ci = g * cpg_in + cil;
                    let xplane = &xd[((ni * spec.in_channels + ci) * h * wd)..((ni * spec.in_channels + ci + 1) * h * wd)];
                    let wbase = ((co * cpg_in + cil) * kh) * kw;
                    for ky in 0..kh {
                        let (oy_lo, oy_hi) = valid_out_range(h, oh, s, p, ky);
                        for kx in 0..kw {
                            let wv = wdz[wbase + ky * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (ox_lo, ox_hi) = valid_out_range(wd, ow, s, p, kx);
                            if ox_hi <= ox_lo {
                                continue;
                            }
                            for oy in oy_lo..oy_hi {
                                let iy = oy * s + ky - p;
                                let xrow = &xplane[iy * wd..(iy + 1) * wd];
                                let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                                if s == 1 {
                                    let ix0 = ox_lo + kx - p;
                                    for (o, xv) in orow[ox_lo..ox_hi]
                                        .iter_mut()
                                        .zip(&xrow[ix0..ix0 + (ox_hi - ox_lo)])
                                    {
                                        *o += wv * xv;
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        orow[ox] += wv * xrow[ox * s + kx - p];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint with respect to the input: scatter of `grad_out` through the kernel.
pub fn conv2d_grad_input(
    x_shape: &[usize],
    spec: &ConvSpec,
    w: &Tensor,
    grad_out: &Tensor,
) -> Tensor {
    let (n, _c, h, wd) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (_gn, cout, oh, ow) = grad_out.dims4().expect("grad_out rank");
    let cpg_in = spec.in_channels / spec.groups;
    let copg = cout / spec.groups;
    let (s, p, kh, kw) = (spec.stride, spec.pad, spec.kh, spec.kw);

    let mut gx = Tensor::zeros(x_shape);
    let gd = grad_out.data();
    let wdz = w.data();
    let gxd = gx.data_mut();

    for ni in 0..n {
        for g in 0..spec.groups {
            for col in 0..copg {
                let co = g * copg + col;
                let gplane = &gd[((ni * cout + co) * oh * ow)..((ni * cout + co + 1) * oh * ow)];
                for cil in 0..cpg_in {
                    let ci = g * cpg_in + cil;
                    let xplane =
                        &mut gxd[((ni * spec.in_channels + ci) * h * wd)..((ni * spec.in_channels + ci + 1) * h * wd)];
                    let wbase = ((co * cpg_in + cil) * kh) * kw;
                    for ky in 0..kh {
                        let (oy_lo, oy_hi) = valid_out_range(h, oh, s, p, ky);
                        for kx in 0..kw {
                            let wv = wdz[wbase + ky * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (ox_lo, ox_hi) = valid_out_range(wd, ow, s, p, kx);
                            if ox_hi <= ox_lo {
                                continue;
                            }
                            for oy in oy_lo..oy_hi {
                                let iy = oy * s + ky - p;
                                let grow = &gplane[oy * ow..(oy + 1) * ow];
                                let xrow = &mut xplane[iy * wd..(iy + 1) * wd];
                                if s == 1 {
                                    let ix0 = ox_lo + kx - p;
                                    for (xv, gv) in xrow[ix0..ix0 + (ox_hi - ox_lo)]
                                        .iter_mut()
                                        .zip(&grow[ox_lo..ox_hi])
                                    {
                                        *xv += wv * gv;
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        xrow[ox * s + kx - p] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Adjoint with respect to the weights.
pub fn conv2d_grad_weights(x: &Tensor, spec: &ConvSpec, grad_out: &Tensor) -> Tensor {
    let (n, _c, h, wd) = x.dims4().expect("x rank");
    let (_gn, cout, oh, ow) = grad_out.dims4().expect("grad_out rank");
    let cpg_in = spec.in_channels / spec.groups;
    let copg = cout / spec.groups;
    let (s, p, kh, kw) = (spec.stride, spec.pad, spec.kh, spec.kw);

    let mut gw = Tensor::zeros(&spec.weight_shape());
    let xd = x.data();
    let gd = grad_out.data();
    let gwd = gw.data_mut();

    for ni in 0..n {
        for g in 0..spec.groups {
            for col in 0..copg {
                let co = g * copg + col;
                let gplane = &gd[((ni * cout + co) * oh * ow)..((ni * cout + co + 1) * oh * ow)];
                for cil in 0..cpg_in {
                    let ci = g * cpg_in + cil;
                    let xplane = &xd[((ni * spec.in_channels + ci) * h * wd)..((ni * spec.in_channels + ci + 1) * h * wd)];
                    let wbase = ((co * cpg_in + cil) * kh) * kw;
                    for ky in 0..kh {
                        let (oy_lo, oy_hi) = valid_out_range(h, oh, s, p, ky);
                        for kx in 0..kw {
                            let (ox_lo, ox_hi) = valid_out_range(wd, ow, s, p, kx);
                            if ox_hi <= ox_lo {
                                continue;
                            }
                            let mut acc = 0.0;
                            for oy in oy_lo..oy_hi {
                                let iy = oy * s + ky - p;
                                let grow = &gplane[oy * ow..(oy + 1) * ow];
                                let xrow = &xplane[iy * wd..(iy + 1) * wd];
                                if s == 1 {
                                    let ix0 = ox_lo + kx - p;
                                    for (gv, xv) in grow[ox_lo..ox_hi].iter().zip(&xrow[ix0..ix0 + (ox_hi - ox_lo)]) {
                                        acc += gv * xv;
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        acc += grow[ox] * xrow[ox * s + kx - p];
                                    }
                                }
                            }
                            gwd[wbase + ky * kw + kx] += acc;
                        }
                    }
                }
            }
        }
    }
    gw
}

/// Adjoint with respect to the bias: sum over batch and spatial axes.
pub fn conv2d_grad_bias(grad_out: &Tensor) -> Tensor {
    let (n, cout, oh, ow) = grad_out.dims4().expect("grad_out rank");
    let mut gb = Tensor::zeros(&[cout]);
    let gd = grad_out.data();
    let gbd = gb.data_mut();
    for ni in 0..n {
        for co in 0..cout {
            let plane = &gd[((ni * cout + co) * oh * ow)..((ni * cout + co + 1) * oh * ow)];
            gbd[co] += plane.iter().sum::<f64>();
        }
    }
    gb
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Six-nested-loop reference, written against the definition only.
    fn conv2d_naive(x: &Tensor, spec: &ConvSpec, w: &Tensor, b: Option<&Tensor>) -> Tensor {
        let (n, _c, h, wd) = x.dims4().unwrap();
        let (oh, ow) = spec.out_extent(h, wd).unwrap();
        let cpg_in = spec.in_channels / spec.groups;
        let copg = spec.out_channels / spec.groups;
        let mut out = Tensor::zeros(&[n, spec.out_channels, oh, ow]);
        for ni in 0..n {
            for co in 0..spec.out_channels {
                let g = co / copg;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |bt| bt.data()[co]);
                        for cil in 0..cpg_in {
                            let ci = g * cpg_in + cil;
                            for ky in 0..spec.kh {
                                for kx in 0..spec.kw {
                                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        let wv = w.data()
                                            [((co * cpg_in + cil) * spec.kh + ky) * spec.kw + kx];
                                        acc += wv * x.at4(ni, ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.set4(ni, co, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn box_sum_on_ones() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let spec = ConvSpec::new(1, 1, 3, 1, 1).no_bias();
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &spec, &w, None).unwrap();
        assert_eq!(y.at4(0, 0, 1, 1), 9.0);
        assert_eq!(y.at4(0, 0, 0, 0), 4.0);
        assert_eq!(y.at4(0, 0, 0, 2), 4.0);
    }

    #[test]
    fn identity_1x1_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 3, 4, 5], &mut rng);
        let spec = ConvSpec::depthwise(3, 1, 1, 0).no_bias();
        let w = Tensor::ones(&[3, 1, 1, 1]);
        let y = conv2d(&x, &spec, &w, None).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 4, 5, 5], &mut rng);
        let spec = ConvSpec::new(4, 3, 3, 1, 1);
        let w = Tensor::randn(&spec.weight_shape(), &mut rng);
        let b = Tensor::randn(&[3], &mut rng);
        let y = conv2d(&x, &spec, &w, Some(&b)).unwrap();
        let yref = conv2d_naive(&x, &spec, &w, Some(&b));
        assert!(y.max_abs_diff(&yref) <= 1e-12);
    }

    #[test]
    fn matches_naive_strided_grouped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (groups, stride, pad, k) in [(2usize, 2usize, 1usize, 3usize), (4, 1, 2, 5), (1, 3, 0, 2)] {
            let x = Tensor::randn(&[1, 4, 9, 7], &mut rng);
            let spec = ConvSpec {
                in_channels: 4,
                out_channels: 8,
                kh: k,
                kw: k,
                stride,
                pad,
                groups,
                has_bias: false,
            };
            let w = Tensor::randn(&spec.weight_shape(), &mut rng);
            let y = conv2d(&x, &spec, &w, None).unwrap();
            let yref = conv2d_naive(&x, &spec, &w, None);
            assert!(
                y.max_abs_diff(&yref) <= 1e-12,
                "groups={groups} stride={stride} pad={pad} k={k}"
            );
        }
    }

    #[test]
    fn depthwise_equals_grouped_conv_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[2, 5, 6, 6], &mut rng);
        let spec = ConvSpec::depthwise(5, 3, 1, 1).no_bias();
        let w = Tensor::randn(&spec.weight_shape(), &mut rng);
        let y = conv2d(&x, &spec, &w, None).unwrap();
        let yref = conv2d_naive(&x, &spec, &w, None);
        assert_eq!(y, yref);
    }

    #[test]
    fn depthwise_averaging_preserves_constant_interior() {
        let x = Tensor::ones(&[1, 2, 5, 5]);
        let spec = ConvSpec::depthwise(2, 3, 1, 1).no_bias();
        let w = Tensor::full(&[2, 1, 3, 3], 1.0 / 9.0);
        let y = conv2d(&x, &spec, &w, None).unwrap();
        for c in 0..2 {
            for i in 1..4 {
                for j in 1..4 {
                    assert!((y.at4(0, c, i, j) - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_group_config() {
        let spec = ConvSpec::new(5, 4, 3, 1, 1).grouped(2);
        let x = Tensor::zeros(&[1, 5, 4, 4]);
        let w = Tensor::zeros(&[4, 2, 3, 3]);
        let err = conv2d(&x, &spec, &w, None).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn rejects_undersized_input() {
        let spec = ConvSpec::new(1, 1, 5, 1, 0).no_bias();
        let x = Tensor::zeros(&[1, 1, 3, 3]);
        let w = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(conv2d(&x, &spec, &w, None).is_err());
    }

    #[test]
    fn linearity_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ConvSpec::new(2, 3, 3, 1, 1).no_bias();
        let w = Tensor::randn(&spec.weight_shape(), &mut rng);
        let x = Tensor::randn(&[1, 2, 6, 6], &mut rng);
        let y = Tensor::randn(&[1, 2, 6, 6], &mut rng);
        let (a, b) = (1.7, -0.4);
        let mut combo = x.clone();
        for (c, (xv, yv)) in combo.data_mut().iter_mut().zip(x.data().iter().zip(y.data())) {
            *c = a * xv + b * yv;
        }
        let lhs = conv2d(&combo, &spec, &w, None).unwrap();
        let cx = conv2d(&x, &spec, &w, None).unwrap();
        let cy = conv2d(&y, &spec, &w, None).unwrap();
        let mut rhs = cx.clone();
        for (r, (xv, yv)) in rhs.data_mut().iter_mut().zip(cx.data().iter().zip(cy.data())) {
            *r = a * xv + b * yv;
        }
        assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    /// A 5x5 pad-2 kernel over a 1x1 map leaves some kernel columns with no
    /// valid output position at all. Forward and both adjoints must skip those
    /// columns instead of indexing past the row start.
    #[test]
    fn wide_kernel_on_single_pixel_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = ConvSpec::new(2, 3, 5, 1, 2).no_bias();
        let w = Tensor::randn(&spec.weight_shape(), &mut rng);
        let x = Tensor::randn(&[1, 2, 1, 1], &mut rng);
        let y = conv2d(&x, &spec, &w, None).unwrap();
        let yref = conv2d_naive(&x, &spec, &w, None);
        assert_eq!(y.shape(), &[1, 3, 1, 1]);
        assert!(y.max_abs_diff(&yref) <= 1e-12);

        let go = Tensor::randn(&[1, 3, 1, 1], &mut rng);
        let gx = conv2d_grad_input(&[1, 2, 1, 1], &spec, &w, &go);
        let gw = conv2d_grad_weights(&x, &spec, &go);

        // The map is linear, so a unit bump in any input or weight entry
        // shifts <go, conv(x)> by exactly the corresponding gradient entry.
        for i in 0..x.numel() {
            let mut bumped = x.clone();
            bumped.data_mut()[i] += 1.0;
            let yb = conv2d_naive(&bumped, &spec, &w, None);
            let delta: f64 = yb
                .data()
                .iter()
                .zip(y.data())
                .zip(go.data())
                .map(|((b, a), g)| (b - a) * g)
                .sum();
            assert!((gx.data()[i] - delta).abs() <= 1e-12, "input slot {i}");
        }
        for i in 0..w.numel() {
            let mut bumped = w.clone();
            bumped.data_mut()[i] += 1.0;
            let yb = conv2d_naive(&x, &spec, &bumped, None);
            let delta: f64 = yb
                .data()
                .iter()
                .zip(y.data())
                .zip(go.data())
                .map(|((b, a), g)| (b - a) * g)
                .sum();
            assert!((gw.data()[i] - delta).abs() <= 1e-12, "weight slot {i}");
        }
    }
}
