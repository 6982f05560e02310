//! Fixed 3x3 Sobel operators applied per channel, plus the smoothed gradient
//! magnitude used as a structural prior.
//!
//! Inputs are edge-replicated by one pixel before the valid convolution, so a
//! constant field produces exactly zero gradients everywhere, border included.

use crate::conv::{conv2d, conv2d_grad_input, ConvSpec};
use crate::error::Result;
use crate::tensor::Tensor;

/// Smoothing floor inside the magnitude square root.
pub const SOBEL_EPS: f64 = 1e-12;

const KX: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const KY: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

fn kernel_tensor(taps: &[f64; 9], channels: usize) -> Tensor {
    let mut data = Vec::with_capacity(channels * 9);
    for _ in 0..channels {
        data.extend_from_slice(taps);
    }
    Tensor::new(&[channels, 1, 3, 3], data).expect("kernel shape")
}

fn spec(channels: usize) -> ConvSpec {
    ConvSpec::depthwise(channels, 3, 1, 0).no_bias()
}

fn replicate_pad1(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let mut out = Tensor::zeros(&[n, c, h + 2, w + 2]);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h + 2 {
                let si = i.saturating_sub(1).min(h - 1);
                for j in 0..w + 2 {
                    let sj = j.saturating_sub(1).min(w - 1);
                    out.set4(b, ch, i, j, x.at4(b, ch, si, sj));
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`replicate_pad1`]: fold padded-cell gradients back onto their
/// source pixels.
fn fold_pad1(grad_padded: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c, hp, wp) = grad_padded.dims4()?;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..hp {
                let si = i.saturating_sub(1).min(h - 1);
                for j in 0..wp {
                    let sj = j.saturating_sub(1).min(w - 1);
                    let v = out.at4(b, ch, si, sj) + grad_padded.at4(b, ch, i, j);
                    out.set4(b, ch, si, sj, v);
                }
            }
        }
    }
    Ok(out)
}

/// Horizontal and vertical gradient maps, same shape as the input.
pub fn sobel_gradients(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, c, _, _) = x.dims4()?;
    let xp = replicate_pad1(x)?;
    let gx = conv2d(&xp, &spec(c), &kernel_tensor(&KX, c), None)?;
    let gy = conv2d(&xp, &spec(c), &kernel_tensor(&KY, c), None)?;
    Ok((gx, gy))
}

/// `sqrt(gx^2 + gy^2 + SOBEL_EPS)`, everywhere differentiable.
pub fn sobel_magnitude(x: &Tensor) -> Result<Tensor> {
    let (gx, gy) = sobel_gradients(x)?;
    let mut out = gx.clone();
    for (o, (a, b)) in out.data_mut().iter_mut().zip(gx.data().iter().zip(gy.data())) {
        *o = (a * a + b * b + SOBEL_EPS).sqrt();
    }
    Ok(out)
}

/// Adjoint of [`sobel_magnitude`] with respect to the input.
pub fn sobel_magnitude_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let (gx, gy) = sobel_gradients(x)?;
    let mut dgx = gx.clone();
    let mut dgy = gy.clone();
    for i in 0..grad_out.numel() {
        let m = (gx.data()[i] * gx.data()[i] + gy.data()[i] * gy.data()[i] + SOBEL_EPS).sqrt();
        let g = grad_out.data()[i];
        dgx.data_mut()[i] = g * gx.data()[i] / m;
        dgy.data_mut()[i] = g * gy.data()[i] / m;
    }
    let sp = spec(c);
    let padded_shape = [x.shape()[0], c, h + 2, w + 2];
    let mut gp = conv2d_grad_input(&padded_shape, &sp, &kernel_tensor(&KX, c), &dgx);
    let gpy = conv2d_grad_input(&padded_shape, &sp, &kernel_tensor(&KY, c), &dgy);
    for (a, b) in gp.data_mut().iter_mut().zip(gpy.data()) {
        *a += b;
    }
    fold_pad1(&gp, h, w)
}
