//! 2D discrete Fourier transforms over `[N, C, H, W]` tensors.
//!
//! Forward is unnormalized, inverse carries the full `1/(H*W)` factor.
//! Power-of-two lengths run iterative radix-2 Cooley-Tukey; everything else
//! goes through Bluestein's chirp-z resampling, so arbitrary extents work
//! without zero padding the data itself.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use num_complex::Complex64;
use std::f64::consts::PI;

/// Complex field split into two real tensors of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub re: Tensor,
    pub im: Tensor,
}

impl Spectrum {
    pub fn zeros(shape: &[usize]) -> Self {
        Spectrum {
            re: Tensor::zeros(shape),
            im: Tensor::zeros(shape),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    /// Interleave into a single `[N, 2C, H, W]` tensor, real block first.
    pub fn pack(&self) -> Result<Tensor> {
        let (n, c, h, w) = self.re.dims4()?;
        let plane = c * h * w;
        let mut out = Tensor::zeros(&[n, 2 * c, h, w]);
        let od = out.data_mut();
        for ni in 0..n {
            od[ni * 2 * plane..ni * 2 * plane + plane]
                .copy_from_slice(&self.re.data()[ni * plane..(ni + 1) * plane]);
            od[ni * 2 * plane + plane..(ni + 1) * 2 * plane]
                .copy_from_slice(&self.im.data()[ni * plane..(ni + 1) * plane]);
        }
        Ok(out)
    }

    /// Inverse of [`Spectrum::pack`].
    pub fn unpack(t: &Tensor) -> Result<Spectrum> {
        let (n, c2, h, w) = t.dims4()?;
        if c2 % 2 != 0 {
            return Err(Error::shape(
                "spectrum",
                format!("packed channel count {c2} is odd"),
            ));
        }
        let c = c2 / 2;
        let plane = c * h * w;
        let mut s = Spectrum::zeros(&[n, c, h, w]);
        for ni in 0..n {
            s.re.data_mut()[ni * plane..(ni + 1) * plane]
                .copy_from_slice(&t.data()[ni * 2 * plane..ni * 2 * plane + plane]);
            s.im.data_mut()[ni * plane..(ni + 1) * plane]
                .copy_from_slice(&t.data()[ni * 2 * plane + plane..(ni + 1) * 2 * plane]);
        }
        Ok(s)
    }
}

fn bit_reverse_permute(buf: &mut [Complex64]) {
    let n = buf.len();
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
}

fn fft_radix2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    bit_reverse_permute(buf);
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * PI / len as f64;
        let wlen = Complex64::new(ang.cos(), ang.sin());
        for start in (0..n).step_by(len) {
            let mut w = Complex64::new(1.0, 0.0);
            for k in 0..len / 2 {
                let u = buf[start + k];
                let v = buf[start + k + len / 2] * w;
                buf[start + k] = u + v;
                buf[start + k + len / 2] = u - v;
                w *= wlen;
            }
        }
        len <<= 1;
    }
}

/// Chirp factor exp(sign * i * pi * k^2 / n), with k^2 reduced mod 2n to keep
/// the angle small.
fn chirp(k: usize, n: usize, sign: f64) -> Complex64 {
    let e = (k * k) % (2 * n);
    let ang = sign * PI * e as f64 / n as f64;
    Complex64::new(ang.cos(), ang.sin())
}

fn fft_bluestein(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let m = (2 * n - 1).next_power_of_two();
    let mut a = vec![Complex64::new(0.0, 0.0); m];
    let mut b = vec![Complex64::new(0.0, 0.0); m];
    for k in 0..n {
        let w = chirp(k, n, sign);
        a[k] = buf[k] * w;
        let wc = w.conj();
        b[k] = wc;
        if k > 0 {
            b[m - k] = wc;
        }
    }
    fft_radix2(&mut a, false);
    fft_radix2(&mut b, false);
    for (av, bv) in a.iter_mut().zip(&b) {
        *av *= bv;
    }
    fft_radix2(&mut a, true);
    let scale = 1.0 / m as f64;
    for k in 0..n {
        buf[k] = a[k] * scale * chirp(k, n, sign);
    }
}

/// Unnormalized forward transform of one line, any length.
pub fn fft_1d(buf: &mut [Complex64]) {
    match buf.len() {
        0 | 1 => {}
        n if n.is_power_of_two() => fft_radix2(buf, false),
        _ => fft_bluestein(buf, false),
    }
}

/// Inverse transform of one line, normalized by `1/len`.
pub fn ifft_1d(buf: &mut [Complex64]) {
    let n = buf.len();
    match n {
        0 | 1 => {}
        _ if n.is_power_of_two() => fft_radix2(buf, true),
        _ => fft_bluestein(buf, true),
    }
    let scale = 1.0 / n as f64;
    for v in buf.iter_mut() {
        *v *= scale;
    }
}

fn transform_plane(plane: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    for row in plane.chunks_exact_mut(w) {
        if inverse {
            ifft_1d(row);
        } else {
            fft_1d(row);
        }
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = plane[y * w + x];
        }
        if inverse {
            ifft_1d(&mut col);
        } else {
            fft_1d(&mut col);
        }
        for y in 0..h {
            plane[y * w + x] = col[y];
        }
    }
}

fn transform(s: &Spectrum, inverse: bool) -> Result<Spectrum> {
    let (n, c, h, w) = s.re.dims4()?;
    if s.im.shape() != s.re.shape() {
        return Err(Error::shape("fft2d", "re/im shape mismatch".to_string()));
    }
    let mut out = Spectrum::zeros(&[n, c, h, w]);
    let mut plane = vec![Complex64::new(0.0, 0.0); h * w];
    for p in 0..n * c {
        let off = p * h * w;
        for (i, v) in plane.iter_mut().enumerate() {
            *v = Complex64::new(s.re.data()[off + i], s.im.data()[off + i]);
        }
        transform_plane(&mut plane, h, w, inverse);
        for (i, v) in plane.iter().enumerate() {
            out.re.data_mut()[off + i] = v.re;
            out.im.data_mut()[off + i] = v.im;
        }
    }
    Ok(out)
}

/// Unnormalized 2D forward transform of a real field.
pub fn fft2d(x: &Tensor) -> Result<Spectrum> {
    fft2d_c(&Spectrum {
        re: x.clone(),
        im: Tensor::zeros(x.shape()),
    })
}

/// Unnormalized 2D forward transform of a complex field.
pub fn fft2d_c(s: &Spectrum) -> Result<Spectrum> {
    transform(s, false)
}

/// Normalized 2D inverse transform, complex output.
pub fn ifft2d(s: &Spectrum) -> Result<Spectrum> {
    transform(s, true)
}

/// Conjugate reflection `S'(u, v) = conj(S(-u mod H, -v mod W))`.
///
/// Averaging a spectrum with its reflection projects onto the conjugate
/// symmetric subspace, i.e. the spectra of real fields. The map is its own
/// adjoint under the packed real representation.
pub fn conj_reflect(s: &Spectrum) -> Result<Spectrum> {
    let (n, c, h, w) = s.re.dims4()?;
    let mut out = Spectrum::zeros(&[n, c, h, w]);
    for p in 0..n * c {
        let off = p * h * w;
        for u in 0..h {
            let ur = (h - u) % h;
            for v in 0..w {
                let vr = (w - v) % w;
                out.re.data_mut()[off + u * w + v] = s.re.data()[off + ur * w + vr];
                out.im.data_mut()[off + u * w + v] = -s.im.data()[off + ur * w + vr];
            }
        }
    }
    Ok(out)
}
