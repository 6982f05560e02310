//! Frequency-domain primitives: Haar wavelets, Fourier transforms, Sobel
//! gradients. All operate on `[N, C, H, W]` tensors and come with exact
//! adjoints so the tape can differentiate through them.

pub mod fft;
pub mod haar;
pub mod sobel;

pub use fft::{conj_reflect, fft2d, fft2d_c, ifft2d, Spectrum};
pub use haar::{decompose, hwt, hwt_packed, ihwt, ihwt_packed, reconstruct, WaveletBands, WaveletPyramid};
pub use sobel::{sobel_gradients, sobel_magnitude, sobel_magnitude_backward, SOBEL_EPS};
