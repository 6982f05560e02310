//! Differentiable building blocks for frequency-decoupled small-object
//! detection: a reverse-mode f64 tensor engine, wavelet and Fourier
//! transforms with exact adjoints, and the composite blocks (gated wavelet
//! stages, spline-attention stages, partial reparameterizable convolutions,
//! dual-domain fusion) assembled into a configurable detector.

pub mod blocks;
pub mod conv;
pub mod error;
pub mod freq;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod param;
pub mod spline;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, VarId};
pub use tensor::Tensor;
