//! Composite building blocks assembled from tape primitives.

pub mod akat;
pub mod cpf;
pub mod hsg;
pub mod mdfc;
pub mod wave;
