//! Neighborhood attention filtering.
//!
//! An image-guided feature upsampler: a small convolutional encoder turns the
//! high-resolution image into a guidance map, 2D rotary embeddings make that
//! map position-aware, and every high-resolution pixel attends to a `k x k`
//! window of low-resolution cells whose keys are the pooled guidance. The
//! attention values are the low-resolution features themselves, so the
//! operator works with features of any dimension.
//!
//! The crate also carries classical joint-bilateral baselines, spectral
//! analysis helpers for the rotary attention score, a CPU training loop with
//! hand-written reverse-mode gradients, and a denoising variant.

pub mod attention;
pub mod bench;
pub mod conv;
pub mod encoder;
pub mod error;
pub mod filters;
pub mod flops;
pub mod gradcheck;
pub mod image_io;
pub mod model;
pub mod npy;
pub mod random;
pub mod resample;
pub mod restoration;
pub mod rope;
pub mod spectral;
pub mod tensor;
pub mod training;

#[cfg(test)]
mod testing;

pub use error::{NafError, Result};
pub use tensor::{Real, Tensor3};
