//! Invertible-network video watermarking.
//!
//! The crate is `no_std` (it needs `alloc`) and contains only pure
//! computation: a small tensor type with a reverse-mode tape, the single-level
//! Haar transform, the invertible watermark codec, the wavelet-domain codec
//! proxy, the video discriminator, the attack battery, the training loop and
//! the evaluation metrics. File formats, the external encoder client and the
//! command line live in the `dinvmark` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attack;
pub mod disc;
pub mod dwt;
mod error;
pub mod eval;
pub mod inn;
pub mod media;
pub mod nn;
pub mod noise;
pub mod optim;
mod real;
pub mod synth;
pub mod tape;
mod tensor;
pub mod train;

mod kernels;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
