//! Core of a model-division video semantic communication system.
//!
//! A group of pictures (GOP) is mapped to a latent space, encoded into
//! semantic feature maps, split into one common map shared by the whole GOP
//! plus one individual residual map per frame, and then packed into a
//! variable-length stream of real-valued channel symbols whose length is set
//! exactly by a bandwidth budget. The receiver rebuilds the keep-mask from
//! error-free side information, scatters the noisy symbols back, and inverts
//! the transforms.
//!
//! The crate is `no_std` (with `alloc`). The `std` feature, on by default,
//! only enables runtime SIMD detection in the GEMM kernels.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod channel;
pub mod entropy;
mod error;
pub mod metrics;
pub mod model;
pub mod nn;
mod scalar;
pub mod tensor;
pub mod train;
pub mod types;
pub mod vlc;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use types::VideoGop;
