//! Self-attention with learnable temporal kernels for multichannel time
//! series: matrices and reverse-mode autodiff, kernel construction, the
//! encoder and its task heads, data preparation, metrics and training.
//!
//! The crate is `no_std` and needs only `alloc`.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod synth;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use matrix::Matrix;
