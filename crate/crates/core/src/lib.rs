//! Smoke removal for laparoscopic images with a U-Net backbone followed by a
//! learnable Wiener filter, trained under a compound MSE / SSIM / perceptual
//! loss, plus the metrics and ablation tooling used to evaluate it.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod optim;
pub mod wiener;

pub use error::{Error, Result};
