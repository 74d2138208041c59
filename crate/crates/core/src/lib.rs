//! Prototype-based image prompting for weakly supervised segmentation of
//! histopathology patches.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity, clippy::needless_range_loop)]

pub mod ablation;
pub mod autodiff;
pub mod bank;
pub mod codec;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod matchnet;
pub mod metrics;
pub mod model;
pub mod overlay;
pub mod pipeline;
pub mod resample;
pub mod simnet;
pub mod supervised;
pub mod synth;
pub mod train;
pub mod zeroshot;

pub use error::{PbipError, Result};
