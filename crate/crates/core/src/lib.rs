//! Learning-based 2D localization of multiple simultaneous sound sources
//! from two microphone arrays.
//!
//! The pipeline: [`acoustics`] renders free-field scenes, [`dsp`] turns each
//! array's audio into stacked real/imaginary STFT features, [`models`] maps
//! them through an encoder-decoder network onto one of three output
//! representations, [`represent`] encodes targets, computes losses and
//! retrieves keypoints, and [`metrics`] scores keypoints with resolution-based
//! association. [`datagen`] and [`train`] drive the whole loop from a
//! [`config::RunConfig`].

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acoustics;
pub mod config;
pub mod datagen;
pub mod dsp;
pub mod error;
pub mod metrics;
pub mod models;
pub mod par;
pub mod plot;
pub mod represent;
pub mod tensornet;
pub mod train;

pub use error::{Error, Result};
