//! Desk-scale, end-to-end differentiable stereo matching.
//!
//! The crate builds disparity maps from rectified stereo pairs with a
//! four-part pipeline: shared-weight unary feature extraction at quarter
//! resolution, cost volume construction (full correlation, group-wise
//! correlation, channel concatenation, or a combination), a stacked 3D
//! hourglass aggregation network with 1x1x1 shortcut convolutions, and
//! soft-argmin disparity regression. Everything runs on a small built-in
//! tensor library with reverse-mode automatic differentiation, so the
//! whole model trains on a CPU in minutes at desk scale.
//!
//! Entry points:
//! - [`tensor::Tape`] — the autodiff substrate.
//! - [`model::StereoModel`] — the assembled network.
//! - [`train::train`] — Adam training loop with checkpointing.
//! - [`verify`] — runnable oracle / gradient / identity suites.
//! - [`io`] — PFM, 16-bit PNG disparity, image loading, and the synthetic
//!   random-dot stereogram generator.

pub mod aggregation;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod io;
pub mod features;
pub mod head;
pub mod loss;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod volume;

pub use error::{Error, Result};
