//! Depth-uncertainty lifting of multi-camera features into 3D Gaussians and
//! differentiable bird's-eye-view splatting.
//!
//! Pipeline: per-pixel depth logits → softmax over depth bins → 3D mean and
//! covariance along the pixel ray → opacity filter → projection onto one or
//! more BEV grids → tiled splatting → upsample and fuse.

// `!(x > y)` is used on purpose so NaN inputs are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod config;
pub mod error;
pub mod grad;
pub mod harness;
pub mod lift;
pub mod multiscale;
pub mod raster;
pub mod tensor;

pub use error::{Error, Result};
