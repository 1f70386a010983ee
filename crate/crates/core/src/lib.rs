//! Weather-conditioned branch routing for LiDAR / 4D-radar 3D detection.
//!
//! This crate is `no_std` (with `alloc`) and holds every numerical piece of
//! the pipeline: a small reverse-mode autodiff tape, sparse voxel tensors and
//! sparse convolution, the condition token encoder, the three-branch
//! backbone, the branch router, detection head and training objectives,
//! rotated-box geometry with AP evaluation, and the synthetic weather scene
//! generator. File formats, configuration files and the CLI live in the
//! companion `routefuse` crate.

#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod backbone;
pub mod condition;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod head;
pub mod math;
pub mod model;
pub mod nn;
pub mod router;
pub mod sim;
pub mod train;
pub mod voxel;
pub mod weather;

pub use error::{Error, Result};
