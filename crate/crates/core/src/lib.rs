//! Geometry-aware depth completion.
//!
//! Sparse depth is lifted to a point cloud, embedded per point by stacked
//! dynamic-graph edge convolutions, scattered back onto the image grid and
//! used to guide a two-branch encoder–decoder that predicts dense depth.

pub mod autodiff;
pub mod camera;
pub mod config;
pub mod dataio;
pub mod dgr;
pub mod error;
pub mod knn;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
