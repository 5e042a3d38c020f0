//! Point cloud densification by implicit field fitting.
//!
//! The pipeline represents a sparse point cloud as a neural unsigned
//! distance field and generates a dense, uniform point set by projecting
//! random queries onto the field's zero-level set:
//!
//! 1. [`ldi`] — train a local distance indicator on sparse/dense patch
//!    pairs; it predicts the distance from a query to the surface described
//!    by a local patch.
//! 2. [`field`] — fit a per-shape unsigned distance network to a sparse
//!    cloud, supervised by the frozen indicator plus surface and shortest
//!    path constraints.
//! 3. [`upsample`] — sample queries around the sparse cloud, pull them onto
//!    the zero-level set, and farthest-point-sample down to the exact
//!    target count. The field is continuous, so any scale factor works
//!    without refitting.
//!
//! [`geom`] supplies the spatial machinery (kd-tree, FPS, patches),
//! [`nn`] the small differentiable MLPs, [`metrics`] evaluation against
//! point sets and analytic surfaces, and [`io`]/[`config`] the file
//! formats.

pub mod config;
pub mod error;
pub mod field;
pub mod geom;
pub mod io;
pub mod ldi;
pub mod metrics;
pub mod nn;
pub mod upsample;

pub use error::{Error, Result};
pub use geom::{PointCloud, SpatialIndex, Vec3};
