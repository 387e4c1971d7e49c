//! Face geometry images: mesh alignment, planar parametrization,
//! geometry-image rasterization, linear face models and evaluation.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod align;
pub mod error;
pub mod eval_metrics;
pub mod expression;
pub mod geo_fit;
pub mod geom_image;
pub mod masked_batch;
pub mod mesh;
pub mod morphable;
pub mod parametrize;
pub mod spatial;
pub mod testkit;

pub use error::{Error, Result};
pub use mesh::{Mesh, Vec3};
