//! Numerical toolkit for class-agnostic counting.
//!
//! * [`density`]: density-map counting and Gaussian ground-truth rendering.
//! * [`transport`]: perspective-guided transport costs.
//! * [`gl`]: the generalized (unbalanced optimal-transport) counting loss,
//!   its brute-force reference and the pixel-wise L2 baseline.
//! * [`metrics`]: MAE, RMSE, NAE, SRE, top-k exclusion and count histograms.
//! * [`mosaic`]: seeded 2x2 collage synthesis for evaluation and training.
//! * [`ttn`]: test-time tiling of queries with small exemplars.
//! * [`demo`]: a toy counter trained under the four recipe settings.

pub mod demo;
pub mod density;
pub mod error;
pub mod gl;
pub mod metrics;
pub mod mosaic;
pub mod transport;
pub mod ttn;
pub mod types;

pub use error::{Error, ErrorFamily, Result};
pub use types::{AnnotatedImage, BoundingBox, DensityGrid, Manifest, Point, PointSet};
