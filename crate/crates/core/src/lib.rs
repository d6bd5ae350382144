//! Sub-pixel Gaussian splat decoding and differentiable rendering.
//!
//! The pipeline turns a handful of posed input views (images + depth maps)
//! into a 3D Gaussian model without attaching one primitive to every pixel:
//!
//! 1. [`density`] scores 14x14 image patches by entropy and assigns each a
//!    primitive budget (16/32/64).
//! 2. [`detection`] extracts continuous sub-pixel 2D centers from per-patch
//!    heatmaps via a spatial softmax expectation (soft-argmax).
//! 3. [`decode`] samples depth/color/descriptors at the detected points and
//!    turns them into camera-frame Gaussians (scale, orientation, opacity,
//!    confidence via a small MLP).
//! 4. [`aggregate`] moves per-view Gaussians to world space and fuses them
//!    across views, weighting opacity by learned confidence.
//! 5. [`rasterizer`] splats the model back into color / alpha / median-depth /
//!    normal buffers, with a hand-written backward pass.
//! 6. [`fit`] closes the loop: heatmap logits, descriptor fields and the MLP
//!    are optimized with Adam against the input views ([`losses`]).
//!
//! [`synth`] generates analytic test scenes standing in for a reconstruction
//! backbone, [`eval`] implements the usual image/pose/depth metrics, and
//! [`io`] handles PLY/PNG/JSON persistence.
//!
//! Everything is f64 and deterministic given a seed.

pub mod aggregate;
pub mod buffer;
pub mod camera;
pub mod decode;
pub mod density;
pub mod detection;
pub mod error;
pub mod eval;
pub mod fit;
pub mod gaussian;
pub mod io;
pub mod losses;
pub mod rasterizer;
pub mod synth;

pub use buffer::{DepthMap, Grid, ImageBuffer};
pub use camera::Camera;
pub use error::{Error, Result};
pub use gaussian::{Gaussian, GaussianModel, Quaternion};

/// Side length of the square image patches everything operates on.
pub const PATCH_SIZE: usize = 14;
