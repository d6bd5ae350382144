//! Differentiable tile-based splatting.
//!
//! World-frame Gaussians are projected to 2D splats (EWA-style affine
//! approximation of the perspective projection), depth-sorted and composited
//! front-to-back per pixel into color, alpha, median-depth and normal
//! buffers. The backward pass is analytic and mirrors the forward
//! termination thresholds exactly.

mod backward;
mod forward;
mod project;

pub use backward::{rasterize_backward, RenderGrads};
pub use forward::rasterize;
pub use project::{
    project_gaussian, project_gaussian_backward, CameraGrads, GaussianGrads, ProjectedSplat,
};

use nalgebra::{Matrix2, Vector2, Vector3};

use crate::camera::Camera;
use crate::error::Result;
use crate::gaussian::GaussianModel;

/// Tile side in pixels.
pub const TILE_SIZE: usize = 16;

/// Anti-aliasing floor added to the 2D covariance diagonal (px^2).
pub const COV_DILATION: f64 = 0.3;

/// Compositing stops once transmittance falls below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;

/// Contributions with alpha below this are skipped.
pub const ALPHA_SKIP: f64 = 1.0 / 255.0;

/// Splats whose camera-space depth is at or below this are culled.
pub const NEAR_PLANE: f64 = 1e-4;

/// Squared Mahalanobis radius containing 99% of a 2D Gaussian's mass
/// (-2 ln 0.01); defines the per-splat bounding rectangle.
pub const MASS_99_RADIUS_SQ: f64 = 9.210340371976184;

/// Accumulated alpha at which the median depth latches.
pub const MEDIAN_ALPHA: f64 = 0.5;

/// Symmetric 2x2 matrix packed as [[a, b], [b, c]].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SymMat2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl SymMat2 {
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        SymMat2 { a, b, c }
    }

    pub fn from_matrix(m: &Matrix2<f64>) -> Self {
        SymMat2 {
            a: m[(0, 0)],
            b: 0.5 * (m[(0, 1)] + m[(1, 0)]),
            c: m[(1, 1)],
        }
    }

    pub fn to_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.a, self.b, self.b, self.c)
    }

    pub fn det(&self) -> f64 {
        self.a * self.c - self.b * self.b
    }

    pub fn inverse(&self) -> SymMat2 {
        let d = self.det();
        SymMat2 {
            a: self.c / d,
            b: -self.b / d,
            c: self.a / d,
        }
    }

    pub fn mul_vec(&self, v: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(self.a * v.x + self.b * v.y, self.b * v.x + self.c * v.y)
    }

    pub fn eigenvalue_max(&self) -> f64 {
        let half_trace = 0.5 * (self.a + self.c);
        let disc = (0.25 * (self.a - self.c) * (self.a - self.c) + self.b * self.b).sqrt();
        half_trace + disc
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.b.is_finite() && self.c.is_finite()
    }
}

/// A Gaussian projected into one view, ready for compositing.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    /// Continuous pixel coordinates of the projected mean.
    pub center: Vector2<f64>,
    /// Dilated 2D covariance (px^2).
    pub cov: SymMat2,
    /// Camera-space z of the mean.
    pub depth: f64,
    pub color: Vector3<f64>,
    /// Opacity actually composited (raw or confidence-weighted).
    pub opacity: f64,
    /// Camera-frame unit normal, facing the camera.
    pub normal: Vector3<f64>,
}

impl Splat2D {
    pub fn is_finite(&self) -> bool {
        self.center.x.is_finite()
            && self.center.y.is_finite()
            && self.cov.is_finite()
            && self.depth.is_finite()
            && self.color.iter().all(|v| v.is_finite())
            && self.opacity.is_finite()
            && self.normal.iter().all(|v| v.is_finite())
    }

    /// Axis-aligned rectangle holding the 99%-mass ellipse. Contributions
    /// outside it are dropped, in forward and backward alike.
    pub fn bounding_rect(&self) -> (f64, f64, f64, f64) {
        let r = (MASS_99_RADIUS_SQ * self.cov.eigenvalue_max()).sqrt();
        (
            self.center.x - r,
            self.center.y - r,
            self.center.x + r,
            self.center.y + r,
        )
    }
}

/// Rendered buffers for one view.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// H*W*3, row-major RGB.
    pub color: Vec<f64>,
    /// H*W accumulated opacity in [0, 1].
    pub alpha: Vec<f64>,
    /// H*W; depth at which accumulated alpha crossed 0.5, 0 where it never did.
    pub median_depth: Vec<f64>,
    /// H*W*3; unit rows where alpha accumulated, zero rows elsewhere.
    pub normal: Vec<f64>,
}

impl RenderOutput {
    pub fn empty(width: usize, height: usize) -> Self {
        RenderOutput {
            width,
            height,
            color: vec![0.0; width * height * 3],
            alpha: vec![0.0; width * height],
            median_depth: vec![0.0; width * height],
            normal: vec![0.0; width * height * 3],
        }
    }

    pub fn color_image(&self) -> crate::buffer::ImageBuffer {
        crate::buffer::ImageBuffer::from_data(self.width, self.height, 3, self.color.clone())
            .expect("render buffers are consistent")
    }
}

/// Which opacity a render composites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpacitySource {
    /// The raw per-primitive opacity (self-rendering: confidence is a fusion
    /// concept and stays out).
    Raw,
    /// Opacity multiplied by confidence (fused model rendering).
    Effective,
}

/// Splats of a model in one view plus bookkeeping for the backward chain.
#[derive(Debug, Clone)]
pub struct ViewProjection {
    pub splats: Vec<Splat2D>,
    /// Model Gaussian index per splat (culled primitives are absent).
    pub model_index: Vec<usize>,
    /// Discrete choices made per splat: (shortest axis, normal sign).
    pub axes: Vec<(usize, f64)>,
}

/// Project a model's primitives into a view, optionally restricted to one
/// source view, with the chosen opacity.
pub fn project_model(
    model: &GaussianModel,
    cam: &Camera,
    opacity: OpacitySource,
    only_view: Option<usize>,
) -> ViewProjection {
    let mut out = ViewProjection {
        splats: Vec::new(),
        model_index: Vec::new(),
        axes: Vec::new(),
    };
    for (i, g) in model.gaussians.iter().enumerate() {
        if let Some(view) = only_view {
            if model.source_view[i] != view {
                continue;
            }
        }
        let Some(p) = project_gaussian(g, cam) else {
            continue;
        };
        let mut splat = p.splat;
        if opacity == OpacitySource::Effective {
            splat.opacity = g.opacity * g.confidence;
        }
        out.splats.push(splat);
        out.model_index.push(i);
        out.axes.push((p.shortest_axis, p.normal_sign));
    }
    out
}

/// Rasterize a fused model with confidence-weighted opacities.
pub fn render_full(model: &GaussianModel, cam: &Camera) -> Result<RenderOutput> {
    let proj = project_model(model, cam, OpacitySource::Effective, None);
    rasterize(&proj.splats, cam.width, cam.height)
}

/// Rasterize only the primitives decoded from `view_index`, without
/// confidence weighting.
pub fn self_render(
    model: &GaussianModel,
    view_index: usize,
    cam: &Camera,
) -> Result<RenderOutput> {
    let proj = project_model(model, cam, OpacitySource::Raw, Some(view_index));
    rasterize(&proj.splats, cam.width, cam.height)
}

/// Depth-ascending compositing order with index tie-break.
pub(crate) fn depth_order(splats: &[Splat2D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&i, &j| splats[i].depth.total_cmp(&splats[j].depth).then(i.cmp(&j)));
    order
}
