//! Training losses, each returning its value and analytic gradients.

mod geometry;
mod ssim;
mod teacher;

pub use geometry::{
    loss_depth_consistency, loss_normal, normals_from_depth, normals_from_depth_backward,
    DepthConsistency, NormalLoss,
};
pub use ssim::{loss_ssim, ssim_mean, SSIM_WINDOW};
pub use teacher::{
    loss_teacher, loss_teacher_depth, loss_teacher_rotation, loss_teacher_translation,
    TeacherLosses,
};

use serde::{Deserialize, Serialize};

use crate::buffer::{Grid, ImageBuffer};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::GaussianModel;

/// Weights of the composite training loss. The photometric terms apply to
/// both the self-render and the full render, averaged.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub depth: f64,
    pub normal: f64,
    pub teach_depth: f64,
    pub teach_t: f64,
    pub teach_r: f64,
    pub opacity: f64,
    pub intrinsics: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 1.0,
            ssim: 0.2,
            depth: 0.1,
            normal: 0.05,
            teach_depth: 1.0,
            teach_t: 1.0,
            teach_r: 1.0,
            opacity: 0.01,
            intrinsics: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.l1,
            self.ssim,
            self.depth,
            self.normal,
            self.teach_depth,
            self.teach_t,
            self.teach_r,
            self.opacity,
            self.intrinsics,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::NonFinite("loss weights"));
        }
        Ok(())
    }

    /// Zero everything; handy for isolating single terms in tests.
    pub fn zeros() -> Self {
        LossWeights {
            l1: 0.0,
            ssim: 0.0,
            depth: 0.0,
            normal: 0.0,
            teach_depth: 0.0,
            teach_t: 0.0,
            teach_r: 0.0,
            opacity: 0.0,
            intrinsics: 0.0,
        }
    }
}

/// Unweighted per-term values of one training step.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub l1_self: f64,
    pub l1_full: f64,
    pub ssim_self: f64,
    pub ssim_full: f64,
    pub depth: f64,
    pub normal: f64,
    pub teach_depth: f64,
    pub teach_t: f64,
    pub teach_r: f64,
    pub opacity: f64,
    pub intrinsics: f64,
}

impl LossBreakdown {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.l1 * 0.5 * (self.l1_self + self.l1_full)
            + w.ssim * 0.5 * (self.ssim_self + self.ssim_full)
            + w.depth * self.depth
            + w.normal * self.normal
            + w.teach_depth * self.teach_depth
            + w.teach_t * self.teach_t
            + w.teach_r * self.teach_r
            + w.opacity * self.opacity
            + w.intrinsics * self.intrinsics
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "l1_self={:.6} l1_full={:.6} ssim_self={:.6} ssim_full={:.6} depth={:.6} \
             normal={:.6} teach_depth={:.6} teach_t={:.6} teach_r={:.6} opacity={:.6} \
             intrinsics={:.6}",
            self.l1_self,
            self.l1_full,
            self.ssim_self,
            self.ssim_full,
            self.depth,
            self.normal,
            self.teach_depth,
            self.teach_t,
            self.teach_r,
            self.opacity,
            self.intrinsics
        )
    }
}

fn check_same_shape(pred: &ImageBuffer, target: &ImageBuffer) -> Result<()> {
    if pred.width() != target.width()
        || pred.height() != target.height()
        || pred.channels() != target.channels()
    {
        return Err(Error::shape(
            format!(
                "{}x{}x{}",
                target.width(),
                target.height(),
                target.channels()
            ),
            format!("{}x{}x{}", pred.width(), pred.height(), pred.channels()),
        ));
    }
    Ok(())
}

/// Mean absolute difference; gradient w.r.t. `pred` has the same layout as
/// the image data.
pub fn loss_l1(pred: &ImageBuffer, target: &ImageBuffer) -> Result<(f64, Vec<f64>)> {
    check_same_shape(pred, target)?;
    let n = pred.values().len() as f64;
    let mut total = 0.0;
    let grad: Vec<f64> = pred
        .values()
        .iter()
        .zip(target.values())
        .map(|(p, t)| {
            let d = p - t;
            total += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((total / n, grad))
}

/// Pushes effective opacities towards 0 or 1: mean of sin(pi * alpha * c),
/// which vanishes at both ends and peaks at 0.5. Gradients are returned per
/// primitive as (d alpha, d confidence).
pub fn loss_opacity_reg(model: &GaussianModel) -> (f64, Vec<(f64, f64)>) {
    let n = model.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let mut total = 0.0;
    let grads = model
        .gaussians
        .iter()
        .map(|g| {
            let prod = g.opacity * g.confidence;
            total += (std::f64::consts::PI * prod).sin();
            let d = std::f64::consts::PI * (std::f64::consts::PI * prod).cos() / n as f64;
            (d * g.confidence, d * g.opacity)
        })
        .collect();
    (total / n as f64, grads)
}

/// Mean over {fx, fy, cx, cy} of the per-parameter population variance
/// across views. Gradients are per camera as [d fx, d fy, d cx, d cy].
pub fn loss_intrinsics_var(cams: &[Camera]) -> (f64, Vec<[f64; 4]>) {
    let n = cams.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let params: Vec<[f64; 4]> = cams.iter().map(|c| [c.fx, c.fy, c.cx, c.cy]).collect();
    let mut means = [0.0; 4];
    for p in &params {
        for k in 0..4 {
            means[k] += p[k];
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut total = 0.0;
    for p in &params {
        for k in 0..4 {
            let d = p[k] - means[k];
            total += d * d;
        }
    }
    let value = total / (n as f64 * 4.0);
    let grads = params
        .iter()
        .map(|p| {
            let mut g = [0.0; 4];
            for k in 0..4 {
                g[k] = 2.0 * (p[k] - means[k]) / (n as f64 * 4.0);
            }
            g
        })
        .collect();
    (value, grads)
}
