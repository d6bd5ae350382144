//! Camera-to-world transform and confidence-weighted multi-view fusion.

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{matrix_to_quat, Gaussian, GaussianModel};

/// How [`fuse`] treats the prune rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FuseMode {
    /// Keep every primitive so gradients reach low-confidence ones.
    Training,
    /// Drop primitives with `opacity * confidence < threshold`.
    Inference,
}

/// Move a camera-frame Gaussian into world space using the view's
/// camera-from-world pose. Scale, opacity, confidence and color are frame
/// independent and unchanged.
pub fn to_world(g: &Gaussian, cam: &Camera) -> Gaussian {
    let world_from_cam = cam.rotation.transpose();
    let q_pose = matrix_to_quat(&world_from_cam);
    Gaussian {
        mean: world_from_cam * (g.mean - cam.translation),
        scale: g.scale,
        rotation: q_pose.multiply(&g.rotation),
        opacity: g.opacity,
        confidence: g.confidence,
        color: g.color,
    }
}

/// Concatenate per-view world-frame Gaussians into one model, ordered by
/// view index then decode order.
///
/// The effective opacity rendered for the fused model is `opacity *
/// confidence`; both factors stay stored on the primitive so self-rendering
/// (which ignores confidence) and training (which needs gradients through
/// confidence) keep working. In inference mode, primitives whose effective
/// opacity falls below `prune_threshold` are removed.
pub fn fuse(
    views: &[Vec<Gaussian>],
    prune_threshold: f64,
    mode: FuseMode,
) -> Result<GaussianModel> {
    if !(0.0..1.0).contains(&prune_threshold) {
        return Err(Error::shape(
            "prune threshold in [0, 1)",
            format!("{prune_threshold}"),
        ));
    }
    let mut model = GaussianModel::default();
    for (view, gaussians) in views.iter().enumerate() {
        for g in gaussians {
            if mode == FuseMode::Inference && g.effective_opacity() < prune_threshold {
                continue;
            }
            model.gaussians.push(g.clone());
            model.source_view.push(view);
        }
    }
    Ok(model)
}
