//! Evaluation metrics: PSNR/SSIM, relative pose errors and AUC, scale-free
//! depth metrics, focal-length metrics, Umeyama alignment.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::buffer::{DepthMap, Grid, ImageBuffer};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::losses::{loss_teacher_rotation, ssim_mean};

/// PSNR cap reported when the images match exactly.
pub const PSNR_SENTINEL: f64 = 99.0;

/// Peak signal-to-noise ratio in dB for [0, 1] images, capped at the
/// sentinel.
pub fn psnr(pred: &ImageBuffer, target: &ImageBuffer) -> Result<f64> {
    if pred.width() != target.width()
        || pred.height() != target.height()
        || pred.channels() != target.channels()
    {
        return Err(Error::shape(
            format!("{}x{}x{}", target.width(), target.height(), target.channels()),
            format!("{}x{}x{}", pred.width(), pred.height(), pred.channels()),
        ));
    }
    let mse: f64 = pred
        .values()
        .iter()
        .zip(target.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.values().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_SENTINEL);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_SENTINEL))
}

/// Mean SSIM as a similarity in [-1, 1] (shares the loss implementation).
pub fn ssim_metric(pred: &ImageBuffer, target: &ImageBuffer) -> Result<f64> {
    ssim_mean(pred, target)
}

/// Per-pair relative pose errors in degrees.
#[derive(Debug, Clone, Default)]
pub struct PoseErrors {
    /// max(rotation, translation-direction) error per ordered pair.
    pub combined_deg: Vec<f64>,
    pub rotation_deg: Vec<f64>,
    pub translation_deg: Vec<f64>,
    /// Pairs dropped because a relative translation was too short to define
    /// a direction.
    pub skipped: usize,
}

const MIN_BASELINE: f64 = 1e-9;

/// Relative rotation / translation-direction errors over all ordered camera
/// pairs. Scale-free: invariant to a global similarity transform of the
/// predictions.
pub fn relative_pose_errors(pred: &[Camera], gt: &[Camera]) -> Result<PoseErrors> {
    if pred.len() != gt.len() || pred.len() < 2 {
        return Err(Error::shape(
            format!("two equal camera lists (gt has {})", gt.len()),
            format!("{}", pred.len()),
        ));
    }
    let mut out = PoseErrors::default();
    for i in 0..pred.len() {
        for j in 0..pred.len() {
            if i == j {
                continue;
            }
            let rel = |cams: &[Camera]| -> (Matrix3<f64>, Vector3<f64>) {
                let r = cams[i].rotation * cams[j].rotation.transpose();
                let t = cams[i].translation - r * cams[j].translation;
                (r, t)
            };
            let (r_p, t_p) = rel(pred);
            let (r_g, t_g) = rel(gt);
            let (rot_err, _) = loss_teacher_rotation(&r_p, &r_g);
            if t_p.norm() < MIN_BASELINE || t_g.norm() < MIN_BASELINE {
                out.skipped += 1;
                continue;
            }
            let cos = (t_p.dot(&t_g) / (t_p.norm() * t_g.norm())).clamp(-1.0, 1.0);
            let trans_err = cos.acos();
            out.rotation_deg.push(rot_err.to_degrees());
            out.translation_deg.push(trans_err.to_degrees());
            out.combined_deg
                .push(rot_err.to_degrees().max(trans_err.to_degrees()));
        }
    }
    Ok(out)
}

/// Area under the cumulative recall curve of pose errors up to `threshold`
/// degrees, normalized to [0, 1]. Recall is sampled on a 1-degree grid and
/// integrated by the trapezoid rule.
pub fn pose_auc(errors: &[f64], threshold_deg: f64) -> f64 {
    assert!(!errors.is_empty(), "pose_auc needs at least one error");
    assert!(threshold_deg >= 1.0);
    let n = errors.len() as f64;
    let recall = |t: f64| errors.iter().filter(|&&e| e <= t).count() as f64 / n;
    let steps = threshold_deg.round() as usize;
    let mut area = 0.0;
    for k in 0..steps {
        area += 0.5 * (recall(k as f64) + recall(k as f64 + 1.0));
    }
    area / threshold_deg
}

/// AbsRel and the delta < 1.25 inlier ratio, after median-scaling the
/// prediction to the ground truth (pose-free models are scale-free).
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, mask: &[bool]) -> Result<(f64, f64)> {
    let n = gt.width() * gt.height();
    if pred.width() != gt.width() || pred.height() != gt.height() || mask.len() != n {
        return Err(Error::shape(
            format!("{}x{}", gt.width(), gt.height()),
            format!("{}x{} ({} mask)", pred.width(), pred.height(), mask.len()),
        ));
    }
    let mut pred_vals = Vec::new();
    let mut gt_vals = Vec::new();
    for i in 0..n {
        let (p, g) = (pred.depth_data()[i], gt.depth_data()[i]);
        if mask[i] && p.is_finite() && g.is_finite() && p > 0.0 && g > 0.0 {
            pred_vals.push(p);
            gt_vals.push(g);
        }
    }
    if pred_vals.is_empty() {
        return Err(Error::DegenerateConfiguration(
            "depth metrics need a non-empty mask".into(),
        ));
    }
    let median = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s[s.len() / 2]
    };
    let scale = median(&gt_vals) / median(&pred_vals);
    let mut absrel = 0.0;
    let mut inliers = 0usize;
    for (p, g) in pred_vals.iter().zip(&gt_vals) {
        let p = p * scale;
        absrel += (p - g).abs() / g;
        if (p / g).max(g / p) < 1.25 {
            inliers += 1;
        }
    }
    Ok((
        absrel / pred_vals.len() as f64,
        inliers as f64 / pred_vals.len() as f64,
    ))
}

/// Focal-length metrics: mean absolute pixel error over (fx, fy), mean
/// horizontal field-of-view error in degrees, and the fraction of views with
/// angular error below 3 degrees.
pub fn focal_metrics(pred: &[Camera], gt: &[Camera]) -> Result<(f64, f64, f64)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape(
            format!("{} cameras", gt.len()),
            format!("{}", pred.len()),
        ));
    }
    let mut mae = 0.0;
    let mut fov_err = 0.0;
    let mut below = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        mae += ((p.fx - g.fx).abs() + (p.fy - g.fy).abs()) / 2.0;
        let fov = |f: f64, w: f64| 2.0 * (w / (2.0 * f)).atan();
        let err =
            (fov(p.fx, p.width as f64) - fov(g.fx, g.width as f64)).abs().to_degrees();
        fov_err += err;
        if err < 3.0 {
            below += 1;
        }
    }
    let n = pred.len() as f64;
    Ok((mae / n, fov_err / n, below as f64 / n))
}

/// Least-squares similarity transform: minimizes sum |s R x + t - y|^2.
/// Returns (scale, rotation, translation) with det(R) = +1. With
/// `with_scale` false the scale is fixed at 1.
pub fn umeyama(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    with_scale: bool,
) -> Result<(f64, Matrix3<f64>, Vector3<f64>)> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "need >= 3 correspondences, got {} / {}",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len() as f64;
    let mean_src = src.iter().sum::<Vector3<f64>>() / n;
    let mean_dst = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_src = 0.0;
    for (x, y) in src.iter().zip(dst) {
        let xc = x - mean_src;
        let yc = y - mean_dst;
        cov += yc * xc.transpose();
        var_src += xc.norm_squared();
    }
    cov /= n;
    var_src /= n;
    let svd = cov.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::DegenerateConfiguration("SVD failed".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::DegenerateConfiguration("SVD failed".into()))?;
    // Rank >= 2 is required for a unique rotation.
    if svd.singular_values[1] < 1e-12 * svd.singular_values[0].max(1e-300) {
        return Err(Error::DegenerateConfiguration(
            "correspondences are collinear".into(),
        ));
    }
    let mut s = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s.z = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&s) * v_t;
    let scale = if with_scale {
        if var_src < 1e-300 {
            return Err(Error::DegenerateConfiguration("zero source variance".into()));
        }
        (svd.singular_values.component_mul(&s)).sum() / var_src
    } else {
        1.0
    };
    let translation = mean_dst - rotation * mean_src * scale;
    Ok((scale, rotation, translation))
}

/// Fixed-schema metrics report (see the eval CLI subcommand).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub psnr: f64,
    pub ssim: f64,
    pub auc15: f64,
    pub auc30: f64,
    pub absrel: f64,
    pub delta125: f64,
    pub focal_mae: f64,
    pub fov_err: f64,
    pub t3: f64,
}
