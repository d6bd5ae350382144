//! Geometry consistency: rendered depth vs predicted depth, and rendered
//! normals vs normals derived from the predicted depth map.

use nalgebra::Vector3;

use crate::buffer::{DepthMap, Grid};
use crate::camera::Camera;
use crate::error::{Error, Result};

/// Masked L1 between rendered (median) depth and the predicted depth map.
#[derive(Debug, Clone)]
pub struct DepthConsistency {
    pub value: f64,
    /// d value / d rendered depth, per pixel.
    pub grad_rendered: Vec<f64>,
    /// d value / d predicted depth, per pixel (used when depth maps are
    /// optimized).
    pub grad_predicted: Vec<f64>,
    /// Pixels that entered the mean; 0 means the mask was empty.
    pub masked: usize,
}

pub fn loss_depth_consistency(
    rendered: &[f64],
    predicted: &DepthMap,
    mask: &[bool],
) -> Result<DepthConsistency> {
    let n = predicted.width() * predicted.height();
    if rendered.len() != n || mask.len() != n {
        return Err(Error::shape(
            format!("{n} pixels"),
            format!("{} rendered, {} mask", rendered.len(), mask.len()),
        ));
    }
    let count = mask.iter().filter(|&&m| m).count();
    let mut grad_rendered = vec![0.0; n];
    let mut grad_predicted = vec![0.0; n];
    if count == 0 {
        return Ok(DepthConsistency {
            value: 0.0,
            grad_rendered,
            grad_predicted,
            masked: 0,
        });
    }
    let mut total = 0.0;
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let d = rendered[i] - predicted.depth_data()[i];
        total += d.abs();
        let s = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad_rendered[i] = s / count as f64;
        grad_predicted[i] = -s / count as f64;
    }
    Ok(DepthConsistency {
        value: total / count as f64,
        grad_rendered,
        grad_predicted,
        masked: count,
    })
}

fn pixel_direction(cam: &Camera, x: usize, y: usize) -> Vector3<f64> {
    cam.ray_direction(x as f64 + 0.5, y as f64 + 0.5)
}

/// Tangent along one image axis by central differences (one-sided at the
/// borders). Returns the difference scale together with the two tap indices.
fn tangent_taps(coord: usize, max: usize) -> (usize, usize, f64) {
    if coord == 0 {
        (1, 0, 1.0)
    } else if coord == max - 1 {
        (coord, coord - 1, 1.0)
    } else {
        (coord + 1, coord - 1, 0.5)
    }
}

/// Per-pixel unit normals from a depth map and intrinsics: unproject to
/// camera space, cross the u/v tangents, orient towards the camera
/// (negative z). Degenerate pixels yield a zero row.
pub fn normals_from_depth(depth: &DepthMap, cam: &Camera) -> Vec<f64> {
    let (w, h) = (depth.width(), depth.height());
    let point = |x: usize, y: usize| -> Vector3<f64> {
        pixel_direction(cam, x, y) * depth.get(x, y)
    };
    let mut out = vec![0.0; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let (xp, xm, su) = tangent_taps(x, w);
            let (yp, ym, sv) = tangent_taps(y, h);
            let tu = (point(xp, y) - point(xm, y)) * su;
            let tv = (point(x, yp) - point(x, ym)) * sv;
            let cross = tu.cross(&tv);
            let norm = cross.norm();
            if !norm.is_finite() || norm < 1e-300 {
                continue;
            }
            let mut n = cross / norm;
            if n.z > 0.0 {
                n = -n;
            }
            let base = (y * w + x) * 3;
            out[base] = n.x;
            out[base + 1] = n.y;
            out[base + 2] = n.z;
        }
    }
    out
}

/// Backward of [`normals_from_depth`]: gradient w.r.t. the per-pixel depths.
/// The orientation flip is a discrete choice and treated as constant.
pub fn normals_from_depth_backward(
    depth: &DepthMap,
    cam: &Camera,
    grad_normals: &[f64],
) -> Vec<f64> {
    let (w, h) = (depth.width(), depth.height());
    debug_assert_eq!(grad_normals.len(), w * h * 3);
    let point = |x: usize, y: usize| -> Vector3<f64> {
        pixel_direction(cam, x, y) * depth.get(x, y)
    };
    let mut grad_depth = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * 3;
            let g_unit = Vector3::new(
                grad_normals[base],
                grad_normals[base + 1],
                grad_normals[base + 2],
            );
            if g_unit == Vector3::zeros() {
                continue;
            }
            let (xp, xm, su) = tangent_taps(x, w);
            let (yp, ym, sv) = tangent_taps(y, h);
            let tu = (point(xp, y) - point(xm, y)) * su;
            let tv = (point(x, yp) - point(x, ym)) * sv;
            let cross = tu.cross(&tv);
            let norm = cross.norm();
            if !norm.is_finite() || norm < 1e-300 {
                continue;
            }
            let unit = cross / norm;
            let sign = if unit.z > 0.0 { -1.0 } else { 1.0 };
            // n = sign * cross / |cross|
            let g_cross = (g_unit - unit * unit.dot(&g_unit)) * (sign / norm);
            // cross = tu x tv
            let g_tu = tv.cross(&g_cross);
            let g_tv = g_cross.cross(&tu);
            // tangents are scaled differences of unprojected points
            grad_depth[y * w + xp] += pixel_direction(cam, xp, y).dot(&g_tu) * su;
            grad_depth[y * w + xm] -= pixel_direction(cam, xm, y).dot(&g_tu) * su;
            grad_depth[yp * w + x] += pixel_direction(cam, x, yp).dot(&g_tv) * sv;
            grad_depth[ym * w + x] -= pixel_direction(cam, x, ym).dot(&g_tv) * sv;
        }
    }
    grad_depth
}

/// Masked mean of `1 - |cos|` between rendered and derived normals.
#[derive(Debug, Clone)]
pub struct NormalLoss {
    pub value: f64,
    pub grad_rendered: Vec<f64>,
    pub grad_derived: Vec<f64>,
    /// Pixels that entered the mean (mask set, both normals non-zero).
    pub used: usize,
}

pub fn loss_normal(rendered: &[f64], derived: &[f64], mask: &[bool]) -> Result<NormalLoss> {
    let n = mask.len();
    if rendered.len() != n * 3 || derived.len() != n * 3 {
        return Err(Error::shape(
            format!("{} normal rows", n),
            format!("{} / {}", rendered.len() / 3, derived.len() / 3),
        ));
    }
    let vec_at = |data: &[f64], i: usize| -> Vector3<f64> {
        Vector3::new(data[i * 3], data[i * 3 + 1], data[i * 3 + 2])
    };
    // First pass: count usable pixels so gradients carry the final weight.
    let usable: Vec<usize> = (0..n)
        .filter(|&i| {
            mask[i] && vec_at(rendered, i).norm() > 1e-12 && vec_at(derived, i).norm() > 1e-12
        })
        .collect();
    let used = usable.len();
    let mut grad_rendered = vec![0.0; n * 3];
    let mut grad_derived = vec![0.0; n * 3];
    if used == 0 {
        return Ok(NormalLoss {
            value: 0.0,
            grad_rendered,
            grad_derived,
            used,
        });
    }
    let mut total = 0.0;
    for &i in &usable {
        let a = vec_at(rendered, i);
        let b = vec_at(derived, i);
        let (na, nb) = (a.norm(), b.norm());
        let cos = a.dot(&b) / (na * nb);
        total += 1.0 - cos.abs();
        let s = if cos >= 0.0 { 1.0 } else { -1.0 };
        let ga = (b / (na * nb) - a * (cos / (na * na))) * (-s / used as f64);
        let gb = (a / (na * nb) - b * (cos / (nb * nb))) * (-s / used as f64);
        for k in 0..3 {
            grad_rendered[i * 3 + k] = ga[k];
            grad_derived[i * 3 + k] = gb[k];
        }
    }
    Ok(NormalLoss {
        value: total / used as f64,
        grad_rendered,
        grad_derived,
        used,
    })
}
