//! World Gaussian -> 2D splat projection and its backward pass.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use super::{Splat2D, SymMat2, COV_DILATION, NEAR_PLANE};
use crate::camera::Camera;
use crate::gaussian::{quat_to_matrix, quat_to_matrix_backward, Gaussian};

/// Projection result plus the discrete choices the backward pass reuses.
#[derive(Debug, Clone)]
pub struct ProjectedSplat {
    pub splat: Splat2D,
    /// Index of the smallest scale component (ties: smallest index).
    pub shortest_axis: usize,
    /// +-1 flip applied so the normal faces the camera.
    pub normal_sign: f64,
}

fn shortest_axis_index(scale: &Vector3<f64>) -> usize {
    let s = [scale.x, scale.y, scale.z];
    let mut best = 0;
    for k in 1..3 {
        if s[k] < s[best] {
            best = k;
        }
    }
    best
}

/// Affine Jacobian of the pinhole projection at a camera-space point.
fn projection_jacobian(cam: &Camera, p: &Vector3<f64>) -> Matrix2x3 {
    let z2 = p.z * p.z;
    Matrix2x3::new(
        cam.fx / p.z,
        0.0,
        -cam.fx * p.x / z2,
        0.0,
        cam.fy / p.z,
        -cam.fy * p.y / z2,
    )
}

type Matrix2x3 = nalgebra::Matrix2x3<f64>;

/// Project one world-frame Gaussian into a view.
///
/// Returns `None` when the mean is at or behind the near plane or the
/// 99%-mass rectangle misses the image entirely.
pub fn project_gaussian(g: &Gaussian, cam: &Camera) -> Option<ProjectedSplat> {
    let p_cam = cam.to_camera(&g.mean);
    if p_cam.z <= NEAR_PLANE {
        return None;
    }
    let u = cam.fx * p_cam.x / p_cam.z + cam.cx;
    let v = cam.fy * p_cam.y / p_cam.z + cam.cy;

    let r_quat = quat_to_matrix(&g.rotation).ok()?;
    let d = Matrix3::from_diagonal(&Vector3::new(
        g.scale.x * g.scale.x,
        g.scale.y * g.scale.y,
        g.scale.z * g.scale.z,
    ));
    let sigma_world = r_quat * d * r_quat.transpose();
    let sigma_cam = cam.rotation * sigma_world * cam.rotation.transpose();
    let jac = projection_jacobian(cam, &p_cam);
    let cov2 = jac * sigma_cam * jac.transpose();
    let cov = SymMat2::new(
        cov2[(0, 0)] + COV_DILATION,
        0.5 * (cov2[(0, 1)] + cov2[(1, 0)]),
        cov2[(1, 1)] + COV_DILATION,
    );

    let shortest = shortest_axis_index(&g.scale);
    let axis_world = r_quat.column(shortest).into_owned();
    let axis_cam = cam.rotation * axis_world;
    let normal_sign = if axis_cam.z > 0.0 { -1.0 } else { 1.0 };
    let normal = axis_cam * normal_sign;

    let splat = Splat2D {
        center: Vector2::new(u, v),
        cov,
        depth: p_cam.z,
        color: g.color,
        opacity: g.opacity,
        normal,
    };
    let (x0, y0, x1, y1) = splat.bounding_rect();
    if x1 < 0.0 || y1 < 0.0 || x0 > cam.width as f64 || y0 > cam.height as f64 {
        return None;
    }
    Some(ProjectedSplat {
        splat,
        shortest_axis: shortest,
        normal_sign,
    })
}

/// Upstream gradients on one splat's parameters. The covariance gradient is
/// packed: `cov.b` is the derivative w.r.t. the single shared off-diagonal.
#[derive(Debug, Clone, Copy, Default)]
pub struct SplatGrads {
    pub center: Vector2<f64>,
    pub cov: SymMat2,
    pub depth: f64,
    pub color: Vector3<f64>,
    pub opacity: f64,
    pub normal: Vector3<f64>,
}

impl SplatGrads {
    pub fn accumulate(&mut self, o: &SplatGrads) {
        self.center += o.center;
        self.cov.a += o.cov.a;
        self.cov.b += o.cov.b;
        self.cov.c += o.cov.c;
        self.depth += o.depth;
        self.color += o.color;
        self.opacity += o.opacity;
        self.normal += o.normal;
    }
}

/// Gradients w.r.t. the world-frame Gaussian parameters.
#[derive(Debug, Clone, Copy, Default)]
pub struct GaussianGrads {
    pub mean: Vector3<f64>,
    pub scale: Vector3<f64>,
    /// W.r.t. the stored (unit) quaternion components, normalization chain
    /// included.
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl GaussianGrads {
    pub fn accumulate(&mut self, o: &GaussianGrads) {
        self.mean += o.mean;
        self.scale += o.scale;
        for k in 0..4 {
            self.rotation[k] += o.rotation[k];
        }
        self.opacity += o.opacity;
        self.color += o.color;
    }
}

/// Gradients w.r.t. the camera pose, exposed for pose optimization. The
/// rotation gradient is over the nine free matrix entries.
#[derive(Debug, Clone, Default)]
pub struct CameraGrads {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Backward of [`project_gaussian`]. `projected` must be the forward result
/// for the same (g, cam) pair; its discrete choices (shortest axis, normal
/// sign) are treated as constants.
pub fn project_gaussian_backward(
    g: &Gaussian,
    cam: &Camera,
    projected: &ProjectedSplat,
    grads: &SplatGrads,
) -> (GaussianGrads, CameraGrads) {
    let p_cam = cam.to_camera(&g.mean);
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    let z2 = z * z;

    let r_quat = quat_to_matrix(&g.rotation).expect("gaussian rotation is non-degenerate");
    let d = Matrix3::from_diagonal(&Vector3::new(
        g.scale.x * g.scale.x,
        g.scale.y * g.scale.y,
        g.scale.z * g.scale.z,
    ));
    let sigma_world = r_quat * d * r_quat.transpose();
    let sigma_cam = cam.rotation * sigma_world * cam.rotation.transpose();
    let jac = projection_jacobian(cam, &p_cam);

    // Unpack the covariance gradient to a full symmetric matrix: the packed
    // off-diagonal derivative splits evenly across the two tied entries.
    let g_cov = Matrix2::new(
        grads.cov.a,
        0.5 * grads.cov.b,
        0.5 * grads.cov.b,
        grads.cov.c,
    );

    // cov2 = J S J^T  =>  dS = J^T G J,  dJ = 2 G J S.
    let d_sigma_cam: Matrix3<f64> = jac.transpose() * g_cov * jac;
    let d_jac: Matrix2x3 = g_cov * jac * sigma_cam * 2.0;

    // sigma_cam = R Sw R^T  =>  dSw = R^T dScam R,  dR += 2 dScam R Sw.
    let d_sigma_world = cam.rotation.transpose() * d_sigma_cam * cam.rotation;
    let mut d_cam_rot: Matrix3<f64> = d_sigma_cam * cam.rotation * sigma_world * 2.0;

    // Sw = Rq D Rq^T  =>  dD = Rq^T dSw Rq,  dRq = 2 dSw Rq D.
    let d_diag = r_quat.transpose() * d_sigma_world * r_quat;
    let mut d_rquat: Matrix3<f64> = d_sigma_world * r_quat * d * 2.0;
    let d_scale = Vector3::new(
        2.0 * g.scale.x * d_diag[(0, 0)],
        2.0 * g.scale.y * d_diag[(1, 1)],
        2.0 * g.scale.z * d_diag[(2, 2)],
    );

    // Normal path: n = sign * R * (Rq e_k).
    let k = projected.shortest_axis;
    let sign = projected.normal_sign;
    let axis_world = r_quat.column(k).into_owned();
    let d_axis_world = cam.rotation.transpose() * grads.normal * sign;
    for row in 0..3 {
        d_rquat[(row, k)] += d_axis_world[row];
    }
    d_cam_rot += grads.normal * axis_world.transpose() * sign;

    let d_rotation =
        quat_to_matrix_backward(&g.rotation, &d_rquat).expect("non-degenerate rotation");

    // Center, depth, and the Jacobian's own dependence on the mean.
    let mut d_p = Vector3::new(
        grads.center.x * cam.fx / z,
        grads.center.y * cam.fy / z,
        -grads.center.x * cam.fx * x / z2 - grads.center.y * cam.fy * y / z2 + grads.depth,
    );
    d_p.x += d_jac[(0, 2)] * (-cam.fx / z2);
    d_p.y += d_jac[(1, 2)] * (-cam.fy / z2);
    d_p.z += d_jac[(0, 0)] * (-cam.fx / z2)
        + d_jac[(0, 2)] * (2.0 * cam.fx * x / (z2 * z))
        + d_jac[(1, 1)] * (-cam.fy / z2)
        + d_jac[(1, 2)] * (2.0 * cam.fy * y / (z2 * z));

    // p = R m + t.
    let d_mean = cam.rotation.transpose() * d_p;
    d_cam_rot += d_p * g.mean.transpose();

    (
        GaussianGrads {
            mean: d_mean,
            scale: d_scale,
            rotation: d_rotation,
            opacity: grads.opacity,
            color: grads.color,
        },
        CameraGrads {
            rotation: d_cam_rot,
            translation: d_p,
        },
    )
}
