//! Gaussian primitives and quaternion math.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Unit-norm rotation, stored (w, x, y, z).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Result<Quaternion> {
        let n = self.norm();
        if n < 1e-300 {
            return Err(Error::DegenerateQuaternion);
        }
        Ok(Quaternion::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Hamilton product `self * rhs`.
    pub fn multiply(&self, rhs: &Quaternion) -> Quaternion {
        let (aw, ax, ay, az) = (self.w, self.x, self.y, self.z);
        let (bw, bx, by, bz) = (rhs.w, rhs.x, rhs.y, rhs.z);
        Quaternion::new(
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by + ay * bw + az * bx - ax * bz,
            aw * bz + az * bw + ax * by - ay * bx,
        )
    }

    /// Gradient of `a * b` w.r.t. `b` for fixed `a`: the product is linear,
    /// so this is the transpose of the left-multiplication matrix.
    pub fn multiply_backward_rhs(a: &Quaternion, grad_out: &Quaternion) -> Quaternion {
        let (aw, ax, ay, az) = (a.w, a.x, a.y, a.z);
        let g = [grad_out.w, grad_out.x, grad_out.y, grad_out.z];
        Quaternion::new(
            aw * g[0] + ax * g[1] + ay * g[2] + az * g[3],
            -ax * g[0] + aw * g[1] + az * g[2] - ay * g[3],
            -ay * g[0] - az * g[1] + aw * g[2] + ax * g[3],
            -az * g[0] + ay * g[1] - ax * g[2] + aw * g[3],
        )
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }
}

/// Rotation matrix of a (not necessarily unit) quaternion; normalizes first.
pub fn quat_to_matrix(q: &Quaternion) -> Result<Matrix3<f64>> {
    let q = q.normalized()?;
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Partial derivatives of [`quat_to_matrix`] w.r.t. the four *unnormalized*
/// components, i.e. the chain through the internal normalization is included.
pub fn quat_to_matrix_partials(q: &Quaternion) -> Result<[Matrix3<f64>; 4]> {
    let n = q.norm();
    if n < 1e-300 {
        return Err(Error::DegenerateQuaternion);
    }
    let u = q.normalized()?;
    let (w, x, y, z) = (u.w, u.x, u.y, u.z);
    // Partials w.r.t. the normalized components.
    let dw = Matrix3::new(
        0.0, -2.0 * z, 2.0 * y, //
        2.0 * z, 0.0, -2.0 * x, //
        -2.0 * y, 2.0 * x, 0.0,
    );
    let dx = Matrix3::new(
        0.0, 2.0 * y, 2.0 * z, //
        2.0 * y, -4.0 * x, -2.0 * w, //
        2.0 * z, 2.0 * w, -4.0 * x,
    );
    let dy = Matrix3::new(
        -4.0 * y, 2.0 * x, 2.0 * w, //
        2.0 * x, 0.0, 2.0 * z, //
        -2.0 * w, 2.0 * z, -4.0 * y,
    );
    let dz = Matrix3::new(
        -4.0 * z, -2.0 * w, 2.0 * x, //
        2.0 * w, -4.0 * z, 2.0 * y, //
        2.0 * x, 2.0 * y, 0.0,
    );
    let unit = [dw, dx, dy, dz];
    let uhat = [w, x, y, z];
    // d\hat{q}_j / dq_k = (delta_jk - \hat{q}_j \hat{q}_k) / n
    let mut out = [Matrix3::zeros(); 4];
    for k in 0..4 {
        let mut m = Matrix3::zeros();
        for j in 0..4 {
            let coeff = ((j == k) as usize as f64 - uhat[j] * uhat[k]) / n;
            m += unit[j] * coeff;
        }
        out[k] = m;
    }
    Ok(out)
}

/// Pull a loss gradient on the rotation matrix back to the quaternion.
pub fn quat_to_matrix_backward(q: &Quaternion, grad_matrix: &Matrix3<f64>) -> Result<[f64; 4]> {
    let partials = quat_to_matrix_partials(q)?;
    let mut g = [0.0; 4];
    for k in 0..4 {
        g[k] = grad_matrix.component_mul(&partials[k]).sum();
    }
    Ok(g)
}

/// Quaternion of a rotation matrix (Shepperd's method). The matrix must be a
/// proper rotation.
pub fn matrix_to_quat(m: &Matrix3<f64>) -> Quaternion {
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        Quaternion::new(
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        )
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        Quaternion::new(
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        )
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        Quaternion::new(
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        Quaternion::new(
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        )
    };
    q.normalized().expect("rotation matrix yields unit quaternion")
}

/// One 3D Gaussian primitive. Frame (camera or world) is contextual.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vector3<f64>,
    /// Per-axis standard deviations, strictly positive (scene units).
    pub scale: Vector3<f64>,
    pub rotation: Quaternion,
    /// Base opacity in [0, 1].
    pub opacity: f64,
    /// Multi-view fusion weight in [0, 1].
    pub confidence: f64,
    /// RGB in [0, 1].
    pub color: Vector3<f64>,
}

impl Gaussian {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale.x > 0.0 && self.scale.y > 0.0 && self.scale.z > 0.0) {
            return Err(Error::shape("positive scales", format!("{:?}", self.scale)));
        }
        if !(0.0..=1.0).contains(&self.opacity) || !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::shape(
                "opacity/confidence in [0,1]",
                format!("{} / {}", self.opacity, self.confidence),
            ));
        }
        Ok(())
    }

    /// Effective opacity used when rendering the fused model.
    pub fn effective_opacity(&self) -> f64 {
        self.opacity * self.confidence
    }
}

/// 3D covariance `R diag(s^2) R^T`; symmetric PSD with eigenvalues `s^2`.
pub fn covariance3d(g: &Gaussian) -> Matrix3<f64> {
    let r = quat_to_matrix(&g.rotation).expect("gaussian rotation is non-degenerate");
    let d = Matrix3::from_diagonal(&Vector3::new(
        g.scale.x * g.scale.x,
        g.scale.y * g.scale.y,
        g.scale.z * g.scale.z,
    ));
    r * d * r.transpose()
}

/// World-frame Gaussians plus, for each, the input view it was decoded from.
#[derive(Debug, Clone, Default)]
pub struct GaussianModel {
    pub gaussians: Vec<Gaussian>,
    pub source_view: Vec<usize>,
}

impl GaussianModel {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn validate(&self, num_views: usize) -> Result<()> {
        if self.gaussians.len() != self.source_view.len() {
            return Err(Error::shape(
                format!("{} source views", self.gaussians.len()),
                format!("{}", self.source_view.len()),
            ));
        }
        for &v in &self.source_view {
            if v >= num_views {
                return Err(Error::shape(
                    format!("source view < {num_views}"),
                    format!("{v}"),
                ));
            }
        }
        for g in &self.gaussians {
            g.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    pub(crate) fn random_quat(rng: &mut impl Rng) -> Quaternion {
        Quaternion::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
    }

    #[test]
    fn identity_quat_gives_identity_matrix() {
        let m = quat_to_matrix(&Quaternion::IDENTITY).unwrap();
        assert_relative_eq!(m, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn half_angle_is_rotation_about_x() {
        let half = std::f64::consts::FRAC_PI_4;
        let q = Quaternion::new(half.cos(), half.sin(), 0.0, 0.0);
        let m = quat_to_matrix(&q).unwrap();
        let expected = Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        assert_relative_eq!(m, expected, epsilon = 1e-12);
    }

    #[test]
    fn random_quats_give_orthonormal_matrices() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..200 {
            let q = random_quat(&mut rng);
            if q.norm() < 1e-3 {
                continue;
            }
            let m = quat_to_matrix(&q).unwrap();
            assert!((m * m.transpose() - Matrix3::identity()).norm() < 1e-12);
            assert!((m.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_quat_is_degenerate() {
        assert!(matches!(
            quat_to_matrix(&Quaternion::new(0.0, 0.0, 0.0, 0.0)),
            Err(Error::DegenerateQuaternion)
        ));
    }

    #[test]
    fn matrix_round_trip() {
        let mut rng = StdRng::seed_from_u64(12);
        for _ in 0..100 {
            let q = random_quat(&mut rng).normalized().unwrap();
            let m = quat_to_matrix(&q).unwrap();
            let q2 = matrix_to_quat(&m);
            // q and -q encode the same rotation.
            let dot = q.w * q2.w + q.x * q2.x + q.y * q2.y + q.z * q2.z;
            assert!(dot.abs() > 1.0 - 1e-9, "dot = {dot}");
        }
    }

    #[test]
    fn multiply_matches_matrix_product() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..50 {
            let a = random_quat(&mut rng).normalized().unwrap();
            let b = random_quat(&mut rng).normalized().unwrap();
            let lhs = quat_to_matrix(&a.multiply(&b)).unwrap();
            let rhs = quat_to_matrix(&a).unwrap() * quat_to_matrix(&b).unwrap();
            assert!((lhs - rhs).norm() < 1e-12);
        }
    }

    #[test]
    fn matrix_partials_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(14);
        let eps = 1e-6;
        for _ in 0..50 {
            let q = random_quat(&mut rng);
            if q.norm() < 0.3 {
                continue;
            }
            let partials = quat_to_matrix_partials(&q).unwrap();
            for k in 0..4 {
                let mut lo = q.as_array();
                let mut hi = q.as_array();
                lo[k] -= eps;
                hi[k] += eps;
                let mlo =
                    quat_to_matrix(&Quaternion::new(lo[0], lo[1], lo[2], lo[3])).unwrap();
                let mhi =
                    quat_to_matrix(&Quaternion::new(hi[0], hi[1], hi[2], hi[3])).unwrap();
                let fd = (mhi - mlo) / (2.0 * eps);
                assert!(
                    (fd - partials[k]).norm() < 1e-7,
                    "component {k}: fd {fd} vs analytic {}",
                    partials[k]
                );
            }
        }
    }

    fn random_gaussian(rng: &mut impl Rng) -> Gaussian {
        Gaussian {
            mean: Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ),
            scale: Vector3::new(
                rng.gen_range(0.1..2.0),
                rng.gen_range(0.1..2.0),
                rng.gen_range(0.1..2.0),
            ),
            rotation: random_quat(rng).normalized().unwrap(),
            opacity: rng.gen_range(0.0..1.0),
            confidence: rng.gen_range(0.0..1.0),
            color: Vector3::new(0.5, 0.5, 0.5),
        }
    }

    #[test]
    fn isotropic_covariance_is_spherical() {
        let mut rng = StdRng::seed_from_u64(15);
        let mut g = random_gaussian(&mut rng);
        g.scale = Vector3::new(0.7, 0.7, 0.7);
        let cov = covariance3d(&g);
        assert_relative_eq!(cov, Matrix3::identity() * 0.49, epsilon = 1e-12);
    }

    #[test]
    fn axis_aligned_covariance_is_diagonal() {
        let g = Gaussian {
            mean: Vector3::zeros(),
            scale: Vector3::new(1.0, 2.0, 3.0),
            rotation: Quaternion::IDENTITY,
            opacity: 1.0,
            confidence: 1.0,
            color: Vector3::zeros(),
        };
        let cov = covariance3d(&g);
        assert_relative_eq!(
            cov,
            Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)),
            epsilon = 1e-15
        );
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let mut rng = StdRng::seed_from_u64(16);
        for _ in 0..100 {
            let g = random_gaussian(&mut rng);
            let cov = covariance3d(&g);
            assert!((cov - cov.transpose()).norm() < 1e-12, "symmetric");
            let mut eig: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
            let mut expected: Vec<f64> =
                [g.scale.x, g.scale.y, g.scale.z].iter().map(|s| s * s).collect();
            eig.sort_by(f64::total_cmp);
            expected.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-9, "eig {a} vs scale^2 {b}");
            }
        }
    }

    #[test]
    fn model_validation() {
        let g = Gaussian {
            mean: Vector3::zeros(),
            scale: Vector3::new(1.0, 1.0, 1.0),
            rotation: Quaternion::IDENTITY,
            opacity: 0.5,
            confidence: 0.5,
            color: Vector3::zeros(),
        };
        let model = GaussianModel {
            gaussians: vec![g],
            source_view: vec![2],
        };
        assert!(model.validate(3).is_ok());
        assert!(model.validate(2).is_err());
    }
}
