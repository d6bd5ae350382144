//! Regularization towards the teacher geometry: confidence-weighted depth,
//! L1 camera translation, geodesic camera rotation.

use nalgebra::{Matrix3, Vector3};

use crate::buffer::{DepthMap, Grid};
use crate::error::{Error, Result};

/// Confidence-weighted L1 depth distance: sum(conf * |d - d_t|) / sum(conf).
/// Zero (with zero gradients) when the teacher confidence vanishes
/// everywhere. Pixels with non-finite depth on either side are skipped.
pub fn loss_teacher_depth(student: &[f64], teacher: &DepthMap) -> Result<(f64, Vec<f64>)> {
    let n = teacher.width() * teacher.height();
    if student.len() != n {
        return Err(Error::shape(format!("{n} depths"), format!("{}", student.len())));
    }
    let mut conf_sum = 0.0;
    let mut total = 0.0;
    let mut signs = vec![0.0; n];
    for i in 0..n {
        let conf = teacher.confidence_data()[i];
        let d = student[i];
        let t = teacher.depth_data()[i];
        if conf == 0.0 || !d.is_finite() || !t.is_finite() {
            continue;
        }
        conf_sum += conf;
        let diff = d - t;
        total += conf * diff.abs();
        signs[i] = conf * diff.signum();
    }
    if conf_sum == 0.0 {
        return Ok((0.0, vec![0.0; n]));
    }
    let grad = signs.iter().map(|s| s / conf_sum).collect();
    Ok((total / conf_sum, grad))
}

/// L1 distance between camera translations.
pub fn loss_teacher_translation(
    t: &Vector3<f64>,
    t_teacher: &Vector3<f64>,
) -> (f64, Vector3<f64>) {
    let d = t - t_teacher;
    let value = d.x.abs() + d.y.abs() + d.z.abs();
    (value, Vector3::new(d.x.signum(), d.y.signum(), d.z.signum()))
}

/// Geodesic distance between rotations: arccos((tr(R^T R_t) - 1) / 2), with
/// the argument clamped into [-1, 1]. The gradient is w.r.t. the free
/// entries of R and is zero at the (non-differentiable) endpoints.
pub fn loss_teacher_rotation(r: &Matrix3<f64>, r_teacher: &Matrix3<f64>) -> (f64, Matrix3<f64>) {
    let trace = (r.transpose() * r_teacher).trace();
    let u = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0);
    let value = u.acos();
    let grad = if u.abs() >= 1.0 - 1e-12 {
        Matrix3::zeros()
    } else {
        r_teacher * (-1.0 / (1.0 - u * u).sqrt() / 2.0)
    };
    (value, grad)
}

/// All three teacher terms for one view.
#[derive(Debug, Clone)]
pub struct TeacherLosses {
    pub depth: f64,
    pub translation: f64,
    pub rotation: f64,
    pub grad_depth: Vec<f64>,
    pub grad_translation: Vector3<f64>,
    pub grad_rotation: Matrix3<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn loss_teacher(
    student_depth: &[f64],
    teacher_depth: &DepthMap,
    t: &Vector3<f64>,
    t_teacher: &Vector3<f64>,
    r: &Matrix3<f64>,
    r_teacher: &Matrix3<f64>,
) -> Result<TeacherLosses> {
    let (depth, grad_depth) = loss_teacher_depth(student_depth, teacher_depth)?;
    let (translation, grad_translation) = loss_teacher_translation(t, t_teacher);
    let (rotation, grad_rotation) = loss_teacher_rotation(r, r_teacher);
    Ok(TeacherLosses {
        depth,
        translation,
        rotation,
        grad_depth,
        grad_translation,
        grad_rotation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rotation_xyz(a: f64, b: f64, c: f64) -> Matrix3<f64> {
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, a.cos(), -a.sin(), 0.0, a.sin(), a.cos());
        let ry = Matrix3::new(b.cos(), 0.0, b.sin(), 0.0, 1.0, 0.0, -b.sin(), 0.0, b.cos());
        let rz = Matrix3::new(c.cos(), -c.sin(), 0.0, c.sin(), c.cos(), 0.0, 0.0, 0.0, 1.0);
        rz * ry * rx
    }

    #[test]
    fn student_equals_teacher_is_zero() {
        let teacher = DepthMap::constant(4, 4, 2.0);
        let r = rotation_xyz(0.3, -0.2, 0.9);
        let t = Vector3::new(0.1, 0.2, 0.3);
        let out = loss_teacher(teacher.depth_data(), &teacher, &t, &t, &r, &r).unwrap();
        assert_eq!(out.depth, 0.0);
        assert_eq!(out.translation, 0.0);
        assert_eq!(out.rotation, 0.0);
    }

    #[test]
    fn opposite_rotation_is_pi() {
        let r = Matrix3::identity();
        let r180 = rotation_xyz(std::f64::consts::PI, 0.0, 0.0);
        let (v, _) = loss_teacher_rotation(&r, &r180);
        assert!((v - std::f64::consts::PI).abs() < 1e-9);
    }

    #[test]
    fn zero_confidence_annuls_depth_loss() {
        let teacher = DepthMap::new(2, 2, vec![1.0; 4], vec![0.0; 4]).unwrap();
        let (v, g) = loss_teacher_depth(&[5.0, 5.0, 5.0, 5.0], &teacher).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn confidence_weighting() {
        let teacher = DepthMap::new(2, 1, vec![1.0, 1.0], vec![1.0, 0.5]).unwrap();
        // |2-1| = 1 at conf 1, |4-1| = 3 at conf 0.5 -> (1 + 1.5) / 1.5
        let (v, _) = loss_teacher_depth(&[2.0, 4.0], &teacher).unwrap();
        assert!((v - 2.5 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn teacher_depth_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(131);
        let eps = 1e-6;
        let teacher = DepthMap::new(
            4,
            3,
            (0..12).map(|_| rng.gen_range(1.0..3.0)).collect(),
            (0..12).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let student: Vec<f64> = (0..12).map(|_| rng.gen_range(1.0..3.0)).collect();
        let (_, grad) = loss_teacher_depth(&student, &teacher).unwrap();
        for k in 0..12 {
            let mut hi = student.clone();
            let mut lo = student.clone();
            hi[k] += eps;
            lo[k] -= eps;
            let fd = (loss_teacher_depth(&hi, &teacher).unwrap().0
                - loss_teacher_depth(&lo, &teacher).unwrap().0)
                / (2.0 * eps);
            assert!((fd - grad[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(132);
        let eps = 1e-7;
        for _ in 0..20 {
            let r = rotation_xyz(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let rt = rotation_xyz(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let (v, grad) = loss_teacher_rotation(&r, &rt);
            if v < 0.05 || v > std::f64::consts::PI - 0.05 {
                continue; // endpoints are non-differentiable
            }
            for row in 0..3 {
                for col in 0..3 {
                    let mut hi = r;
                    let mut lo = r;
                    hi[(row, col)] += eps;
                    lo[(row, col)] -= eps;
                    let fd = (loss_teacher_rotation(&hi, &rt).0
                        - loss_teacher_rotation(&lo, &rt).0)
                        / (2.0 * eps);
                    assert!(
                        (fd - grad[(row, col)]).abs() < 1e-5,
                        "R[{row},{col}]: {fd} vs {}",
                        grad[(row, col)]
                    );
                }
            }
        }
    }

    #[test]
    fn rotation_invariant_to_common_left_multiplication() {
        let mut rng = StdRng::seed_from_u64(133);
        let r = rotation_xyz(0.2, 0.4, -0.1);
        let rt = rotation_xyz(-0.3, 0.1, 0.5);
        let (v0, _) = loss_teacher_rotation(&r, &rt);
        for _ in 0..10 {
            let q = rotation_xyz(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let (v1, _) = loss_teacher_rotation(&(q * r), &(q * rt));
            assert!((v0 - v1).abs() < 1e-10);
        }
    }

    #[test]
    fn translation_gradient_is_sign_vector() {
        let t = Vector3::new(1.0, -2.0, 3.0);
        let tt = Vector3::new(0.5, -1.0, 4.0);
        let (v, g) = loss_teacher_translation(&t, &tt);
        assert!((v - 2.5).abs() < 1e-12);
        assert_eq!(g, Vector3::new(1.0, -1.0, -1.0));
    }
}
