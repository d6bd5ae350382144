//! Analytic test scenes: ground-truth cameras, depth maps and images for
//! planes, cubes and slanted-edge targets, plus optionally perturbed teacher
//! copies. Every pixel is ray-cast exactly, so depth and appearance are
//! known in closed form.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::buffer::{DepthMap, ImageBuffer};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::PATCH_SIZE;

/// Depth written for rays that miss all geometry; their confidence is zero.
pub const MISS_DEPTH: f64 = f64::INFINITY;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub texture: TextureSpec,
    pub cameras: RingSpec,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    #[serde(default)]
    pub teacher_noise: NoiseSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SceneKind {
    /// Textured plane z = 0, cameras on the +z side.
    TexturedPlane,
    /// Axis-aligned cube at the origin in front of a backdrop plane.
    Cube {
        size: f64,
        /// Backdrop plane z = -backdrop (must sit behind the cube).
        backdrop: f64,
    },
    /// Two-tone plane split by a line; the edge position is known in closed
    /// form in every view.
    SlantedEdge {
        /// Angle of the edge normal from the +x axis, degrees. Small values
        /// give a nearly vertical edge.
        angle_deg: f64,
        /// Signed distance of the edge from the origin (scene units).
        offset: f64,
        dark: [f64; 3],
        light: [f64; 3],
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TextureSpec {
    Checker {
        scale: f64,
        color_a: [f64; 3],
        color_b: [f64; 3],
    },
    Grating {
        frequency: f64,
        angle_deg: f64,
        color_a: [f64; 3],
        color_b: [f64; 3],
    },
    ValueNoise {
        scale: f64,
        octaves: u32,
        color_a: [f64; 3],
        color_b: [f64; 3],
    },
}

/// Cameras on a ring around the +z axis, looking at `look_at`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RingSpec {
    pub count: usize,
    pub radius: f64,
    /// Polar angle from the +z axis, degrees. 0 looks straight down -z.
    pub tilt_deg: f64,
    /// Per-camera tilt jitter (uniform in +-jitter), degrees, seeded.
    #[serde(default)]
    pub jitter_deg: f64,
    pub fov_deg: f64,
    #[serde(default)]
    pub look_at: [f64; 3],
    #[serde(default)]
    pub start_azimuth_deg: f64,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Rotation noise: std of a random rotation vector, degrees.
    pub sigma_rot_deg: f64,
    /// Translation noise: per-axis std, scene units.
    pub sigma_t: f64,
    /// Relative depth noise: per-pixel std of the multiplicative factor.
    pub sigma_depth: f64,
}

impl NoiseSpec {
    pub fn is_zero(&self) -> bool {
        self.sigma_rot_deg == 0.0 && self.sigma_t == 0.0 && self.sigma_depth == 0.0
    }
}

/// Input views plus the (possibly perturbed) teacher geometry.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub images: Vec<ImageBuffer>,
    pub cameras: Vec<Camera>,
    pub depths: Vec<DepthMap>,
    pub teacher_cameras: Vec<Camera>,
    pub teacher_depths: Vec<DepthMap>,
}

impl SceneBundle {
    pub fn num_views(&self) -> usize {
        self.images.len()
    }

    pub fn validate(&self) -> Result<()> {
        use crate::buffer::Grid;
        let n = self.images.len();
        if self.cameras.len() != n
            || self.depths.len() != n
            || self.teacher_cameras.len() != n
            || self.teacher_depths.len() != n
        {
            return Err(Error::shape(
                format!("{n} views in every field"),
                format!(
                    "{} cams / {} depths / {} teacher cams / {} teacher depths",
                    self.cameras.len(),
                    self.depths.len(),
                    self.teacher_cameras.len(),
                    self.teacher_depths.len()
                ),
            ));
        }
        for i in 0..n {
            let (w, h) = (self.images[i].width(), self.images[i].height());
            if self.depths[i].width() != w
                || self.depths[i].height() != h
                || self.cameras[i].width != w
                || self.cameras[i].height != h
                || self.teacher_depths[i].width() != w
                || self.teacher_depths[i].height() != h
            {
                return Err(Error::shape(
                    format!("view {i}: consistent {w}x{h}"),
                    "mismatched resolutions".to_string(),
                ));
            }
        }
        Ok(())
    }
}

fn hash2(ix: i64, iy: i64, seed: u64) -> f64 {
    // splitmix64 over the packed lattice coordinates
    let mut z = (ix as u64)
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add((iy as u64).wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(seed.wrapping_mul(0x94d049bb133111eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(u: f64, v: f64, seed: u64) -> f64 {
    let iu = u.floor();
    let iv = v.floor();
    let fu = smoothstep(u - iu);
    let fv = smoothstep(v - iv);
    let (iu, iv) = (iu as i64, iv as i64);
    let v00 = hash2(iu, iv, seed);
    let v10 = hash2(iu + 1, iv, seed);
    let v01 = hash2(iu, iv + 1, seed);
    let v11 = hash2(iu + 1, iv + 1, seed);
    (1.0 - fv) * ((1.0 - fu) * v00 + fu * v10) + fv * ((1.0 - fu) * v01 + fu * v11)
}

impl TextureSpec {
    /// Scalar pattern in [0, 1] at surface coordinates (u, v).
    fn pattern(&self, u: f64, v: f64, seed: u64) -> f64 {
        match self {
            TextureSpec::Checker { scale, .. } => {
                let p = (u / scale).floor() + (v / scale).floor();
                if (p as i64).rem_euclid(2) == 0 {
                    0.0
                } else {
                    1.0
                }
            }
            TextureSpec::Grating {
                frequency,
                angle_deg,
                ..
            } => {
                let a = angle_deg.to_radians();
                let phase =
                    2.0 * std::f64::consts::PI * frequency * (u * a.cos() + v * a.sin());
                0.5 + 0.5 * phase.sin()
            }
            TextureSpec::ValueNoise { scale, octaves, .. } => {
                let mut total = 0.0;
                let mut amp = 1.0;
                let mut norm = 0.0;
                let mut freq = 1.0 / scale;
                for octave in 0..(*octaves).max(1) {
                    total +=
                        amp * value_noise(u * freq, v * freq, seed.wrapping_add(octave as u64));
                    norm += amp;
                    amp *= 0.5;
                    freq *= 2.0;
                }
                total / norm
            }
        }
    }

    fn color(&self, u: f64, v: f64, seed: u64) -> [f64; 3] {
        let (a, b) = match self {
            TextureSpec::Checker { color_a, color_b, .. }
            | TextureSpec::Grating { color_a, color_b, .. }
            | TextureSpec::ValueNoise { color_a, color_b, .. } => (color_a, color_b),
        };
        let t = self.pattern(u, v, seed);
        [
            a[0] + t * (b[0] - a[0]),
            a[1] + t * (b[1] - a[1]),
            a[2] + t * (b[2] - a[2]),
        ]
    }
}

/// Build the ring cameras for a spec (deterministic under the spec seed).
pub fn ring_cameras(spec: &SceneSpec) -> Result<Vec<Camera>> {
    let ring = &spec.cameras;
    if ring.count == 0 || ring.radius <= 0.0 {
        return Err(Error::InvalidSpec(format!(
            "ring needs count >= 1 and positive radius (count={}, radius={})",
            ring.count, ring.radius
        )));
    }
    if !(1.0..170.0).contains(&ring.fov_deg) {
        return Err(Error::InvalidSpec(format!(
            "fov {} out of range",
            ring.fov_deg
        )));
    }
    if ring.tilt_deg + ring.jitter_deg.abs() + ring.fov_deg / 2.0 >= 85.0 {
        return Err(Error::InvalidSpec(
            "tilt + fov/2 must stay below 85 degrees so every ray hits the scene".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let look_at = Vector3::new(ring.look_at[0], ring.look_at[1], ring.look_at[2]);
    let f = (spec.width as f64 / 2.0) / (ring.fov_deg.to_radians() / 2.0).tan();
    let mut cams = Vec::with_capacity(ring.count);
    for k in 0..ring.count {
        let azimuth =
            (ring.start_azimuth_deg + 360.0 * k as f64 / ring.count as f64).to_radians();
        let jitter = if ring.jitter_deg > 0.0 {
            rng.gen_range(-ring.jitter_deg..ring.jitter_deg)
        } else {
            0.0
        };
        let tilt = (ring.tilt_deg + jitter).to_radians();
        let dir = Vector3::new(
            tilt.sin() * azimuth.cos(),
            tilt.sin() * azimuth.sin(),
            tilt.cos(),
        );
        let position = look_at + dir * ring.radius;
        let forward = (look_at - position).normalize();
        let up_hint = if forward.y.abs() < 0.9 {
            Vector3::new(0.0, 1.0, 0.0)
        } else {
            Vector3::new(1.0, 0.0, 0.0)
        };
        let x_cam = up_hint.cross(&forward).normalize();
        let y_cam = forward.cross(&x_cam);
        let rotation = Matrix3::from_rows(&[
            x_cam.transpose(),
            y_cam.transpose(),
            forward.transpose(),
        ]);
        let translation = -(rotation * position);
        cams.push(Camera::new(
            f,
            f,
            spec.width as f64 / 2.0,
            spec.height as f64 / 2.0,
            rotation,
            translation,
            spec.width,
            spec.height,
        )?);
    }
    Ok(cams)
}

struct Hit {
    depth: f64,
    color: [f64; 3],
}

/// Cast the ray through pixel coordinates (u, v) and return the first hit.
fn trace(spec: &SceneSpec, cam: &Camera, u: f64, v: f64) -> Option<Hit> {
    let origin = cam.center();
    // The parameter t along this direction equals camera-space depth
    // because the camera-frame direction has unit z.
    let dir = cam.rotation.transpose() * cam.ray_direction(u, v);
    let plane_hit = |plane_z: f64| -> Option<(f64, Vector3<f64>)> {
        if dir.z.abs() < 1e-12 {
            return None;
        }
        let t = (plane_z - origin.z) / dir.z;
        if t <= 0.0 {
            return None;
        }
        Some((t, origin + dir * t))
    };
    match &spec.kind {
        SceneKind::TexturedPlane => {
            let (t, p) = plane_hit(0.0)?;
            Some(Hit {
                depth: t,
                color: spec.texture.color(p.x, p.y, spec.seed),
            })
        }
        SceneKind::SlantedEdge {
            angle_deg,
            offset,
            dark,
            light,
        } => {
            let (t, p) = plane_hit(0.0)?;
            let a = angle_deg.to_radians();
            let side = p.x * a.cos() + p.y * a.sin();
            Some(Hit {
                depth: t,
                color: if side < *offset { *dark } else { *light },
            })
        }
        SceneKind::Cube { size, backdrop } => {
            let half = size / 2.0;
            let mut t_enter = f64::NEG_INFINITY;
            let mut t_exit = f64::INFINITY;
            let mut enter_axis = 0usize;
            for axis in 0..3 {
                let o = origin[axis];
                let d = dir[axis];
                if d.abs() < 1e-12 {
                    if o.abs() > half {
                        t_enter = f64::INFINITY;
                        break;
                    }
                    continue;
                }
                let mut t0 = (-half - o) / d;
                let mut t1 = (half - o) / d;
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                if t0 > t_enter {
                    t_enter = t0;
                    enter_axis = axis;
                }
                t_exit = t_exit.min(t1);
            }
            if t_enter <= t_exit && t_enter > 0.0 && t_enter.is_finite() {
                let p = origin + dir * t_enter;
                let (ua, va) = match enter_axis {
                    0 => (1, 2),
                    1 => (0, 2),
                    _ => (0, 1),
                };
                let face = enter_axis * 2 + usize::from(p[enter_axis] < 0.0);
                let tint = [1.0, 0.55, 0.85, 0.4, 0.7, 0.25][face];
                let c = spec.texture.color(p[ua], p[va], spec.seed);
                return Some(Hit {
                    depth: t_enter,
                    color: [c[0] * tint, c[1] * tint, c[2] * tint],
                });
            }
            let (t, p) = plane_hit(-backdrop)?;
            let c = spec.texture.color(p.x, p.y, spec.seed.wrapping_add(17));
            Some(Hit {
                depth: t,
                color: [c[0] * 0.35, c[1] * 0.35, c[2] * 0.35],
            })
        }
    }
}

/// Render all views analytically.
pub fn generate(spec: &SceneSpec) -> Result<SceneBundle> {
    if spec.width % PATCH_SIZE != 0 || spec.height % PATCH_SIZE != 0 || spec.width == 0 {
        return Err(Error::InvalidSpec(format!(
            "resolution {}x{} must be a multiple of {PATCH_SIZE}",
            spec.width, spec.height
        )));
    }
    if let SceneKind::Cube { size, backdrop } = &spec.kind {
        if *size <= 0.0 || *backdrop <= *size {
            return Err(Error::InvalidSpec(
                "cube needs positive size and a backdrop behind it".into(),
            ));
        }
    }
    let cameras = ring_cameras(spec)?;
    let mut images = Vec::with_capacity(cameras.len());
    let mut depths = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let mut image = ImageBuffer::new(spec.width, spec.height, 3);
        let mut depth = vec![MISS_DEPTH; spec.width * spec.height];
        let mut confidence = vec![0.0; spec.width * spec.height];
        for y in 0..spec.height {
            for x in 0..spec.width {
                let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
                if let Some(hit) = trace(spec, cam, u, v) {
                    image.set_pixel(x, y, &hit.color);
                    depth[y * spec.width + x] = hit.depth;
                    confidence[y * spec.width + x] = 1.0;
                }
            }
        }
        images.push(image);
        depths.push(DepthMap::new(spec.width, spec.height, depth, confidence)?);
    }
    let bundle = SceneBundle {
        images,
        teacher_cameras: cameras.clone(),
        teacher_depths: depths.clone(),
        cameras,
        depths,
    };
    if spec.teacher_noise.is_zero() {
        Ok(bundle)
    } else {
        let n = spec.teacher_noise;
        Ok(perturb_teacher(
            &bundle,
            n.sigma_rot_deg,
            n.sigma_t,
            n.sigma_depth,
            spec.seed.wrapping_add(0x7ea),
        ))
    }
}

fn rotation_from_rotvec(w: &Vector3<f64>) -> Matrix3<f64> {
    let angle = w.norm();
    if angle < 1e-12 {
        return Matrix3::identity();
    }
    let axis = w / angle;
    let k = Matrix3::new(
        0.0, -axis.z, axis.y, //
        axis.z, 0.0, -axis.x, //
        -axis.y, axis.x, 0.0,
    );
    Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}

/// Replace the teacher geometry with noisy copies; ground truth stays in the
/// main fields. Deterministic under the seed.
pub fn perturb_teacher(
    bundle: &SceneBundle,
    sigma_rot_deg: f64,
    sigma_t: f64,
    sigma_depth: f64,
    seed: u64,
) -> SceneBundle {
    use crate::buffer::Grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut out = bundle.clone();
    out.teacher_cameras = bundle
        .cameras
        .iter()
        .map(|cam| {
            let mut noisy = cam.clone();
            if sigma_rot_deg > 0.0 {
                let s = sigma_rot_deg.to_radians();
                let w = Vector3::new(
                    normal.sample(&mut rng) * s,
                    normal.sample(&mut rng) * s,
                    normal.sample(&mut rng) * s,
                );
                noisy.rotation = rotation_from_rotvec(&w) * cam.rotation;
            }
            if sigma_t > 0.0 {
                noisy.translation += Vector3::new(
                    normal.sample(&mut rng) * sigma_t,
                    normal.sample(&mut rng) * sigma_t,
                    normal.sample(&mut rng) * sigma_t,
                );
            }
            noisy
        })
        .collect();
    out.teacher_depths = bundle
        .depths
        .iter()
        .map(|d| {
            let depth: Vec<f64> = d
                .depth_data()
                .iter()
                .map(|&v| {
                    if sigma_depth > 0.0 && v.is_finite() {
                        (v * (1.0 + normal.sample(&mut rng) * sigma_depth)).max(v * 0.01)
                    } else {
                        v
                    }
                })
                .collect();
            DepthMap::new(d.width(), d.height(), depth, d.confidence_data().to_vec())
                .expect("perturbed depth stays positive")
        })
        .collect();
    out
}

/// Closed-form image line of the slanted edge in one view, as normalized
/// coefficients (a, b, c) with a*x + b*y + c = 0 and a^2 + b^2 = 1, so
/// |a*x + b*y + c| is the pixel distance from the edge.
pub fn edge_line_in_view(spec: &SceneSpec, cam: &Camera) -> Option<(f64, f64, f64)> {
    let SceneKind::SlantedEdge {
        angle_deg, offset, ..
    } = &spec.kind
    else {
        return None;
    };
    let a = angle_deg.to_radians();
    let anchor = Vector3::new(offset * a.cos(), offset * a.sin(), 0.0);
    let along = Vector3::new(-a.sin(), a.cos(), 0.0);
    let p0 = cam.project(&(anchor - along * 0.5)).ok()?;
    let p1 = cam.project(&(anchor + along * 0.5)).ok()?;
    let (du, dv) = (p1.0 - p0.0, p1.1 - p0.1);
    let norm = (du * du + dv * dv).sqrt();
    if norm < 1e-12 {
        return None;
    }
    let (la, lb) = (dv / norm, -du / norm);
    let lc = -(la * p0.0 + lb * p0.1);
    Some((la, lb, lc))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn plane_spec(count: usize, tilt: f64) -> SceneSpec {
        SceneSpec {
            kind: SceneKind::TexturedPlane,
            texture: TextureSpec::Checker {
                scale: 0.25,
                color_a: [0.1, 0.2, 0.3],
                color_b: [0.9, 0.8, 0.7],
            },
            cameras: RingSpec {
                count,
                radius: 2.0,
                tilt_deg: tilt,
                jitter_deg: 0.0,
                fov_deg: 40.0,
                look_at: [0.0, 0.0, 0.0],
                start_azimuth_deg: 0.0,
            },
            width: 56,
            height: 56,
            seed: 7,
            teacher_noise: NoiseSpec::default(),
        }
    }

    #[test]
    fn fronto_parallel_plane_depth_is_radius() {
        let bundle = generate(&plane_spec(1, 0.0)).unwrap();
        bundle.validate().unwrap();
        for &d in bundle.depths[0].depth_data() {
            assert!((d - 2.0).abs() < 1e-9, "depth {d}");
        }
        // zero noise -> teacher copies identical
        assert_eq!(bundle.depths[0], bundle.teacher_depths[0]);
        assert_eq!(bundle.cameras[0], bundle.teacher_cameras[0]);
    }

    #[test]
    fn generation_is_deterministic() {
        let mut spec = plane_spec(3, 20.0);
        spec.cameras.jitter_deg = 2.0;
        spec.texture = TextureSpec::ValueNoise {
            scale: 0.3,
            octaves: 2,
            color_a: [0.0, 0.0, 0.0],
            color_b: [1.0, 1.0, 1.0],
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        for v in 0..3 {
            assert_eq!(a.images[v], b.images[v]);
            assert_eq!(a.depths[v], b.depths[v]);
            assert_eq!(a.cameras[v].rotation, b.cameras[v].rotation);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = plane_spec(1, 0.0);
        spec.width = 55;
        assert!(matches!(generate(&spec), Err(Error::InvalidSpec(_))));
        let mut spec = plane_spec(1, 0.0);
        spec.cameras.tilt_deg = 80.0;
        assert!(generate(&spec).is_err());
        let mut spec = plane_spec(1, 0.0);
        spec.cameras.count = 0;
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn multi_view_consistency_on_plane() {
        let bundle = generate(&plane_spec(3, 25.0)).unwrap();
        // Unproject view 0 pixels, reproject into view 1, compare with the
        // analytic plane depth there. The plane has no occlusion.
        let cam0 = &bundle.cameras[0];
        let cam1 = &bundle.cameras[1];
        for y in (0..56).step_by(7) {
            for x in (0..56).step_by(7) {
                let d = bundle.depths[0].get(x, y);
                let p = cam0.unproject(x as f64 + 0.5, y as f64 + 0.5, d).unwrap();
                assert!(p.z.abs() < 1e-9, "point on the plane");
                let Ok((u, v, depth)) = cam1.project(&p) else {
                    continue;
                };
                if !(0.0..56.0).contains(&u) || !(0.0..56.0).contains(&v) {
                    continue;
                }
                let origin = cam1.center();
                let dir = cam1.rotation.transpose() * cam1.ray_direction(u, v);
                let t = -origin.z / dir.z;
                assert!((depth - t).abs() < 1e-6, "reprojected depth");
            }
        }
    }

    #[test]
    fn cube_depth_matches_independent_slab_oracle() {
        let spec = SceneSpec {
            kind: SceneKind::Cube {
                size: 1.0,
                backdrop: 3.0,
            },
            texture: TextureSpec::Checker {
                scale: 0.2,
                color_a: [0.2, 0.2, 0.2],
                color_b: [0.8, 0.8, 0.8],
            },
            cameras: RingSpec {
                count: 2,
                radius: 3.0,
                tilt_deg: 55.0,
                jitter_deg: 0.0,
                fov_deg: 35.0,
                look_at: [0.0, 0.0, 0.0],
                start_azimuth_deg: 10.0,
            },
            width: 42,
            height: 42,
            seed: 3,
            teacher_noise: NoiseSpec::default(),
        };
        let bundle = generate(&spec).unwrap();

        // Independent oracle: intersect the six face planes directly and
        // keep the nearest in-bounds hit.
        let ray_box = |origin: Vector3<f64>, dir: Vector3<f64>, half: f64| -> Option<f64> {
            let mut best = f64::INFINITY;
            for axis in 0..3 {
                for &face in &[-half, half] {
                    if dir[axis].abs() < 1e-12 {
                        continue;
                    }
                    let t = (face - origin[axis]) / dir[axis];
                    if t <= 0.0 || t >= best {
                        continue;
                    }
                    let p = origin + dir * t;
                    let (a, b) = match axis {
                        0 => (1, 2),
                        1 => (0, 2),
                        _ => (0, 1),
                    };
                    if p[a].abs() <= half + 1e-12 && p[b].abs() <= half + 1e-12 {
                        best = t;
                    }
                }
            }
            best.is_finite().then_some(best)
        };

        for (view, cam) in bundle.cameras.iter().enumerate() {
            for y in (0..42).step_by(5) {
                for x in (0..42).step_by(5) {
                    let origin = cam.center();
                    let dir = cam.rotation.transpose()
                        * cam.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
                    let expected = match ray_box(origin, dir, 0.5) {
                        Some(t) => t,
                        None => (-3.0 - origin.z) / dir.z,
                    };
                    let got = bundle.depths[view].get(x, y);
                    assert!(
                        (got - expected).abs() < 1e-9,
                        "view {view} pixel ({x},{y}): {got} vs {expected}"
                    );
                }
            }
        }
    }

    #[test]
    fn teacher_perturbation_statistics() {
        let bundle = generate(&plane_spec(1, 10.0)).unwrap();
        let sigma_deg = 5.0;
        let mut errors = Vec::new();
        for seed in 0..1000 {
            let noisy = perturb_teacher(&bundle, sigma_deg, 0.0, 0.0, seed);
            let (err, _) = crate::losses::loss_teacher_rotation(
                &bundle.cameras[0].rotation,
                &noisy.teacher_cameras[0].rotation,
            );
            errors.push(err.to_degrees());
        }
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        // The rotation-vector norm is chi_3-distributed:
        // mean = sigma * 2 * sqrt(2/pi) ~= 1.596 sigma.
        let expected = sigma_deg * 2.0 * (2.0 / std::f64::consts::PI).sqrt();
        assert!(
            (mean - expected).abs() < 0.25,
            "rotation error mean {mean} vs chi_3 {expected}"
        );
    }

    #[test]
    fn perturbation_deterministic_and_identity_at_zero() {
        let bundle = generate(&plane_spec(2, 15.0)).unwrap();
        let a = perturb_teacher(&bundle, 1.0, 0.05, 0.02, 42);
        let b = perturb_teacher(&bundle, 1.0, 0.05, 0.02, 42);
        assert_eq!(a.teacher_cameras[0].rotation, b.teacher_cameras[0].rotation);
        assert_eq!(a.teacher_depths[1], b.teacher_depths[1]);

        let id = perturb_teacher(&bundle, 0.0, 0.0, 0.0, 42);
        assert_eq!(id.teacher_cameras[0], bundle.cameras[0]);
        assert_eq!(id.teacher_depths[0], bundle.depths[0]);
    }

    #[test]
    fn edge_line_matches_rendered_edge() {
        let spec = SceneSpec {
            kind: SceneKind::SlantedEdge {
                angle_deg: 5.0,
                offset: 0.02,
                dark: [0.25, 0.25, 0.25],
                light: [0.75, 0.75, 0.75],
            },
            texture: TextureSpec::Checker {
                scale: 1.0,
                color_a: [0.0; 3],
                color_b: [1.0; 3],
            },
            cameras: RingSpec {
                count: 1,
                radius: 2.0,
                tilt_deg: 0.0,
                jitter_deg: 0.0,
                fov_deg: 40.0,
                look_at: [0.0, 0.0, 0.0],
                start_azimuth_deg: 0.0,
            },
            width: 70,
            height: 70,
            seed: 1,
            teacher_noise: NoiseSpec::default(),
        };
        let bundle = generate(&spec).unwrap();
        let (a, b, c) = edge_line_in_view(&spec, &bundle.cameras[0]).unwrap();
        let img = &bundle.images[0];
        // Away from the line every pixel is exactly dark or light, and each
        // side of the line is uniform.
        let mut dark_signs = Vec::new();
        let mut light_signs = Vec::new();
        for y in 0..70 {
            for x in 0..70 {
                let dist = a * (x as f64 + 0.5) + b * (y as f64 + 0.5) + c;
                if dist.abs() < 0.75 {
                    continue;
                }
                let val = img.get(x, y, 0);
                assert!(
                    (val - 0.25).abs() < 1e-9 || (val - 0.75).abs() < 1e-9,
                    "two-tone image"
                );
                if val < 0.5 {
                    dark_signs.push(dist.signum());
                } else {
                    light_signs.push(dist.signum());
                }
            }
        }
        assert!(dark_signs.iter().all(|&s| s == dark_signs[0]));
        assert!(light_signs.iter().all(|&s| s == light_signs[0]));
        assert_ne!(dark_signs[0], light_signs[0]);
    }
}
