//! Scene bundle directory layout:
//!
//! ```text
//! scene/
//!   cameras.json          ground-truth / input cameras
//!   images/view_000.png   input views
//!   depth/view_000.png    16-bit depth (+ .json scale sidecars)
//!   teacher/cameras.json  teacher copies (only when they differ)
//!   teacher/depth/...
//! ```

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::io::image_io::{read_depth, read_image, write_depth, write_image};
use crate::synth::SceneBundle;

/// JSON schema of one camera: intrinsics, size, row-major rotation,
/// translation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Camera-from-world rotation, row-major, 9 values.
    pub r: [f64; 9],
    /// Camera-from-world translation.
    pub t: [f64; 3],
}

impl From<&Camera> for CameraJson {
    fn from(c: &Camera) -> Self {
        let mut r = [0.0; 9];
        for row in 0..3 {
            for col in 0..3 {
                r[row * 3 + col] = c.rotation[(row, col)];
            }
        }
        CameraJson {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            r,
            t: [c.translation.x, c.translation.y, c.translation.z],
        }
    }
}

impl CameraJson {
    pub fn to_camera(&self) -> Result<Camera> {
        let rotation = Matrix3::from_iterator(self.r.iter().copied()).transpose();
        Camera::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            rotation,
            Vector3::new(self.t[0], self.t[1], self.t[2]),
            self.width,
            self.height,
        )
    }
}

pub fn write_cameras(cams: &[Camera], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json: Vec<CameraJson> = cams.iter().map(CameraJson::from).collect();
    let text = serde_json::to_string_pretty(&json).expect("cameras serialize");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_cameras(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let json: Vec<CameraJson> =
        serde_json::from_str(&text).map_err(|e| Error::file_format(path, e.to_string()))?;
    json.iter().map(CameraJson::to_camera).collect()
}

fn view_name(i: usize) -> String {
    format!("view_{i:03}.png")
}

/// Write a bundle to the directory layout. Teacher copies are written only
/// when they differ from the ground truth.
pub fn write_bundle(bundle: &SceneBundle, dir: impl AsRef<Path>) -> Result<()> {
    bundle.validate()?;
    let dir = dir.as_ref();
    let images = dir.join("images");
    let depth = dir.join("depth");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    std::fs::create_dir_all(&depth).map_err(|e| Error::io(&depth, e))?;
    write_cameras(&bundle.cameras, dir.join("cameras.json"))?;
    for (i, img) in bundle.images.iter().enumerate() {
        write_image(img, images.join(view_name(i)))?;
        write_depth(&bundle.depths[i], depth.join(view_name(i)))?;
    }
    let teacher_differs = bundle.teacher_cameras != bundle.cameras
        || bundle.teacher_depths != bundle.depths;
    if teacher_differs {
        let tdir = dir.join("teacher");
        let tdepth = tdir.join("depth");
        std::fs::create_dir_all(&tdepth).map_err(|e| Error::io(&tdepth, e))?;
        write_cameras(&bundle.teacher_cameras, tdir.join("cameras.json"))?;
        for (i, d) in bundle.teacher_depths.iter().enumerate() {
            write_depth(d, tdepth.join(view_name(i)))?;
        }
    }
    Ok(())
}

/// Read a bundle directory; missing teacher copies fall back to the ground
/// truth.
pub fn read_bundle(dir: impl AsRef<Path>) -> Result<SceneBundle> {
    let dir = dir.as_ref();
    let cameras = read_cameras(dir.join("cameras.json"))?;
    let mut images = Vec::with_capacity(cameras.len());
    let mut depths = Vec::with_capacity(cameras.len());
    for i in 0..cameras.len() {
        images.push(read_image(dir.join("images").join(view_name(i)))?);
        depths.push(read_depth(dir.join("depth").join(view_name(i)))?);
    }
    let teacher_dir = dir.join("teacher");
    let (teacher_cameras, teacher_depths) = if teacher_dir.is_dir() {
        let cams = read_cameras(teacher_dir.join("cameras.json"))?;
        let mut tdepths = Vec::with_capacity(cams.len());
        for i in 0..cams.len() {
            tdepths.push(read_depth(teacher_dir.join("depth").join(view_name(i)))?);
        }
        (cams, tdepths)
    } else {
        (cameras.clone(), depths.clone())
    };
    let bundle = SceneBundle {
        images,
        cameras,
        depths,
        teacher_cameras,
        teacher_depths,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn write_report(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
