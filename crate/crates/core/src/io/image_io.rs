//! Image and depth-map persistence.
//!
//! Color goes to 8-bit PNG or binary PPM by file extension. Depth goes to
//! 16-bit grayscale PNG with a JSON sidecar recording the quantization
//! scale (depth = pixel * scale); pixel 0 is reserved for invalid/missing
//! depth and reads back with confidence 0.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::buffer::{DepthMap, Grid, ImageBuffer};
use crate::error::{Error, Result};

fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a 1- or 3-channel [0,1] image as PNG or PPM (by extension).
pub fn write_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "png" => write_png(img, path),
        "ppm" => write_ppm(img, path),
        other => Err(Error::file_format(
            path,
            format!("unsupported image extension '{other}' (png or ppm)"),
        )),
    }
}

fn write_png(img: &ImageBuffer, path: &Path) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    match img.channels() {
        1 => {
            let data: Vec<u8> = img.values().iter().map(|&v| quantize8(v)).collect();
            image::save_buffer(path, &data, w, h, image::ColorType::L8)
        }
        3 => {
            let data: Vec<u8> = img.values().iter().map(|&v| quantize8(v)).collect();
            image::save_buffer(path, &data, w, h, image::ColorType::Rgb8)
        }
        c => {
            return Err(Error::file_format(
                path,
                format!("{c}-channel images are not writable"),
            ))
        }
    }
    .map_err(|e| Error::file_format(path, e.to_string()))
}

fn write_ppm(img: &ImageBuffer, path: &Path) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::file_format(path, "PPM requires 3 channels"));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut sink = BufWriter::new(file);
    write!(sink, "P6\n{} {}\n255\n", img.width(), img.height())
        .map_err(|e| Error::io(path, e))?;
    let data: Vec<u8> = img.values().iter().map(|&v| quantize8(v)).collect();
    sink.write_all(&data).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a PNG/PPM image back into [0,1] floats.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::file_format(path, e.to_string()))?;
    match img {
        image::DynamicImage::ImageLuma8(gray) => {
            let (w, h) = gray.dimensions();
            let data = gray.into_raw().iter().map(|&v| v as f64 / 255.0).collect();
            ImageBuffer::from_data(w as usize, h as usize, 1, data)
        }
        other => {
            let rgb = other.into_rgb8();
            let (w, h) = rgb.dimensions();
            let data = rgb.into_raw().iter().map(|&v| v as f64 / 255.0).collect();
            ImageBuffer::from_data(w as usize, h as usize, 3, data)
        }
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct DepthScale {
    scale: f64,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Write a depth map as 16-bit PNG plus a JSON scale sidecar. The scale is
/// millimeters (0.001 scene units per step) unless the range forces a
/// coarser step.
pub fn write_depth(depth: &DepthMap, path: impl AsRef<Path>) -> Result<f64> {
    let path = path.as_ref();
    let max_depth = depth
        .depth_data()
        .iter()
        .copied()
        .filter(|d| d.is_finite())
        .fold(0.0f64, f64::max);
    let scale = (max_depth / 65_000.0).max(1e-3);
    let data: Vec<u16> = depth
        .depth_data()
        .iter()
        .map(|&d| {
            if d.is_finite() {
                ((d / scale).round() as u64).clamp(1, 65_535) as u16
            } else {
                0
            }
        })
        .collect();
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_ne_bytes()).collect();
    image::save_buffer(
        path,
        &bytes,
        depth.width() as u32,
        depth.height() as u32,
        image::ColorType::L16,
    )
    .map_err(|e| Error::file_format(path, e.to_string()))?;
    let sidecar = sidecar_path(path);
    let json = serde_json::to_string_pretty(&DepthScale { scale })
        .expect("scale serializes");
    std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
    Ok(scale)
}

/// Read a 16-bit depth PNG with its sidecar. Zero pixels come back as
/// non-finite depth with confidence 0.
pub fn read_depth(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    let sidecar = sidecar_path(path);
    let json = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let scale: DepthScale = serde_json::from_str(&json)
        .map_err(|e| Error::file_format(&sidecar, e.to_string()))?;
    let img = image::open(path).map_err(|e| Error::file_format(path, e.to_string()))?;
    let gray = img.into_luma16();
    let (w, h) = gray.dimensions();
    let mut depth = Vec::with_capacity((w * h) as usize);
    let mut confidence = Vec::with_capacity((w * h) as usize);
    for &v in gray.into_raw().iter() {
        if v == 0 {
            depth.push(f64::INFINITY);
            confidence.push(0.0);
        } else {
            depth.push(v as f64 * scale.scale);
            confidence.push(1.0);
        }
    }
    DepthMap::new(w as usize, h as usize, depth, confidence)
}

/// One row of the per-step fitting trace.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub total: f64,
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
    pub psnr_self: f64,
    pub psnr_full: f64,
    pub primitives: usize,
}

pub fn write_metrics_csv(rows: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut sink = BufWriter::new(file);
    writeln!(
        sink,
        "step,total,l1_self,l1_full,ssim_self,ssim_full,depth,normal,teach_depth,teach_t,\
         teach_r,opacity,intrinsics,psnr_self,psnr_full,primitives"
    )
    .map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(
            sink,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.total,
            r.l1_self,
            r.l1_full,
            r.ssim_self,
            r.ssim_full,
            r.depth,
            r.normal,
            r.teach_depth,
            r.teach_t,
            r.teach_r,
            r.opacity,
            r.intrinsics,
            r.psnr_self,
            r.psnr_full,
            r.primitives
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
