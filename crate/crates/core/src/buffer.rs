//! Dense row-major scalar grids: images, depth maps.

use crate::error::{Error, Result};

/// Read-only view shared by everything the bilinear sampler touches.
pub trait Grid {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn channels(&self) -> usize;
    /// Row-major, channel-interleaved: `values[(y * width + x) * channels + c]`.
    fn values(&self) -> &[f64];
}

/// Row-major, channel-interleaved image. Color data lives in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        ImageBuffer {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::shape(
                format!("{}x{}x{} = {}", width, height, channels, width * height * channels),
                format!("{} values", data.len()),
            ));
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds a single- or multi-channel image by evaluating `f(x, y)` at
    /// every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Self {
        let mut img = ImageBuffer::new(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                debug_assert_eq!(v.len(), channels);
                img.set_pixel(x, y, &v);
            }
        }
        img
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let base = (y * self.width + x) * self.channels;
        &self.data[base..base + self.channels]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, v: &[f64]) {
        let base = (y * self.width + x) * self.channels;
        self.data[base..base + self.channels].copy_from_slice(v);
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Center crop to the largest size whose sides are multiples of
    /// `multiple`. Returns an error when the image is smaller than one
    /// multiple in either dimension.
    pub fn center_crop_to_multiple(&self, multiple: usize) -> Result<ImageBuffer> {
        let new_w = (self.width / multiple) * multiple;
        let new_h = (self.height / multiple) * multiple;
        if new_w == 0 || new_h == 0 {
            return Err(Error::shape(
                format!("at least {multiple}x{multiple}"),
                format!("{}x{}", self.width, self.height),
            ));
        }
        let x0 = (self.width - new_w) / 2;
        let y0 = (self.height - new_h) / 2;
        let mut out = ImageBuffer::new(new_w, new_h, self.channels);
        for y in 0..new_h {
            for x in 0..new_w {
                out.set_pixel(x, y, self.pixel(x + x0, y + y0));
            }
        }
        Ok(out)
    }

    /// Luminance (0.299 R + 0.587 G + 0.114 B) for 3+ channels, the raw
    /// value for single-channel data.
    pub fn luminance(&self, x: usize, y: usize) -> f64 {
        let p = self.pixel(x, y);
        if self.channels >= 3 {
            0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
        } else {
            p[0]
        }
    }
}

impl Grid for ImageBuffer {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn channels(&self) -> usize {
        self.channels
    }
    fn values(&self) -> &[f64] {
        &self.data
    }
}

/// Per-pixel positive depth along the camera z axis plus a confidence
/// weight in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    depth: Vec<f64>,
    confidence: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, depth: Vec<f64>, confidence: Vec<f64>) -> Result<Self> {
        if depth.len() != width * height || confidence.len() != width * height {
            return Err(Error::shape(
                format!("{}x{} = {}", width, height, width * height),
                format!("{} depths, {} confidences", depth.len(), confidence.len()),
            ));
        }
        for &d in &depth {
            if d.is_finite() && d <= 0.0 {
                return Err(Error::InvalidDepth { depth: d });
            }
        }
        for &c in &confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::shape("confidence in [0,1]", format!("{c}")));
            }
        }
        Ok(DepthMap {
            width,
            height,
            depth,
            confidence,
        })
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        DepthMap::new(
            width,
            height,
            vec![depth; width * height],
            vec![1.0; width * height],
        )
        .expect("constant positive depth is valid")
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    pub fn confidence_at(&self, x: usize, y: usize) -> f64 {
        self.confidence[y * self.width + x]
    }

    pub fn depth_data(&self) -> &[f64] {
        &self.depth
    }

    pub fn depth_data_mut(&mut self) -> &mut [f64] {
        &mut self.depth
    }

    pub fn confidence_data(&self) -> &[f64] {
        &self.confidence
    }
}

impl Grid for DepthMap {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn channels(&self) -> usize {
        1
    }
    fn values(&self) -> &[f64] {
        &self.depth
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_data_checks_length() {
        assert!(ImageBuffer::from_data(2, 2, 3, vec![0.0; 12]).is_ok());
        assert!(ImageBuffer::from_data(2, 2, 3, vec![0.0; 11]).is_err());
    }

    #[test]
    fn depth_map_rejects_nonpositive() {
        assert!(DepthMap::new(2, 1, vec![1.0, -0.5], vec![1.0, 1.0]).is_err());
        assert!(DepthMap::new(2, 1, vec![1.0, f64::INFINITY], vec![1.0, 1.0]).is_ok());
    }

    #[test]
    fn center_crop_to_patch_multiple() {
        let img = ImageBuffer::from_fn(30, 17, 1, |x, y| vec![(x + y) as f64]);
        let cropped = img.center_crop_to_multiple(14).unwrap();
        assert_eq!((cropped.width(), cropped.height()), (28, 14));
        // offset x0 = 1, y0 = 1
        assert_eq!(cropped.get(0, 0, 0), 2.0);
    }

    #[test]
    fn luminance_weights() {
        let img = ImageBuffer::from_data(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((img.luminance(0, 0) - 0.299).abs() < 1e-12);
    }
}
