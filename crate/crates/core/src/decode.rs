//! Detections to camera-frame Gaussians.
//!
//! Depth, color and descriptors are sampled at the detected coordinate with
//! bilinear interpolation (border padding); the descriptor feeds a one-hidden-
//! layer MLP whose raw outputs are squashed into scale / orientation /
//! opacity / confidence. Scale is depth-relative: the raw sigmoid picks a
//! value in [s_min, s_max] which is then multiplied by the sampled depth.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::buffer::{DepthMap, Grid, ImageBuffer};
use crate::camera::Camera;
use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, Quaternion};

/// Descriptor channels sampled per detection.
pub const DESCRIPTOR_CHANNELS: usize = 32;

/// Hidden width of the parameter MLP.
pub const MLP_HIDDEN: usize = 64;

/// Raw MLP outputs: 3 scale + 4 quaternion + opacity + confidence + 2 spare.
pub const MLP_OUTPUTS: usize = 11;

/// Dense per-pixel descriptor grid, directly optimized during fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorField {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl DescriptorField {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        DescriptorField {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn random(width: usize, height: usize, channels: usize, sigma: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, sigma).expect("valid sigma");
        DescriptorField {
            width,
            height,
            channels,
            data: (0..width * height * channels)
                .map(|_| normal.sample(rng))
                .collect(),
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl Grid for DescriptorField {
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

/// Bilinear sample at continuous pixel coordinates (pixel centers at
/// i + 0.5). Coordinates outside the grid clamp to the border values, so the
/// sampled value is constant (and its coordinate gradient zero) out there.
/// Writes one value per channel into `out`.
pub fn bilinear_sample(grid: &impl Grid, x: f64, y: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), grid.channels());
    let (w, h, c) = (grid.width(), grid.height(), grid.channels());
    let data = grid.values();
    let gx = x - 0.5;
    let gy = y - 0.5;
    let x0 = gx.floor();
    let y0 = gy.floor();
    let wx = gx - x0;
    let wy = gy - y0;
    let clamp = |v: f64, max: usize| (v.max(0.0) as usize).min(max - 1);
    let ix0 = clamp(x0, w);
    let ix1 = clamp(x0 + 1.0, w);
    let iy0 = clamp(y0, h);
    let iy1 = clamp(y0 + 1.0, h);
    let at = |ix: usize, iy: usize, ch: usize| data[(iy * w + ix) * c + ch];
    for ch in 0..c {
        let top = (1.0 - wx) * at(ix0, iy0, ch) + wx * at(ix1, iy0, ch);
        let bottom = (1.0 - wx) * at(ix0, iy1, ch) + wx * at(ix1, iy1, ch);
        out[ch] = (1.0 - wy) * top + wy * bottom;
    }
}

/// Exact gradient of [`bilinear_sample`] w.r.t. the query coordinates and,
/// optionally, the buffer values (scatter-add into `grad_buf`).
///
/// Returns (dL/dx, dL/dy) accumulated over channels. In border-clamped
/// regions the duplicated taps cancel, so the coordinate gradient is zero
/// there by construction.
pub fn bilinear_backward(
    grid: &impl Grid,
    x: f64,
    y: f64,
    grad_out: &[f64],
    mut grad_buf: Option<&mut [f64]>,
) -> (f64, f64) {
    debug_assert_eq!(grad_out.len(), grid.channels());
    let (w, h, c) = (grid.width(), grid.height(), grid.channels());
    let data = grid.values();
    let gx = x - 0.5;
    let gy = y - 0.5;
    let x0 = gx.floor();
    let y0 = gy.floor();
    let wx = gx - x0;
    let wy = gy - y0;
    let clamp = |v: f64, max: usize| (v.max(0.0) as usize).min(max - 1);
    let ix0 = clamp(x0, w);
    let ix1 = clamp(x0 + 1.0, w);
    let iy0 = clamp(y0, h);
    let iy1 = clamp(y0 + 1.0, h);
    let at = |ix: usize, iy: usize, ch: usize| data[(iy * w + ix) * c + ch];
    let mut gx_total = 0.0;
    let mut gy_total = 0.0;
    for ch in 0..c {
        let v00 = at(ix0, iy0, ch);
        let v10 = at(ix1, iy0, ch);
        let v01 = at(ix0, iy1, ch);
        let v11 = at(ix1, iy1, ch);
        let g = grad_out[ch];
        gx_total += g * ((1.0 - wy) * (v10 - v00) + wy * (v11 - v01));
        gy_total += g * ((1.0 - wx) * (v01 - v00) + wx * (v11 - v10));
        if let Some(buf) = grad_buf.as_deref_mut() {
            buf[(iy0 * w + ix0) * c + ch] += g * (1.0 - wx) * (1.0 - wy);
            buf[(iy0 * w + ix1) * c + ch] += g * wx * (1.0 - wy);
            buf[(iy1 * w + ix0) * c + ch] += g * (1.0 - wx) * wy;
            buf[(iy1 * w + ix1) * c + ch] += g * wx * wy;
        }
    }
    (gx_total, gy_total)
}

/// Weights of the affine -> ReLU -> affine parameter head.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    /// `hidden x input`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `output x hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpWeights {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        MlpWeights {
            input,
            hidden,
            output,
            w1: vec![0.0; hidden * input],
            b1: vec![0.0; hidden],
            w2: vec![0.0; output * hidden],
            b2: vec![0.0; output],
        }
    }

    /// Gaussian init scaled by 1/sqrt(fan_in); biases zero.
    pub fn random(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        let n1 = Normal::new(0.0, 1.0 / (input as f64).sqrt()).unwrap();
        let n2 = Normal::new(0.0, 1.0 / (hidden as f64).sqrt()).unwrap();
        MlpWeights {
            input,
            hidden,
            output,
            w1: (0..hidden * input).map(|_| n1.sample(rng)).collect(),
            b1: vec![0.0; hidden],
            w2: (0..output * hidden).map(|_| n2.sample(rng)).collect(),
            b2: vec![0.0; output],
        }
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

/// Hidden pre-activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub hidden_pre: Vec<f64>,
}

/// Gradients with the same shapes as [`MlpWeights`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpGrads {
    pub fn zeros(w: &MlpWeights) -> Self {
        MlpGrads {
            w1: vec![0.0; w.w1.len()],
            b1: vec![0.0; w.b1.len()],
            w2: vec![0.0; w.w2.len()],
            b2: vec![0.0; w.b2.len()],
        }
    }

    pub fn accumulate(&mut self, other: &MlpGrads) {
        for (a, b) in self.w1.iter_mut().zip(&other.w1) {
            *a += b;
        }
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += b;
        }
        for (a, b) in self.w2.iter_mut().zip(&other.w2) {
            *a += b;
        }
        for (a, b) in self.b2.iter_mut().zip(&other.b2) {
            *a += b;
        }
    }
}

pub fn mlp_forward(w: &MlpWeights, input: &[f64]) -> Result<Vec<f64>> {
    Ok(mlp_forward_cached(w, input)?.0)
}

pub fn mlp_forward_cached(w: &MlpWeights, input: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
    if input.len() != w.input {
        return Err(Error::shape(
            format!("{} inputs", w.input),
            format!("{}", input.len()),
        ));
    }
    let mut hidden_pre = w.b1.clone();
    for i in 0..w.hidden {
        let row = &w.w1[i * w.input..(i + 1) * w.input];
        hidden_pre[i] += row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
    }
    let mut out = w.b2.clone();
    for o in 0..w.output {
        let row = &w.w2[o * w.hidden..(o + 1) * w.hidden];
        out[o] += row
            .iter()
            .zip(&hidden_pre)
            .map(|(a, &h)| a * h.max(0.0))
            .sum::<f64>();
    }
    Ok((out, MlpCache { hidden_pre }))
}

/// Backward through the MLP. Accumulates weight gradients into `grads` and
/// returns the gradient w.r.t. the input descriptor.
pub fn mlp_backward(
    w: &MlpWeights,
    input: &[f64],
    cache: &MlpCache,
    grad_out: &[f64],
    grads: &mut MlpGrads,
) -> Vec<f64> {
    debug_assert_eq!(grad_out.len(), w.output);
    let hidden_post: Vec<f64> = cache.hidden_pre.iter().map(|&h| h.max(0.0)).collect();
    let mut grad_hidden = vec![0.0; w.hidden];
    for o in 0..w.output {
        let g = grad_out[o];
        grads.b2[o] += g;
        let row = &w.w2[o * w.hidden..(o + 1) * w.hidden];
        let grow = &mut grads.w2[o * w.hidden..(o + 1) * w.hidden];
        for i in 0..w.hidden {
            grow[i] += g * hidden_post[i];
            grad_hidden[i] += g * row[i];
        }
    }
    let mut grad_input = vec![0.0; w.input];
    for i in 0..w.hidden {
        // ReLU gate; subgradient 0 at exactly 0.
        if cache.hidden_pre[i] <= 0.0 {
            continue;
        }
        let g = grad_hidden[i];
        grads.b1[i] += g;
        let row = &w.w1[i * w.input..(i + 1) * w.input];
        let grow = &mut grads.w1[i * w.input..(i + 1) * w.input];
        for j in 0..w.input {
            grow[j] += g * input[j];
            grad_input[j] += g * row[j];
        }
    }
    grad_input
}

/// Depth-relative scale range; actual scale is in [s_min * d, s_max * d].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScaleBounds {
    pub s_min: f64,
    pub s_max: f64,
}

impl Default for ScaleBounds {
    fn default() -> Self {
        ScaleBounds {
            s_min: 1e-4,
            s_max: 0.05,
        }
    }
}

impl ScaleBounds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.s_min && self.s_min < self.s_max) {
            return Err(Error::shape(
                "0 < s_min < s_max",
                format!("{} .. {}", self.s_min, self.s_max),
            ));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activated Gaussian parameters from one raw MLP output vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivatedParams {
    pub scale: Vector3<f64>,
    pub rotation: Quaternion,
    pub opacity: f64,
    pub confidence: f64,
}

/// Gradients arriving at the activated parameters.
#[derive(Debug, Clone, Copy, Default)]
pub struct ActivatedGrads {
    pub scale: [f64; 3],
    /// W.r.t. the *normalized* quaternion components (w, x, y, z).
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub confidence: f64,
}

/// Squash a raw 11-vector into Gaussian parameters.
///
/// scale_k = (s_min + sigmoid(raw_k) * (s_max - s_min)) * depth;
/// the quaternion is raw[3..7] biased by the identity before normalization;
/// opacity = sigmoid(raw[7]); confidence = sigmoid(raw[8]); raw[9..11] are
/// reserved and ignored.
pub fn activate_params(raw: &[f64], depth: f64, bounds: &ScaleBounds) -> ActivatedParams {
    debug_assert_eq!(raw.len(), MLP_OUTPUTS);
    debug_assert!(depth > 0.0);
    let span = bounds.s_max - bounds.s_min;
    let scale = Vector3::new(
        (bounds.s_min + sigmoid(raw[0]) * span) * depth,
        (bounds.s_min + sigmoid(raw[1]) * span) * depth,
        (bounds.s_min + sigmoid(raw[2]) * span) * depth,
    );
    let rotation = Quaternion::new(1.0 + raw[3], raw[4], raw[5], raw[6])
        .normalized()
        // The bias keeps the norm away from zero almost everywhere; an
        // adversarial raw[3] = -1 with zero vector part still needs a fallback.
        .unwrap_or(Quaternion::IDENTITY);
    ActivatedParams {
        scale,
        rotation,
        opacity: sigmoid(raw[7]),
        confidence: sigmoid(raw[8]),
    }
}

/// Backward of [`activate_params`]: returns (d raw, d depth).
pub fn activate_backward(
    raw: &[f64],
    depth: f64,
    bounds: &ScaleBounds,
    grads: &ActivatedGrads,
) -> ([f64; MLP_OUTPUTS], f64) {
    let span = bounds.s_max - bounds.s_min;
    let mut d_raw = [0.0; MLP_OUTPUTS];
    let mut d_depth = 0.0;
    for k in 0..3 {
        let s = sigmoid(raw[k]);
        let rel = bounds.s_min + s * span;
        d_raw[k] = grads.scale[k] * s * (1.0 - s) * span * depth;
        d_depth += grads.scale[k] * rel;
    }
    // Quaternion: v = (1 + raw3, raw4, raw5, raw6), q = v / |v|.
    let v = Quaternion::new(1.0 + raw[3], raw[4], raw[5], raw[6]);
    let n = v.norm();
    if n >= 1e-300 {
        let q = [v.w / n, v.x / n, v.y / n, v.z / n];
        let dot: f64 = (0..4).map(|j| grads.rotation[j] * q[j]).sum();
        for k in 0..4 {
            d_raw[3 + k] = (grads.rotation[k] - dot * q[k]) / n;
        }
    }
    let a = sigmoid(raw[7]);
    d_raw[7] = grads.opacity * a * (1.0 - a);
    let c = sigmoid(raw[8]);
    d_raw[8] = grads.confidence * c * (1.0 - c);
    (d_raw, d_depth)
}

/// Decoded view: camera-frame Gaussians plus bookkeeping for training.
#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub gaussians: Vec<Gaussian>,
    /// Index of the detection each Gaussian came from.
    pub detection_index: Vec<usize>,
    /// Detections dropped for non-positive sampled depth.
    pub dropped: usize,
}

/// Decode every detection of one view into a camera-frame Gaussian.
pub fn decode_view(
    detections: &[Detection],
    depth_map: &DepthMap,
    image: &ImageBuffer,
    descriptors: &DescriptorField,
    mlp: &MlpWeights,
    cam: &Camera,
    bounds: &ScaleBounds,
) -> Result<DecodeResult> {
    bounds.validate()?;
    let shape = (image.width(), image.height());
    for (name, w, h) in [
        ("depth map", depth_map.width(), depth_map.height()),
        ("descriptors", descriptors.width(), descriptors.height()),
        ("camera", cam.width, cam.height),
    ] {
        if (w, h) != shape {
            return Err(Error::shape(
                format!("{}x{} ({name})", shape.0, shape.1),
                format!("{w}x{h}"),
            ));
        }
    }
    if image.channels() != 3 {
        return Err(Error::shape("3-channel image", format!("{}", image.channels())));
    }
    let mut gaussians = Vec::with_capacity(detections.len());
    let mut detection_index = Vec::with_capacity(detections.len());
    let mut dropped = 0usize;
    let mut color = [0.0; 3];
    let mut depth_sample = [0.0; 1];
    let mut descriptor = vec![0.0; descriptors.channels()];
    for (i, det) in detections.iter().enumerate() {
        bilinear_sample(depth_map, det.x, det.y, &mut depth_sample);
        let d = depth_sample[0];
        if !(d > 0.0) || !d.is_finite() {
            dropped += 1;
            continue;
        }
        bilinear_sample(image, det.x, det.y, &mut color);
        bilinear_sample(descriptors, det.x, det.y, &mut descriptor);
        let raw = mlp_forward(mlp, &descriptor)?;
        let params = activate_params(&raw, d, bounds);
        gaussians.push(Gaussian {
            mean: cam.camera_point(det.x, det.y, d)?,
            scale: params.scale,
            rotation: params.rotation,
            opacity: params.opacity,
            confidence: params.confidence,
            color: Vector3::new(color[0], color[1], color[2]),
        });
        detection_index.push(i);
    }
    Ok(DecodeResult {
        gaussians,
        detection_index,
        dropped,
    })
}
