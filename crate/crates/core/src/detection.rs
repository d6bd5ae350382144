//! Sub-pixel 2D detection from per-patch heatmaps.
//!
//! Each primitive owns one 14x14 logit grid inside its patch. A spatial
//! softmax turns the logits into a probability map; the detected coordinate
//! is the expectation of the pixel-center positions under that map
//! (soft-argmax / DSNT). The gradient of the coordinate w.r.t. the logits is
//! analytic: d x / d logit(i,j) = h(i,j) * (c_x(i,j) - x) / tau.

use std::collections::BTreeMap;

use crate::buffer::ImageBuffer;
use crate::density::DensityAssignment;
use crate::PATCH_SIZE;

/// Softmax temperature used throughout unless overridden in config.
pub const DEFAULT_TEMPERATURE: f64 = 0.2;

/// Logit grids for one patch: `channels` maps of `patch_size^2` values.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchLogits {
    pub channels: usize,
    /// `channels * patch_size * patch_size`, channel-major.
    pub logits: Vec<f64>,
}

/// Per-patch, per-channel logit grids over the whole image.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapField {
    pub patches_x: usize,
    pub patches_y: usize,
    pub patch_size: usize,
    pub temperature: f64,
    /// Row-major patch grid.
    pub patches: Vec<PatchLogits>,
}

impl HeatmapField {
    /// All-zero logits (uniform heatmaps), channel counts from the density
    /// assignment.
    pub fn zeros(assignment: &DensityAssignment, temperature: f64) -> Self {
        assert!(temperature > 0.0, "temperature must be positive");
        let cells = PATCH_SIZE * PATCH_SIZE;
        let patches = assignment
            .level
            .iter()
            .map(|l| PatchLogits {
                channels: l.primitive_count(),
                logits: vec![0.0; l.primitive_count() * cells],
            })
            .collect();
        HeatmapField {
            patches_x: assignment.patches_x,
            patches_y: assignment.patches_y,
            patch_size: PATCH_SIZE,
            temperature,
            patches,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.patches_x * self.patches_y
    }

    /// Image-space origin (top-left corner) of a patch.
    pub fn patch_origin(&self, patch_index: usize) -> (f64, f64) {
        let px = patch_index % self.patches_x;
        let py = patch_index / self.patches_x;
        (
            (px * self.patch_size) as f64,
            (py * self.patch_size) as f64,
        )
    }

    pub fn logits(&self, patch_index: usize, channel: usize) -> &[f64] {
        let cells = self.patch_size * self.patch_size;
        let p = &self.patches[patch_index];
        &p.logits[channel * cells..(channel + 1) * cells]
    }

    pub fn logits_mut(&mut self, patch_index: usize, channel: usize) -> &mut [f64] {
        let cells = self.patch_size * self.patch_size;
        let p = &mut self.patches[patch_index];
        &mut p.logits[channel * cells..(channel + 1) * cells]
    }

    pub fn total_logits(&self) -> usize {
        self.patches.iter().map(|p| p.logits.len()).sum()
    }

    /// Total detections this field will produce.
    pub fn total_channels(&self) -> usize {
        self.patches.iter().map(|p| p.channels).sum()
    }
}

/// One detected sub-pixel coordinate with its provenance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    /// Continuous global image coordinates (pixels).
    pub x: f64,
    pub y: f64,
    pub patch_index: usize,
    pub channel_index: usize,
}

/// Temperature softmax over one logit grid; max-subtracted for stability.
/// The result sums to 1 up to rounding.
pub fn spatial_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    debug_assert!(temperature > 0.0);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Expectation of global pixel-center coordinates under a normalized
/// heatmap. Cell (ix, iy) of a patch whose top-left corner sits at
/// `patch_origin` has center (origin.0 + ix + 0.5, origin.1 + iy + 0.5).
pub fn dsnt(heatmap: &[f64], patch_size: usize, patch_origin: (f64, f64)) -> (f64, f64) {
    debug_assert_eq!(heatmap.len(), patch_size * patch_size);
    let mut x = 0.0;
    let mut y = 0.0;
    for iy in 0..patch_size {
        for ix in 0..patch_size {
            let h = heatmap[iy * patch_size + ix];
            x += h * (patch_origin.0 + ix as f64 + 0.5);
            y += h * (patch_origin.1 + iy as f64 + 0.5);
        }
    }
    (x, y)
}

/// Gradient of the DSNT coordinates w.r.t. the pre-softmax logits.
///
/// `grad_xy` is the upstream gradient on (x, y); the result has one entry
/// per heatmap cell.
pub fn dsnt_backward(
    heatmap: &[f64],
    patch_size: usize,
    patch_origin: (f64, f64),
    temperature: f64,
    grad_xy: (f64, f64),
) -> Vec<f64> {
    let (x, y) = dsnt(heatmap, patch_size, patch_origin);
    let mut grad = vec![0.0; heatmap.len()];
    for iy in 0..patch_size {
        for ix in 0..patch_size {
            let idx = iy * patch_size + ix;
            let cx = patch_origin.0 + ix as f64 + 0.5;
            let cy = patch_origin.1 + iy as f64 + 0.5;
            grad[idx] =
                heatmap[idx] * (grad_xy.0 * (cx - x) + grad_xy.1 * (cy - y)) / temperature;
        }
    }
    grad
}

/// Run softmax + DSNT on every channel of every patch. Order: patches
/// row-major, channels in index order.
pub fn detect_all(field: &HeatmapField) -> Vec<Detection> {
    let mut out = Vec::with_capacity(field.total_channels());
    for patch_index in 0..field.num_patches() {
        let origin = field.patch_origin(patch_index);
        for channel in 0..field.patches[patch_index].channels {
            let h = spatial_softmax(field.logits(patch_index, channel), field.temperature);
            let (x, y) = dsnt(&h, field.patch_size, origin);
            out.push(Detection {
                x,
                y,
                patch_index,
                channel_index: channel,
            });
        }
    }
    out
}

/// Debug dump: per-channel heatmaps averaged over all patches that share a
/// channel count, keyed by that count. See the density levels for the
/// mapping count -> level.
pub fn mean_heatmaps(field: &HeatmapField) -> BTreeMap<usize, Vec<ImageBuffer>> {
    let cells = field.patch_size * field.patch_size;
    let mut sums: BTreeMap<usize, (usize, Vec<Vec<f64>>)> = BTreeMap::new();
    for patch_index in 0..field.num_patches() {
        let channels = field.patches[patch_index].channels;
        let entry = sums
            .entry(channels)
            .or_insert_with(|| (0, vec![vec![0.0; cells]; channels]));
        entry.0 += 1;
        for channel in 0..channels {
            let h = spatial_softmax(field.logits(patch_index, channel), field.temperature);
            for (acc, v) in entry.1[channel].iter_mut().zip(&h) {
                *acc += v;
            }
        }
    }
    sums.into_iter()
        .map(|(channels, (count, maps))| {
            let images = maps
                .into_iter()
                .map(|mut m| {
                    for v in &mut m {
                        *v /= count as f64;
                    }
                    ImageBuffer::from_data(field.patch_size, field.patch_size, 1, m)
                        .expect("mean heatmap has patch shape")
                })
                .collect();
            (channels, images)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{assign_density, DensityLevel};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_logits(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()
    }

    #[test]
    fn zero_logits_give_uniform_heatmap() {
        let h = spatial_softmax(&vec![0.0; 196], 0.2);
        for v in &h {
            assert!((v - 1.0 / 196.0).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_logit_gives_one_hot() {
        let mut logits = vec![0.0; 196];
        logits[37] = 1000.0;
        let h = spatial_softmax(&logits, 0.2);
        assert!((h[37] - 1.0).abs() < 1e-12);
        for (i, v) in h.iter().enumerate() {
            if i != 37 {
                assert!(*v < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..100 {
            let logits = random_logits(&mut rng, 196);
            let sum: f64 = spatial_softmax(&logits, 0.2).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = StdRng::seed_from_u64(32);
        let logits = random_logits(&mut rng, 196);
        let shifted: Vec<f64> = logits.iter().map(|l| l + 13.7).collect();
        let a = spatial_softmax(&logits, 0.2);
        let b = spatial_softmax(&shifted, 0.2);
        let (xa, ya) = dsnt(&a, 14, (0.0, 0.0));
        let (xb, yb) = dsnt(&b, 14, (0.0, 0.0));
        assert!((xa - xb).abs() < 1e-12);
        assert!((ya - yb).abs() < 1e-12);
    }

    #[test]
    fn uniform_heatmap_detects_patch_center() {
        let h = vec![1.0 / 196.0; 196];
        let (x, y) = dsnt(&h, 14, (0.0, 0.0));
        assert!((x - 7.0).abs() < 1e-12);
        assert!((y - 7.0).abs() < 1e-12);
    }

    #[test]
    fn one_hot_detects_cell_center() {
        let mut h = vec![0.0; 196];
        // cell ix=3, iy=5
        h[5 * 14 + 3] = 1.0;
        let (x, y) = dsnt(&h, 14, (0.0, 0.0));
        assert!((x - 3.5).abs() < 1e-12);
        assert!((y - 5.5).abs() < 1e-12);
    }

    #[test]
    fn two_equal_cells_detect_midpoint() {
        let mut h = vec![0.0; 196];
        h[5 * 14 + 3] = 0.5;
        h[5 * 14 + 4] = 0.5;
        let (x, y) = dsnt(&h, 14, (0.0, 0.0));
        assert!((x - 4.0).abs() < 1e-12);
        assert!((y - 5.5).abs() < 1e-12);
    }

    #[test]
    fn dsnt_translation_equivariance() {
        let mut rng = StdRng::seed_from_u64(33);
        let h = spatial_softmax(&random_logits(&mut rng, 196), 0.2);
        let (x0, y0) = dsnt(&h, 14, (0.0, 0.0));
        let (x1, y1) = dsnt(&h, 14, (28.0, 42.0));
        assert!((x1 - x0 - 28.0).abs() < 1e-9);
        assert!((y1 - y0 - 42.0).abs() < 1e-9);
    }

    #[test]
    fn dsnt_output_is_convex_combination() {
        let mut rng = StdRng::seed_from_u64(34);
        for _ in 0..50 {
            let h = spatial_softmax(&random_logits(&mut rng, 196), 0.2);
            let (x, y) = dsnt(&h, 14, (14.0, 28.0));
            assert!((14.5..=27.5).contains(&x));
            assert!((28.5..=41.5).contains(&y));
        }
    }

    #[test]
    fn backward_uniform_antisymmetric() {
        let h = vec![1.0 / 196.0; 196];
        let g = dsnt_backward(&h, 14, (0.0, 0.0), 0.2, (1.0, 0.0));
        // Zero at the center columns is impossible (14 is even) but the grid
        // must be antisymmetric about the patch center.
        for iy in 0..14 {
            for ix in 0..14 {
                let a = g[iy * 14 + ix];
                let b = g[iy * 14 + (13 - ix)];
                assert!((a + b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn backward_one_hot_vanishes() {
        let mut logits = vec![0.0; 196];
        logits[60] = 1000.0;
        let h = spatial_softmax(&logits, 0.2);
        let g = dsnt_backward(&h, 14, (0.0, 0.0), 0.2, (1.0, 1.0));
        for v in &g {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(35);
        let eps = 1e-5;
        for _ in 0..100 {
            let logits = random_logits(&mut rng, 196);
            let gx: f64 = rng.gen_range(-1.0..1.0);
            let gy: f64 = rng.gen_range(-1.0..1.0);
            let h = spatial_softmax(&logits, 0.2);
            let grad = dsnt_backward(&h, 14, (3.0, 9.0), 0.2, (gx, gy));
            // Saturated cells carry gradients near zero where central
            // differences are pure cancellation noise, so the error is
            // normalized by the gradient's overall scale.
            let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs())).max(1e-8);
            for _ in 0..6 {
                let k = rng.gen_range(0..196);
                let mut lo = logits.clone();
                let mut hi = logits.clone();
                lo[k] -= eps;
                hi[k] += eps;
                let f = |l: &[f64]| {
                    let h = spatial_softmax(l, 0.2);
                    let (x, y) = dsnt(&h, 14, (3.0, 9.0));
                    gx * x + gy * y
                };
                let fd = (f(&hi) - f(&lo)) / (2.0 * eps);
                let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(scale);
                assert!(rel < 1e-6, "cell {k}: fd {fd} vs analytic {}", grad[k]);
            }
        }
    }

    #[test]
    fn detect_all_counts_and_bounds() {
        let assignment = assign_density(&[0.0, 1.0, 2.0, 3.0], 2, 2);
        // 4 patches: 2 low, 1 medium, 1 high
        let mut field = HeatmapField::zeros(&assignment, 0.2);
        let mut rng = StdRng::seed_from_u64(36);
        for p in &mut field.patches {
            for l in &mut p.logits {
                *l = rng.gen_range(-4.0..4.0);
            }
        }
        let detections = detect_all(&field);
        assert_eq!(detections.len(), 2 * 16 + 32 + 64);
        for d in &detections {
            let (ox, oy) = field.patch_origin(d.patch_index);
            assert!(d.x >= ox + 0.5 && d.x <= ox + 13.5);
            assert!(d.y >= oy + 0.5 && d.y <= oy + 13.5);
        }
    }

    #[test]
    fn fresh_field_detects_patch_centers() {
        let assignment = DensityAssignment::uniform(2, 2, DensityLevel::Low);
        let field = HeatmapField::zeros(&assignment, 0.2);
        let detections = detect_all(&field);
        assert_eq!(detections.len(), 64);
        for d in &detections {
            let (ox, oy) = field.patch_origin(d.patch_index);
            assert!((d.x - (ox + 7.0)).abs() < 1e-12);
            assert!((d.y - (oy + 7.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_heatmaps_group_by_channel_count() {
        let assignment = assign_density(&[0.0, 1.0, 2.0, 3.0], 2, 2);
        let field = HeatmapField::zeros(&assignment, 0.2);
        let maps = mean_heatmaps(&field);
        assert_eq!(
            maps.keys().copied().collect::<Vec<_>>(),
            vec![16, 32, 64]
        );
        assert_eq!(maps[&16].len(), 16);
        // Uniform logits: mean heatmap is uniform.
        let m = &maps[&16][0];
        assert!((m.get(3, 3, 0) - 1.0 / 196.0).abs() < 1e-15);
    }
}
