//! Front-to-back tile compositing.

use rayon::prelude::*;

use super::{
    depth_order, RenderOutput, Splat2D, SymMat2, ALPHA_SKIP, MEDIAN_ALPHA, TILE_SIZE,
    TRANSMITTANCE_MIN,
};
use crate::error::{Error, Result};

/// Per-splat data hoisted out of the pixel loop.
pub(super) struct Prepared {
    pub center_x: f64,
    pub center_y: f64,
    pub inv: SymMat2,
    pub rect: (f64, f64, f64, f64),
    pub opacity: f64,
}

impl Prepared {
    pub fn new(s: &Splat2D) -> Prepared {
        Prepared {
            center_x: s.center.x,
            center_y: s.center.y,
            inv: s.cov.inverse(),
            rect: s.bounding_rect(),
            opacity: s.opacity,
        }
    }

    /// Contribution alpha at a pixel center, if any. `None` outside the
    /// bounding rectangle or below the skip threshold; both cutoffs are part
    /// of the rendering definition and mirrored by the backward pass.
    #[inline]
    pub fn alpha_at(&self, px: f64, py: f64) -> Option<(f64, f64)> {
        let (x0, y0, x1, y1) = self.rect;
        if px < x0 || px > x1 || py < y0 || py > y1 {
            return None;
        }
        let dx = px - self.center_x;
        let dy = py - self.center_y;
        let maha =
            (self.inv.a * dx * dx + 2.0 * self.inv.b * dx * dy + self.inv.c * dy * dy).max(0.0);
        let gauss = (-0.5 * maha).exp().min(1.0);
        let alpha = self.opacity * gauss;
        if alpha < ALPHA_SKIP {
            return None;
        }
        Some((alpha, gauss))
    }
}

pub(super) fn validate_splats(splats: &[Splat2D]) -> Result<()> {
    for s in splats {
        if !s.is_finite() {
            return Err(Error::NonFinite("splat"));
        }
        if !(s.cov.a > 0.0 && s.cov.det() > 0.0) {
            return Err(Error::NonFinite("splat covariance (not positive definite)"));
        }
        if s.depth <= 0.0 {
            return Err(Error::InvalidDepth { depth: s.depth });
        }
    }
    Ok(())
}

/// Splat indices (already depth-sorted) binned per tile.
pub(super) fn bin_tiles(
    order: &[usize],
    prepared: &[Prepared],
    width: usize,
    height: usize,
) -> (usize, usize, Vec<Vec<usize>>) {
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut tiles: Vec<Vec<usize>> = vec![Vec::new(); tiles_x * tiles_y];
    for &idx in order {
        let (x0, y0, x1, y1) = prepared[idx].rect;
        // Pixel i has center i + 0.5; it sees the splat when the rect
        // contains that center.
        let px_lo = (x0 - 0.5).ceil().max(0.0) as usize;
        let py_lo = (y0 - 0.5).ceil().max(0.0) as usize;
        if x1 < 0.5 || y1 < 0.5 || px_lo >= width || py_lo >= height {
            continue;
        }
        let px_hi = ((x1 - 0.5).floor() as usize).min(width - 1);
        let py_hi = ((y1 - 0.5).floor() as usize).min(height - 1);
        if px_lo > px_hi || py_lo > py_hi {
            continue;
        }
        for ty in py_lo / TILE_SIZE..=py_hi / TILE_SIZE {
            for tx in px_lo / TILE_SIZE..=px_hi / TILE_SIZE {
                tiles[ty * tiles_x + tx].push(idx);
            }
        }
    }
    (tiles_x, tiles_y, tiles)
}

struct TilePixels {
    tx: usize,
    ty: usize,
    width: usize,
    height: usize,
    color: Vec<f64>,
    alpha: Vec<f64>,
    median: Vec<f64>,
    normal: Vec<f64>,
}

/// Composite depth-sorted splats into color/alpha/median-depth/normal
/// buffers. Deterministic for any thread count: tiles own disjoint pixels.
pub fn rasterize(splats: &[Splat2D], width: usize, height: usize) -> Result<RenderOutput> {
    validate_splats(splats)?;
    let order = depth_order(splats);
    let prepared: Vec<Prepared> = splats.iter().map(Prepared::new).collect();
    let (tiles_x, _tiles_y, tiles) = bin_tiles(&order, &prepared, width, height);

    let tile_results: Vec<TilePixels> = tiles
        .par_iter()
        .enumerate()
        .map(|(tile_idx, list)| {
            let tx = tile_idx % tiles_x;
            let ty = tile_idx / tiles_x;
            let x0 = tx * TILE_SIZE;
            let y0 = ty * TILE_SIZE;
            let tw = TILE_SIZE.min(width - x0);
            let th = TILE_SIZE.min(height - y0);
            let mut tile = TilePixels {
                tx,
                ty,
                width: tw,
                height: th,
                color: vec![0.0; tw * th * 3],
                alpha: vec![0.0; tw * th],
                median: vec![0.0; tw * th],
                normal: vec![0.0; tw * th * 3],
            };
            for dy in 0..th {
                for dx in 0..tw {
                    let px = (x0 + dx) as f64 + 0.5;
                    let py = (y0 + dy) as f64 + 0.5;
                    let mut transmittance = 1.0;
                    let mut color = [0.0; 3];
                    let mut normal = [0.0; 3];
                    let mut median = 0.0;
                    let mut crossed = false;
                    for &idx in list {
                        let Some((alpha, _)) = prepared[idx].alpha_at(px, py) else {
                            continue;
                        };
                        let w = alpha * transmittance;
                        let s = &splats[idx];
                        color[0] += w * s.color.x;
                        color[1] += w * s.color.y;
                        color[2] += w * s.color.z;
                        normal[0] += w * s.normal.x;
                        normal[1] += w * s.normal.y;
                        normal[2] += w * s.normal.z;
                        transmittance *= 1.0 - alpha;
                        if !crossed && 1.0 - transmittance >= MEDIAN_ALPHA {
                            median = s.depth;
                            crossed = true;
                        }
                        if transmittance < TRANSMITTANCE_MIN {
                            break;
                        }
                    }
                    let p = dy * tw + dx;
                    tile.color[p * 3..p * 3 + 3].copy_from_slice(&color);
                    tile.alpha[p] = 1.0 - transmittance;
                    tile.median[p] = median;
                    let norm =
                        (normal[0] * normal[0] + normal[1] * normal[1] + normal[2] * normal[2])
                            .sqrt();
                    if norm > 0.0 {
                        for v in &mut normal {
                            *v /= norm;
                        }
                    }
                    tile.normal[p * 3..p * 3 + 3].copy_from_slice(&normal);
                }
            }
            tile
        })
        .collect();

    let mut out = RenderOutput::empty(width, height);
    for tile in tile_results {
        let x0 = tile.tx * TILE_SIZE;
        let y0 = tile.ty * TILE_SIZE;
        for dy in 0..tile.height {
            let row = ((y0 + dy) * width + x0) * 3;
            let trow = dy * tile.width * 3;
            out.color[row..row + tile.width * 3]
                .copy_from_slice(&tile.color[trow..trow + tile.width * 3]);
            out.normal[row..row + tile.width * 3]
                .copy_from_slice(&tile.normal[trow..trow + tile.width * 3]);
            let row1 = (y0 + dy) * width + x0;
            let trow1 = dy * tile.width;
            out.alpha[row1..row1 + tile.width]
                .copy_from_slice(&tile.alpha[trow1..trow1 + tile.width]);
            out.median_depth[row1..row1 + tile.width]
                .copy_from_slice(&tile.median[trow1..trow1 + tile.width]);
        }
    }
    Ok(out)
}
