//! Analytic backward pass of the compositing formula.
//!
//! Per pixel the forward recursion is C_k = a_k col_k + (1 - a_k) C_{k+1},
//! so d pixel / d a_k = T_k (col_k - C_{k+1}) with no division; suffix
//! accumulators are rebuilt by walking the contribution list backwards.
//! Median depth passes its gradient straight to the crossing splat's depth
//! (the selection itself is treated as constant, like an argmax).

use rayon::prelude::*;

use super::forward::{bin_tiles, validate_splats, Prepared};
use super::project::SplatGrads;
use super::{depth_order, Splat2D, MEDIAN_ALPHA, TILE_SIZE, TRANSMITTANCE_MIN};
use crate::error::Result;

/// Upstream gradients on the rendered buffers, same layout as
/// [`super::RenderOutput`].
#[derive(Debug, Clone)]
pub struct RenderGrads {
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
    pub median_depth: Vec<f64>,
    pub normal: Vec<f64>,
}

impl RenderGrads {
    pub fn zeros(width: usize, height: usize) -> Self {
        RenderGrads {
            color: vec![0.0; width * height * 3],
            alpha: vec![0.0; width * height],
            median_depth: vec![0.0; width * height],
            normal: vec![0.0; width * height * 3],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.color.iter().all(|&v| v == 0.0)
            && self.alpha.iter().all(|&v| v == 0.0)
            && self.median_depth.iter().all(|&v| v == 0.0)
            && self.normal.iter().all(|&v| v == 0.0)
    }
}

struct Contribution {
    splat: usize,
    alpha: f64,
    gauss: f64,
    /// Transmittance in front of this contribution.
    transmittance: f64,
    dx: f64,
    dy: f64,
}

/// Gradients of every rendered buffer w.r.t. every splat parameter.
///
/// The forward pass is recomputed pixel by pixel with identical skip and
/// termination rules, so forward and backward see the same contribution
/// sets.
pub fn rasterize_backward(
    splats: &[Splat2D],
    width: usize,
    height: usize,
    upstream: &RenderGrads,
) -> Result<Vec<SplatGrads>> {
    validate_splats(splats)?;
    let order = depth_order(splats);
    let prepared: Vec<Prepared> = splats.iter().map(Prepared::new).collect();
    let (tiles_x, _tiles_y, tiles) = bin_tiles(&order, &prepared, width, height);

    // Each tile accumulates gradients for its own splat list; tiles are then
    // merged in index order so the summation order is fixed regardless of
    // thread count.
    let tile_grads: Vec<(Vec<usize>, Vec<SplatGrads>)> = tiles
        .par_iter()
        .enumerate()
        .map(|(tile_idx, list)| {
            let tx = tile_idx % tiles_x;
            let ty = tile_idx / tiles_x;
            let x0 = tx * TILE_SIZE;
            let y0 = ty * TILE_SIZE;
            let tw = TILE_SIZE.min(width - x0);
            let th = TILE_SIZE.min(height - y0);
            let mut grads = vec![SplatGrads::default(); list.len()];
            let mut slot_of = std::collections::HashMap::with_capacity(list.len());
            for (slot, &idx) in list.iter().enumerate() {
                slot_of.insert(idx, slot);
            }
            let mut contributions: Vec<Contribution> = Vec::with_capacity(list.len());
            for dy in 0..th {
                for dx_px in 0..tw {
                    let px = (x0 + dx_px) as f64 + 0.5;
                    let py = (y0 + dy) as f64 + 0.5;
                    let pixel = (y0 + dy) * width + (x0 + dx_px);

                    let g_color = &upstream.color[pixel * 3..pixel * 3 + 3];
                    let g_alpha = upstream.alpha[pixel];
                    let g_median = upstream.median_depth[pixel];
                    let g_normal_hat = &upstream.normal[pixel * 3..pixel * 3 + 3];

                    // Forward replay for this pixel.
                    contributions.clear();
                    let mut transmittance = 1.0;
                    let mut raw_normal = [0.0; 3];
                    let mut crossing: Option<usize> = None;
                    for &idx in list {
                        let Some((alpha, gauss)) = prepared[idx].alpha_at(px, py) else {
                            continue;
                        };
                        let w = alpha * transmittance;
                        let s = &splats[idx];
                        raw_normal[0] += w * s.normal.x;
                        raw_normal[1] += w * s.normal.y;
                        raw_normal[2] += w * s.normal.z;
                        contributions.push(Contribution {
                            splat: idx,
                            alpha,
                            gauss,
                            transmittance,
                            dx: px - prepared[idx].center_x,
                            dy: py - prepared[idx].center_y,
                        });
                        transmittance *= 1.0 - alpha;
                        if crossing.is_none() && 1.0 - transmittance >= MEDIAN_ALPHA {
                            crossing = Some(idx);
                        }
                        if transmittance < TRANSMITTANCE_MIN {
                            break;
                        }
                    }
                    if contributions.is_empty() {
                        continue;
                    }

                    // Gradient through the output normalization of the
                    // normal buffer.
                    let norm = (raw_normal[0] * raw_normal[0]
                        + raw_normal[1] * raw_normal[1]
                        + raw_normal[2] * raw_normal[2])
                        .sqrt();
                    let mut g_normal = [0.0; 3];
                    if norm > 0.0 {
                        let unit = [
                            raw_normal[0] / norm,
                            raw_normal[1] / norm,
                            raw_normal[2] / norm,
                        ];
                        let dot = g_normal_hat[0] * unit[0]
                            + g_normal_hat[1] * unit[1]
                            + g_normal_hat[2] * unit[2];
                        for c in 0..3 {
                            g_normal[c] = (g_normal_hat[c] - dot * unit[c]) / norm;
                        }
                    }

                    if g_median != 0.0 {
                        if let Some(idx) = crossing {
                            grads[slot_of[&idx]].depth += g_median;
                        }
                    }

                    // Reverse sweep with suffix accumulators.
                    let mut color_suffix = [0.0; 3];
                    let mut alpha_suffix = 0.0;
                    let mut normal_suffix = [0.0; 3];
                    for contrib in contributions.iter().rev() {
                        let s = &splats[contrib.splat];
                        let w = contrib.alpha * contrib.transmittance;
                        let slot = slot_of[&contrib.splat];
                        let grad = &mut grads[slot];

                        grad.color.x += w * g_color[0];
                        grad.color.y += w * g_color[1];
                        grad.color.z += w * g_color[2];
                        grad.normal.x += w * g_normal[0];
                        grad.normal.y += w * g_normal[1];
                        grad.normal.z += w * g_normal[2];

                        let col = [s.color.x, s.color.y, s.color.z];
                        let nrm = [s.normal.x, s.normal.y, s.normal.z];
                        let mut d_alpha = g_alpha * (1.0 - alpha_suffix);
                        for c in 0..3 {
                            d_alpha += g_color[c] * (col[c] - color_suffix[c]);
                            d_alpha += g_normal[c] * (nrm[c] - normal_suffix[c]);
                        }
                        d_alpha *= contrib.transmittance;

                        // alpha = opacity * gauss
                        grad.opacity += contrib.gauss * d_alpha;
                        let d_gauss = s.opacity * d_alpha;
                        // gauss = exp(-maha / 2)
                        let d_maha = -0.5 * contrib.gauss * d_gauss;
                        // maha = delta^T Sigma^{-1} delta
                        let inv = &prepared[contrib.splat].inv;
                        let mdx = inv.a * contrib.dx + inv.b * contrib.dy;
                        let mdy = inv.b * contrib.dx + inv.c * contrib.dy;
                        grad.center.x += -2.0 * mdx * d_maha;
                        grad.center.y += -2.0 * mdy * d_maha;
                        // d maha / d Sigma = -(Sigma^{-1} delta)(Sigma^{-1} delta)^T
                        grad.cov.a += -d_maha * mdx * mdx;
                        grad.cov.b += -2.0 * d_maha * mdx * mdy;
                        grad.cov.c += -d_maha * mdy * mdy;

                        // Update suffixes to "from this splat onward".
                        for c in 0..3 {
                            color_suffix[c] =
                                contrib.alpha * col[c] + (1.0 - contrib.alpha) * color_suffix[c];
                            normal_suffix[c] =
                                contrib.alpha * nrm[c] + (1.0 - contrib.alpha) * normal_suffix[c];
                        }
                        alpha_suffix = contrib.alpha + (1.0 - contrib.alpha) * alpha_suffix;
                    }
                }
            }
            (list.clone(), grads)
        })
        .collect();

    let mut out = vec![SplatGrads::default(); splats.len()];
    for (list, grads) in tile_grads {
        for (slot, idx) in list.into_iter().enumerate() {
            out[idx].accumulate(&grads[slot]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::forward::rasterize;
    use super::super::SymMat2;
    use super::*;
    use nalgebra::{Vector2, Vector3};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_scene(rng: &mut impl Rng, n: usize, size: f64) -> Vec<Splat2D> {
        (0..n)
            .map(|_| {
                let a: f64 = rng.gen_range(2.0..8.0);
                let c: f64 = rng.gen_range(2.0..8.0);
                let b = rng.gen_range(-0.5..0.5) * (a * c).sqrt() * 0.5;
                Splat2D {
                    center: Vector2::new(
                        rng.gen_range(size * 0.25..size * 0.75),
                        rng.gen_range(size * 0.25..size * 0.75),
                    ),
                    cov: SymMat2::new(a, b, c),
                    depth: rng.gen_range(1.0..4.0),
                    color: Vector3::new(
                        rng.gen_range(0.1..0.9),
                        rng.gen_range(0.1..0.9),
                        rng.gen_range(0.1..0.9),
                    ),
                    opacity: rng.gen_range(0.3..0.8),
                    normal: Vector3::new(
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-1.0..=-0.3),
                    )
                    .normalize(),
                }
            })
            .collect()
    }

    fn random_upstream(rng: &mut impl Rng, w: usize, h: usize) -> RenderGrads {
        RenderGrads {
            color: (0..w * h * 3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            alpha: (0..w * h).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            median_depth: (0..w * h).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            normal: (0..w * h * 3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn scalar_loss(splats: &[Splat2D], w: usize, h: usize, up: &RenderGrads) -> f64 {
        let out = rasterize(splats, w, h).unwrap();
        let mut total = 0.0;
        for (a, b) in out.color.iter().zip(&up.color) {
            total += a * b;
        }
        for (a, b) in out.alpha.iter().zip(&up.alpha) {
            total += a * b;
        }
        for (a, b) in out.median_depth.iter().zip(&up.median_depth) {
            total += a * b;
        }
        for (a, b) in out.normal.iter().zip(&up.normal) {
            total += a * b;
        }
        total
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = StdRng::seed_from_u64(91);
        let splats = random_scene(&mut rng, 5, 8.0);
        let grads = rasterize_backward(&splats, 8, 8, &RenderGrads::zeros(8, 8)).unwrap();
        for g in grads {
            assert_eq!(g.center, Vector2::zeros());
            assert_eq!(g.color, Vector3::zeros());
            assert_eq!(g.opacity, 0.0);
        }
    }

    #[test]
    fn single_splat_color_gradient_is_composited_weight() {
        let splat = Splat2D {
            center: Vector2::new(4.0, 4.0),
            cov: SymMat2::new(1e6, 0.0, 1e6),
            depth: 2.0,
            color: Vector3::new(0.2, 0.4, 0.8),
            opacity: 0.7,
            normal: Vector3::new(0.0, 0.0, -1.0),
        };
        let mut up = RenderGrads::zeros(8, 8);
        let p = 4 * 8 + 4;
        up.color[p * 3] = 1.0;
        let grads = rasterize_backward(&[splat.clone()], 8, 8, &up).unwrap();
        // Contribution weight at the pixel is alpha * T = opacity * ~1.
        assert!((grads[0].color.x - splat.opacity).abs() < 1e-6);
        assert_eq!(grads[0].color.y, 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(92);
        let eps = 1e-4;
        let (w, h) = (8usize, 8usize);
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
        for trial in 0..30 {
            let splats = random_scene(&mut rng, 5, 8.0);
            // Median depth is piecewise constant in everything except the
            // crossing splat's depth; keep its upstream at zero except for
            // the dedicated depth probe below.
            let mut up = random_upstream(&mut rng, w, h);
            up.median_depth.iter_mut().for_each(|v| *v = 0.0);
            let grads = rasterize_backward(&splats, w, h, &up).unwrap();
            for k in 0..splats.len() {
                let params: Vec<(&str, f64)> = vec![
                    ("cx", grads[k].center.x),
                    ("cy", grads[k].center.y),
                    ("cov_a", grads[k].cov.a),
                    ("cov_b", grads[k].cov.b),
                    ("cov_c", grads[k].cov.c),
                    ("op", grads[k].opacity),
                    ("col_r", grads[k].color.x),
                    ("nrm_x", grads[k].normal.x),
                ];
                for (name, analytic) in params {
                    let mut hi = splats.clone();
                    let mut lo = splats.clone();
                    let apply = |s: &mut Splat2D, d: f64| match name {
                        "cx" => s.center.x += d,
                        "cy" => s.center.y += d,
                        "cov_a" => s.cov.a += d,
                        "cov_b" => s.cov.b += d,
                        "cov_c" => s.cov.c += d,
                        "op" => s.opacity += d,
                        "col_r" => s.color.x += d,
                        "nrm_x" => s.normal.x += d,
                        _ => unreachable!(),
                    };
                    apply(&mut hi[k], eps);
                    apply(&mut lo[k], -eps);
                    let fd =
                        (scalar_loss(&hi, w, h, &up) - scalar_loss(&lo, w, h, &up)) / (2.0 * eps);
                    assert!(
                        rel(fd, analytic) < 1e-4,
                        "trial {trial} splat {k} {name}: fd {fd} vs analytic {analytic}"
                    );
                }
            }
        }
    }

    #[test]
    fn median_depth_gradient_hits_crossing_splat() {
        let near = Splat2D {
            center: Vector2::new(4.0, 4.0),
            cov: SymMat2::new(1e6, 0.0, 1e6),
            depth: 1.5,
            color: Vector3::new(1.0, 0.0, 0.0),
            opacity: 0.9,
            normal: Vector3::new(0.0, 0.0, -1.0),
        };
        let far = Splat2D {
            depth: 3.0,
            ..near.clone()
        };
        let mut up = RenderGrads::zeros(8, 8);
        for v in &mut up.median_depth {
            *v = 1.0;
        }
        let grads = rasterize_backward(&[far, near], 8, 8, &up).unwrap();
        // The near splat (index 1) crosses 0.5 everywhere it covers.
        assert_eq!(grads[0].depth, 0.0);
        assert_eq!(grads[1].depth, 64.0);
    }
}
