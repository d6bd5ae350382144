//! SSIM (Wang et al.) over valid 11x11 Gaussian windows, with an analytic
//! gradient w.r.t. the predicted image.

use crate::buffer::{Grid, ImageBuffer};
use crate::error::{Error, Result};

/// Window side.
pub const SSIM_WINDOW: usize = 11;

const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const C1: f64 = K1 * K1; // dynamic range 1
const C2: f64 = K2 * K2;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-mode blur: (w, h) -> (w - 10, h - 10).
fn blur_valid(src: &[f64], w: usize, h: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let vw = w - (SSIM_WINDOW - 1);
    let vh = h - (SSIM_WINDOW - 1);
    let mut horizontal = vec![0.0; vw * h];
    for y in 0..h {
        for x in 0..vw {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * src[y * w + x + i];
            }
            horizontal[y * vw + x] = acc;
        }
    }
    let mut out = vec![0.0; vw * vh];
    for y in 0..vh {
        for x in 0..vw {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * horizontal[(y + i) * vw + x];
            }
            out[y * vw + x] = acc;
        }
    }
    out
}

/// Adjoint of [`blur_valid`]: scatters a window-position map back onto the
/// pixel grid, (w - 10, h - 10) -> (w, h).
fn blur_adjoint(map: &[f64], w: usize, h: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let vw = w - (SSIM_WINDOW - 1);
    let vh = h - (SSIM_WINDOW - 1);
    let mut vertical = vec![0.0; vw * h];
    for y in 0..vh {
        for x in 0..vw {
            let m = map[y * vw + x];
            if m == 0.0 {
                continue;
            }
            for (i, k) in kernel.iter().enumerate() {
                vertical[(y + i) * vw + x] += k * m;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..vw {
            let m = vertical[y * vw + x];
            if m == 0.0 {
                continue;
            }
            for (i, k) in kernel.iter().enumerate() {
                out[y * w + x + i] += k * m;
            }
        }
    }
    out
}

fn channel_plane(img: &ImageBuffer, channel: usize) -> Vec<f64> {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut out = vec![0.0; w * h];
    for i in 0..w * h {
        out[i] = img.values()[i * c + channel];
    }
    out
}

struct SsimMaps {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    xx: Vec<f64>,
    yy: Vec<f64>,
    xy: Vec<f64>,
}

fn ssim_maps(x: &[f64], y: &[f64], w: usize, h: usize, kernel: &[f64; SSIM_WINDOW]) -> SsimMaps {
    let sq = |v: &[f64]| -> Vec<f64> { v.iter().map(|a| a * a).collect() };
    let prod: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    SsimMaps {
        mu_x: blur_valid(x, w, h, kernel),
        mu_y: blur_valid(y, w, h, kernel),
        xx: blur_valid(&sq(x), w, h, kernel),
        yy: blur_valid(&sq(y), w, h, kernel),
        xy: blur_valid(&prod, w, h, kernel),
    }
}

fn check_shapes(pred: &ImageBuffer, target: &ImageBuffer) -> Result<()> {
    if pred.width() != target.width()
        || pred.height() != target.height()
        || pred.channels() != target.channels()
    {
        return Err(Error::shape(
            format!("{}x{}x{}", target.width(), target.height(), target.channels()),
            format!("{}x{}x{}", pred.width(), pred.height(), pred.channels()),
        ));
    }
    if pred.width() < SSIM_WINDOW || pred.height() < SSIM_WINDOW {
        return Err(Error::shape(
            format!("at least {SSIM_WINDOW}x{SSIM_WINDOW}"),
            format!("{}x{}", pred.width(), pred.height()),
        ));
    }
    Ok(())
}

/// Mean SSIM over valid window positions and channels, in [-1, 1].
pub fn ssim_mean(pred: &ImageBuffer, target: &ImageBuffer) -> Result<f64> {
    check_shapes(pred, target)?;
    let kernel = gaussian_kernel();
    let (w, h) = (pred.width(), pred.height());
    let vw = w - (SSIM_WINDOW - 1);
    let vh = h - (SSIM_WINDOW - 1);
    let mut total = 0.0;
    for ch in 0..pred.channels() {
        let x = channel_plane(pred, ch);
        let y = channel_plane(target, ch);
        let m = ssim_maps(&x, &y, w, h, &kernel);
        for p in 0..vw * vh {
            let (mx, my) = (m.mu_x[p], m.mu_y[p]);
            let sxy = m.xy[p] - mx * my;
            let sxx = m.xx[p] - mx * mx;
            let syy = m.yy[p] - my * my;
            let a = 2.0 * mx * my + C1;
            let b = 2.0 * sxy + C2;
            let c = mx * mx + my * my + C1;
            let d = sxx + syy + C2;
            total += (a * b) / (c * d);
        }
    }
    Ok(total / (vw * vh * pred.channels()) as f64)
}

/// `1 - mean SSIM` plus the gradient w.r.t. `pred` (image data layout).
pub fn loss_ssim(pred: &ImageBuffer, target: &ImageBuffer) -> Result<(f64, Vec<f64>)> {
    check_shapes(pred, target)?;
    let kernel = gaussian_kernel();
    let (w, h, channels) = (pred.width(), pred.height(), pred.channels());
    let vw = w - (SSIM_WINDOW - 1);
    let vh = h - (SSIM_WINDOW - 1);
    let norm = (vw * vh * channels) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; w * h * channels];
    for ch in 0..channels {
        let x = channel_plane(pred, ch);
        let y = channel_plane(target, ch);
        let m = ssim_maps(&x, &y, w, h, &kernel);
        // Per-window partials w.r.t. mu_x, E[x^2], E[xy].
        let mut g_mu = vec![0.0; vw * vh];
        let mut g_xx = vec![0.0; vw * vh];
        let mut g_xy = vec![0.0; vw * vh];
        for p in 0..vw * vh {
            let (mx, my) = (m.mu_x[p], m.mu_y[p]);
            let sxy = m.xy[p] - mx * my;
            let sxx = m.xx[p] - mx * mx;
            let syy = m.yy[p] - my * my;
            let a = 2.0 * mx * my + C1;
            let b = 2.0 * sxy + C2;
            let c = mx * mx + my * my + C1;
            let d = sxx + syy + C2;
            total += (a * b) / (c * d);
            let ds_da = b / (c * d);
            let ds_db = a / (c * d);
            let ds_dc = -(a * b) / (c * c * d);
            let ds_dd = -(a * b) / (c * d * d);
            // d sigma_xy / d mu_x = -mu_y, d sigma_x^2 / d mu_x = -2 mu_x.
            g_mu[p] = ds_da * 2.0 * my + ds_db * (-2.0 * my)
                + ds_dc * 2.0 * mx
                + ds_dd * (-2.0 * mx);
            g_xx[p] = ds_dd;
            g_xy[p] = 2.0 * ds_db;
        }
        // Chain through the blurs: mu_x, E[x^2] and E[xy] all are valid
        // blurs of per-pixel quantities.
        let back_mu = blur_adjoint(&g_mu, w, h, &kernel);
        let back_xx = blur_adjoint(&g_xx, w, h, &kernel);
        let back_xy = blur_adjoint(&g_xy, w, h, &kernel);
        for i in 0..w * h {
            // Loss is 1 - mean(SSIM): negate and normalize.
            let d_ssim = back_mu[i] + back_xx[i] * 2.0 * x[i] + back_xy[i] * y[i];
            grad[i * channels + ch] = -d_ssim / norm;
        }
    }
    Ok((1.0 - total / norm, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_image(rng: &mut impl Rng, w: usize, h: usize, c: usize) -> ImageBuffer {
        ImageBuffer::from_data(w, h, c, (0..w * h * c).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let mut rng = StdRng::seed_from_u64(111);
        let img = random_image(&mut rng, 16, 14, 3);
        let (v, g) = loss_ssim(&img, &img).unwrap();
        assert!(v.abs() < 1e-12);
        assert!((ssim_mean(&img, &img).unwrap() - 1.0).abs() < 1e-12);
        // At the maximum the gradient vanishes.
        assert!(g.iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn negated_pattern_is_near_maximal() {
        // High-contrast checkerboard vs its negative.
        let img = ImageBuffer::from_fn(16, 16, 1, |x, y| {
            vec![if (x + y) % 2 == 0 { 0.95 } else { 0.05 }]
        });
        let mut neg = img.clone();
        for v in neg.data_mut() {
            *v = 1.0 - *v;
        }
        let (v, _) = loss_ssim(&neg, &img).unwrap();
        assert!(v > 1.5, "anticorrelated structure, got {v}");
    }

    #[test]
    fn constant_images_closed_form() {
        let a = ImageBuffer::from_fn(14, 14, 1, |_, _| vec![0.2]);
        let b = ImageBuffer::from_fn(14, 14, 1, |_, _| vec![0.8]);
        let s = ssim_mean(&a, &b).unwrap();
        // Structure/contrast terms are 1; only luminance differs.
        let expected = (2.0 * 0.2 * 0.8 + C1) / (0.2 * 0.2 + 0.8 * 0.8 + C1);
        assert!((s - expected).abs() < 1e-12, "{s} vs {expected}");
        assert!(s < 1.0);
    }

    #[test]
    fn symmetric_in_arguments() {
        let mut rng = StdRng::seed_from_u64(112);
        let a = random_image(&mut rng, 15, 13, 3);
        let b = random_image(&mut rng, 15, 13, 3);
        let ab = ssim_mean(&a, &b).unwrap();
        let ba = ssim_mean(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn rejects_small_or_mismatched() {
        let a = ImageBuffer::new(10, 14, 1);
        assert!(ssim_mean(&a, &a).is_err());
        let b = ImageBuffer::new(14, 14, 1);
        let c = ImageBuffer::new(14, 14, 3);
        assert!(loss_ssim(&b, &c).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(113);
        let eps = 1e-5;
        for _ in 0..5 {
            let target = random_image(&mut rng, 13, 12, 2);
            let pred = random_image(&mut rng, 13, 12, 2);
            let (_, grad) = loss_ssim(&pred, &target).unwrap();
            let gscale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs())).max(1e-8);
            for _ in 0..40 {
                let k = rng.gen_range(0..pred.values().len());
                let mut hi = pred.clone();
                let mut lo = pred.clone();
                hi.data_mut()[k] += eps;
                lo.data_mut()[k] -= eps;
                let fd = (loss_ssim(&hi, &target).unwrap().0
                    - loss_ssim(&lo, &target).unwrap().0)
                    / (2.0 * eps);
                let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(gscale);
                assert!(rel < 1e-4, "pixel {k}: fd {fd} vs analytic {}", grad[k]);
            }
        }
    }
}
