//! Entropy-driven primitive budgets per 14x14 patch.
//!
//! Patches are ranked by the Shannon entropy of their grayscale histogram;
//! the lowest 55% get 16 primitives, the next 35% get 32, the top 15% get 64.

use serde::{Deserialize, Serialize};

use crate::buffer::{Grid, ImageBuffer};
use crate::error::{Error, Result};
use crate::PATCH_SIZE;

/// Histogram resolution for patch entropy.
pub const HISTOGRAM_BINS: usize = 32;

pub const LOW_FRACTION: f64 = 0.55;
pub const MEDIUM_FRACTION: f64 = 0.35;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityLevel {
    Low,
    Medium,
    High,
}

impl DensityLevel {
    /// Primitives allocated to a patch of this level.
    pub fn primitive_count(self) -> usize {
        match self {
            DensityLevel::Low => 16,
            DensityLevel::Medium => 32,
            DensityLevel::High => 64,
        }
    }
}

/// Per-patch density level and the entropy it was derived from.
#[derive(Debug, Clone)]
pub struct DensityAssignment {
    pub patches_x: usize,
    pub patches_y: usize,
    /// Row-major patch grid.
    pub level: Vec<DensityLevel>,
    pub entropy: Vec<f64>,
}

impl DensityAssignment {
    pub fn num_patches(&self) -> usize {
        self.patches_x * self.patches_y
    }

    /// Uniform assignment (the non-adaptive ablation).
    pub fn uniform(patches_x: usize, patches_y: usize, level: DensityLevel) -> Self {
        let n = patches_x * patches_y;
        DensityAssignment {
            patches_x,
            patches_y,
            level: vec![level; n],
            entropy: vec![0.0; n],
        }
    }

    pub fn from_image(img: &ImageBuffer) -> Result<Self> {
        let entropy = patch_entropy(img, PATCH_SIZE)?;
        Ok(assign_density(
            &entropy,
            img.width() / PATCH_SIZE,
            img.height() / PATCH_SIZE,
        ))
    }
}

/// Shannon entropy (bits) of the grayscale histogram of each patch,
/// row-major over the patch grid. Sides must divide by `patch_size`.
pub fn patch_entropy(img: &ImageBuffer, patch_size: usize) -> Result<Vec<f64>> {
    if patch_size == 0 || img.width() % patch_size != 0 || img.height() % patch_size != 0 {
        return Err(Error::shape(
            format!("sides divisible by {patch_size}"),
            format!("{}x{}", img.width(), img.height()),
        ));
    }
    let patches_x = img.width() / patch_size;
    let patches_y = img.height() / patch_size;
    let mut out = Vec::with_capacity(patches_x * patches_y);
    let total = (patch_size * patch_size) as f64;
    for py in 0..patches_y {
        for px in 0..patches_x {
            let mut hist = [0usize; HISTOGRAM_BINS];
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    let v = img
                        .luminance(px * patch_size + dx, py * patch_size + dy)
                        .clamp(0.0, 1.0);
                    let bin = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
                    hist[bin] += 1;
                }
            }
            let mut h = 0.0;
            for &count in &hist {
                if count > 0 {
                    let p = count as f64 / total;
                    h -= p * p.log2();
                }
            }
            out.push(h);
        }
    }
    Ok(out)
}

/// Rank patches by entropy (ties by row-major index) and split
/// 55% / 35% / 15% into Low / Medium / High. Quantile remainders go to High.
pub fn assign_density(entropy: &[f64], patches_x: usize, patches_y: usize) -> DensityAssignment {
    let n = entropy.len();
    assert_eq!(n, patches_x * patches_y, "entropy grid size");
    assert!(n >= 1, "at least one patch");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| entropy[a].total_cmp(&entropy[b]).then(a.cmp(&b)));
    let n_low = (LOW_FRACTION * n as f64).floor() as usize;
    let n_medium = (MEDIUM_FRACTION * n as f64).floor() as usize;
    let mut level = vec![DensityLevel::High; n];
    for (rank, &idx) in order.iter().enumerate() {
        level[idx] = if rank < n_low {
            DensityLevel::Low
        } else if rank < n_low + n_medium {
            DensityLevel::Medium
        } else {
            DensityLevel::High
        };
    }
    DensityAssignment {
        patches_x,
        patches_y,
        level,
        entropy: entropy.to_vec(),
    }
}

/// Total primitive count over all patches.
pub fn primitive_budget(assignment: &DensityAssignment) -> usize {
    assignment
        .level
        .iter()
        .map(|l| l.primitive_count())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn count_levels(a: &DensityAssignment) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for l in &a.level {
            match l {
                DensityLevel::Low => c.0 += 1,
                DensityLevel::Medium => c.1 += 1,
                DensityLevel::High => c.2 += 1,
            }
        }
        c
    }

    #[test]
    fn constant_patch_has_zero_entropy() {
        let img = ImageBuffer::from_fn(14, 14, 1, |_, _| vec![0.4]);
        let h = patch_entropy(&img, 14).unwrap();
        assert_eq!(h, vec![0.0]);
    }

    #[test]
    fn two_equal_bins_give_one_bit() {
        // Half the pixels in one bin, half in another.
        let img = ImageBuffer::from_fn(14, 14, 1, |x, _| {
            vec![if x < 7 { 0.1 } else { 0.9 }]
        });
        let h = patch_entropy(&img, 14).unwrap();
        assert!((h[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn near_uniform_histogram_approaches_five_bits() {
        // 196 pixels over 32 bins: 4 bins of 7 and 28 bins of 6.
        let mut values = Vec::with_capacity(196);
        let mut bin = 0usize;
        let mut in_bin = 0usize;
        for _ in 0..196 {
            values.push((bin as f64 + 0.5) / 32.0);
            in_bin += 1;
            let cap = if bin < 4 { 7 } else { 6 };
            if in_bin == cap {
                bin += 1;
                in_bin = 0;
            }
        }
        let img = ImageBuffer::from_data(14, 14, 1, values).unwrap();
        let h = patch_entropy(&img, 14).unwrap()[0];
        // Independent oracle: entropy of the constructed histogram.
        let p7: f64 = 7.0 / 196.0;
        let p6: f64 = 6.0 / 196.0;
        let expected = -(4.0 * p7 * p7.log2() + 28.0 * p6 * p6.log2());
        assert!((h - expected).abs() < 1e-12);
        assert!((h - 5.0).abs() < 0.01, "close to log2(32), got {h}");
    }

    #[test]
    fn entropy_invariant_to_pixel_permutation() {
        let mut rng = StdRng::seed_from_u64(21);
        let mut values: Vec<f64> = (0..196).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = ImageBuffer::from_data(14, 14, 1, values.clone()).unwrap();
        let h1 = patch_entropy(&img, 14).unwrap()[0];
        // Fisher-Yates shuffle.
        for i in (1..values.len()).rev() {
            let j = rng.gen_range(0..=i);
            values.swap(i, j);
        }
        let img2 = ImageBuffer::from_data(14, 14, 1, values).unwrap();
        let h2 = patch_entropy(&img2, 14).unwrap()[0];
        assert_eq!(h1, h2);
    }

    #[test]
    fn indivisible_sides_rejected() {
        let img = ImageBuffer::new(15, 14, 1);
        assert!(patch_entropy(&img, 14).is_err());
    }

    #[test]
    fn twenty_patches_split_11_7_2() {
        let entropy: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let a = assign_density(&entropy, 5, 4);
        assert_eq!(count_levels(&a), (11, 7, 2));
        assert_eq!(primitive_budget(&a), 11 * 16 + 7 * 32 + 2 * 64);
        assert_eq!(primitive_budget(&a), 528);
    }

    #[test]
    fn single_patch_is_high() {
        let a = assign_density(&[0.3], 1, 1);
        assert_eq!(count_levels(&a), (0, 0, 1));
    }

    #[test]
    fn equal_entropies_split_deterministically() {
        let a = assign_density(&vec![1.5; 20], 4, 5);
        assert_eq!(count_levels(&a), (11, 7, 2));
        // Row-major tie-break: earliest indices get the lowest ranks.
        assert_eq!(a.level[0], DensityLevel::Low);
        assert_eq!(a.level[10], DensityLevel::Low);
        assert_eq!(a.level[11], DensityLevel::Medium);
        assert_eq!(a.level[18], DensityLevel::High);
        assert_eq!(a.level[19], DensityLevel::High);
    }

    #[test]
    fn assignment_invariant_to_entropy_offset() {
        let mut rng = StdRng::seed_from_u64(22);
        let entropy: Vec<f64> = (0..37).map(|_| rng.gen_range(0.0..5.0)).collect();
        let shifted: Vec<f64> = entropy.iter().map(|e| e + 2.75).collect();
        let a = assign_density(&entropy, 37, 1);
        let b = assign_density(&shifted, 37, 1);
        assert_eq!(a.level, b.level);
    }

    #[test]
    fn levels_monotone_in_entropy() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..20 {
            let n = rng.gen_range(1..120usize);
            let entropy: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
            let a = assign_density(&entropy, n, 1);
            for i in 0..n {
                for j in 0..n {
                    let rank = |l: DensityLevel| match l {
                        DensityLevel::Low => 0,
                        DensityLevel::Medium => 1,
                        DensityLevel::High => 2,
                    };
                    if rank(a.level[i]) < rank(a.level[j]) {
                        assert!(
                            a.entropy[i] <= a.entropy[j],
                            "lower level must not have higher entropy"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn uniform_medium_grid_budget() {
        let a = DensityAssignment::uniform(37, 37, DensityLevel::Medium);
        assert_eq!(primitive_budget(&a), 43_808);
    }

    #[test]
    fn all_low_budget() {
        let a = DensityAssignment::uniform(9, 3, DensityLevel::Low);
        assert_eq!(primitive_budget(&a), 16 * 27);
    }

    #[test]
    fn expected_budget_per_patch() {
        // The nominal per-patch expectation from the declared fractions.
        let nominal = LOW_FRACTION * 16.0 + MEDIUM_FRACTION * 32.0 + 0.15 * 64.0;
        assert!((nominal - 29.6).abs() < 1e-9);
        // The published fractions sum to 1.05, so the realized split gives
        // the remainder (~10%) to High: for counts divisible by 20 the
        // realized mean is exactly 0.55*16 + 0.35*32 + 0.10*64 = 26.4.
        let entropy: Vec<f64> = (0..200).map(|i| i as f64 * 0.01).collect();
        let a = assign_density(&entropy, 20, 10);
        let budget = primitive_budget(&a) as f64;
        assert!((budget / 200.0 - 26.4).abs() < 1e-12);
    }
}
