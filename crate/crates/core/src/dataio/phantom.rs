//! Synthetic B-scan phantoms with known layer boundaries and cyst masks.
//!
//! Layout from top to bottom: dark vitreous, retina band (with dark
//! elliptical cysts), a thin dark outer band just above the ISM, a
//! hyper-reflective ISM band, and a dim choroid. Both the ILM and the ISM
//! are dark-to-light transitions; the ISM step is the strongest edge in
//! the default intensities.

use crate::retinagraph::LayerPath;
use crate::rng::SplitMix64;

use super::{BinaryMask, DataError, GrayImage, Result};

const MAX_PLACEMENT_TRIES: usize = 1000;
/// Clearance, in rows, between cysts and the band edges.
const CYST_GAP: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub rows: usize,
    pub cols: usize,
    /// First retina row; everything above is vitreous.
    pub ilm_row: usize,
    /// First row of the hyper-reflective ISM band.
    pub ism_row: usize,
    pub n_cysts: usize,
    /// Inclusive range of ellipse semi-axis lengths, in pixels.
    pub cyst_axis_range: (usize, usize),
    /// Standard deviation of the multiplicative speckle.
    pub speckle_sigma: f64,
    pub seed: u64,
    pub vitreous: f64,
    pub retina: f64,
    pub cyst: f64,
    /// Dark band immediately above the ISM.
    pub outer_band: f64,
    pub outer_band_rows: usize,
    pub ism_band: f64,
    /// Thickness of the ISM band.
    pub ism_margin: usize,
    pub choroid: f64,
}

impl PhantomSpec {
    /// Spec with default intensities (vitreous 20, retina 180, cysts 30).
    pub fn new(rows: usize, cols: usize, ilm_row: usize, ism_row: usize, seed: u64) -> Self {
        Self {
            rows,
            cols,
            ilm_row,
            ism_row,
            n_cysts: 3,
            cyst_axis_range: (2, 4),
            speckle_sigma: 0.15,
            seed,
            vitreous: 20.0,
            retina: 180.0,
            cyst: 30.0,
            outer_band: 20.0,
            outer_band_rows: 2,
            ism_band: 255.0,
            ism_margin: 4,
            choroid: 40.0,
        }
    }

    /// Rows (inclusive) available to cyst pixels.
    fn cyst_rows(&self) -> Option<(usize, usize)> {
        let lo = self.ilm_row + CYST_GAP;
        let hi = self.ism_row.checked_sub(self.outer_band_rows + CYST_GAP)?;
        (lo <= hi).then_some((lo, hi))
    }

    fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(DataError::InvalidSpec(msg));
        if self.rows == 0 || self.cols == 0 {
            return fail(format!("{}x{} image", self.rows, self.cols));
        }
        if !(0 < self.ilm_row && self.ilm_row < self.ism_row && self.ism_row < self.rows) {
            return fail(format!(
                "need 0 < ilm_row ({}) < ism_row ({}) < rows ({})",
                self.ilm_row, self.ism_row, self.rows
            ));
        }
        if self.ism_row + self.ism_margin > self.rows {
            return fail("ISM band extends past the last row".into());
        }
        let (amin, amax) = self.cyst_axis_range;
        if amin == 0 || amin > amax {
            return fail(format!("cyst axis range ({amin}, {amax})"));
        }
        if self.n_cysts > 0 {
            let Some((lo, hi)) = self.cyst_rows() else {
                return fail("retina band too thin for cysts".into());
            };
            if 2 * amax + 1 > hi - lo + 1 || 2 * amax + 3 > self.cols {
                return fail(format!("cyst semi-axis {amax} does not fit the band"));
            }
        }
        if !(self.speckle_sigma >= 0.0 && self.speckle_sigma.is_finite()) {
            return fail(format!("speckle sigma {}", self.speckle_sigma));
        }
        Ok(())
    }

    fn band_mean(&self, r: usize) -> f64 {
        if r < self.ilm_row {
            self.vitreous
        } else if r + self.outer_band_rows < self.ism_row {
            self.retina
        } else if r < self.ism_row {
            self.outer_band
        } else if r < self.ism_row + self.ism_margin {
            self.ism_band
        } else {
            self.choroid
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: GrayImage,
    pub mask: BinaryMask,
    pub ilm: LayerPath,
    pub ism: LayerPath,
}

/// Generates a phantom; a pure function of `spec`.
pub fn gen_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let (rows, cols) = (spec.rows, spec.cols);
    let mut rng = SplitMix64::new(spec.seed);
    let mut mask = BinaryMask::zeros(rows, cols)?;

    if spec.n_cysts > 0 {
        let (lo, hi) = spec.cyst_rows().expect("validated");
        let (amin, amax) = spec.cyst_axis_range;
        let mut placed = 0;
        let mut tries = 0;
        while placed < spec.n_cysts {
            if tries == MAX_PLACEMENT_TRIES * spec.n_cysts {
                return Err(DataError::PlacementFailure {
                    requested: spec.n_cysts,
                    placed,
                });
            }
            tries += 1;
            let a = rng.range_inclusive(amin, amax);
            let b = rng.range_inclusive(amin, amax);
            let cr = rng.range_inclusive(lo + a, hi - a);
            let cc = rng.range_inclusive(1 + b, cols - 2 - b);
            let pixels = ellipse_pixels(cr, cc, a, b);
            let clear = pixels.iter().all(|&(r, c)| {
                !mask.get(r, c)
                    && !mask.get(r - 1, c)
                    && !mask.get(r + 1, c)
                    && !mask.get(r, c - 1)
                    && !mask.get(r, c + 1)
            });
            if clear {
                for (r, c) in pixels {
                    mask.set(r, c, true);
                }
                placed += 1;
            }
        }
    }

    let mut pixels = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let band = spec.band_mean(r);
        for c in 0..cols {
            let mean = if mask.get(r, c) { spec.cyst } else { band };
            let noisy = mean * (1.0 + spec.speckle_sigma * rng.gaussian());
            pixels.push(noisy.round().clamp(0.0, 255.0) as u8);
        }
    }

    Ok(Phantom {
        image: GrayImage::new(rows, cols, pixels)?,
        mask,
        ilm: LayerPath::flat(spec.ilm_row, cols),
        ism: LayerPath::flat(spec.ism_row, cols),
    })
}

fn ellipse_pixels(cr: usize, cc: usize, a: usize, b: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in cr - a..=cr + a {
        for c in cc - b..=cc + b {
            let dr = (r as f64 - cr as f64) / a as f64;
            let dc = (c as f64 - cc as f64) / b as f64;
            if dr * dr + dc * dc <= 1.0 {
                out.push((r, c));
            }
        }
    }
    out
}

/// A reproducible family of varied phantom specs: layer rows, cyst count,
/// and cyst sizes drawn from `seed`.
pub fn phantom_series(count: usize, rows: usize, cols: usize, seed: u64) -> Vec<PhantomSpec> {
    let mut rng = SplitMix64::new(seed);
    (0..count)
        .map(|_| {
            let ilm = rng.range_inclusive(rows * 3 / 20, rows / 4);
            let ism = rng.range_inclusive(rows * 5 / 8, rows * 3 / 4);
            let band = ism.saturating_sub(ilm + 2 + 2 * CYST_GAP);
            let amax = (band / 6).clamp(2, 6);
            let mut spec = PhantomSpec::new(rows, cols, ilm, ism, rng.next_u64());
            spec.n_cysts = rng.range_inclusive(1, 4);
            spec.cyst_axis_range = (2, amax);
            spec
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn components_4(mask: &BinaryMask) -> usize {
        let (rows, cols) = (mask.rows(), mask.cols());
        let mut seen = vec![false; rows * cols];
        let mut count = 0;
        for start in 0..rows * cols {
            if seen[start] || mask.bits()[start] == 0 {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (r, c) = (i / cols, i % cols);
                let mut push = |j: usize| {
                    if !seen[j] && mask.bits()[j] == 1 {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if r > 0 {
                    push(i - cols);
                }
                if r + 1 < rows {
                    push(i + cols);
                }
                if c > 0 {
                    push(i - 1);
                }
                if c + 1 < cols {
                    push(i + 1);
                }
            }
        }
        count
    }

    #[test]
    fn no_cysts_gives_empty_mask() {
        let mut spec = PhantomSpec::new(48, 64, 10, 32, 5);
        spec.n_cysts = 0;
        let p = gen_phantom(&spec).unwrap();
        assert_eq!(p.mask.count_ones(), 0);
    }

    #[test]
    fn deterministic_in_seed() {
        let spec = PhantomSpec::new(64, 96, 12, 44, 77);
        let a = gen_phantom(&spec).unwrap();
        let b = gen_phantom(&spec).unwrap();
        assert_eq!(a, b);
        let mut other = spec.clone();
        other.seed = 78;
        assert_ne!(gen_phantom(&other).unwrap().image, a.image);
    }

    #[test]
    fn three_cysts_are_three_components() {
        for seed in 0..20 {
            let spec = PhantomSpec::new(64, 96, 12, 44, seed);
            let p = gen_phantom(&spec).unwrap();
            assert_eq!(components_4(&p.mask), 3, "seed {seed}");
        }
    }

    #[test]
    fn mask_inside_band() {
        for spec in phantom_series(30, 64, 96, 11) {
            let p = gen_phantom(&spec).unwrap();
            for r in 0..spec.rows {
                for c in 0..spec.cols {
                    if p.mask.get(r, c) {
                        assert!(spec.ilm_row < r && r < spec.ism_row);
                    }
                }
            }
            assert_eq!(components_4(&p.mask), spec.n_cysts);
        }
    }

    #[test]
    fn noiseless_intensities() {
        let mut spec = PhantomSpec::new(40, 30, 8, 28, 1);
        spec.speckle_sigma = 0.0;
        spec.n_cysts = 1;
        let p = gen_phantom(&spec).unwrap();
        assert_eq!(p.image.get(0, 0), 20);
        assert_eq!(p.image.get(8, 0), 180);
        assert_eq!(p.image.get(27, 0), 20);
        assert_eq!(p.image.get(28, 0), 255);
        assert_eq!(p.image.get(39, 0), 40);
        let cyst = p.mask.bits().iter().position(|&b| b == 1).unwrap();
        assert_eq!(p.image.pixels()[cyst], 30);
    }

    #[test]
    fn crowded_band_fails_placement() {
        let mut spec = PhantomSpec::new(30, 20, 5, 22, 2);
        spec.n_cysts = 40;
        spec.cyst_axis_range = (3, 3);
        assert!(matches!(gen_phantom(&spec), Err(DataError::PlacementFailure { .. })));
    }

    #[test]
    fn invalid_layer_order() {
        let spec = PhantomSpec::new(30, 20, 20, 10, 2);
        assert!(matches!(gen_phantom(&spec), Err(DataError::InvalidSpec(_))));
    }
}
