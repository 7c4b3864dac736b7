//! Speckle reduction with a bilateral filter whose range parameter is
//! estimated from the background (vitreous) rows of the scan.

use rayon::prelude::*;
use thiserror::Error;

use crate::dataio::GrayImage;

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("invalid bilateral parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilateralParams {
    /// Spatial standard deviation, pixels.
    pub sigma_d: f64,
    /// Range standard deviation, intensity units.
    pub sigma_r: f64,
    /// Window half-width.
    pub radius: usize,
}

impl BilateralParams {
    pub fn new(sigma_d: f64, sigma_r: f64, radius: usize) -> Result<Self, FilterError> {
        if !(sigma_d > 0.0 && sigma_d.is_finite()) {
            return Err(FilterError::InvalidParams(format!("sigma_d = {sigma_d}")));
        }
        if !(sigma_r > 0.0 && sigma_r.is_finite()) {
            return Err(FilterError::InvalidParams(format!("sigma_r = {sigma_r}")));
        }
        if radius < 1 {
            return Err(FilterError::InvalidParams("radius must be at least 1".into()));
        }
        Ok(Self {
            sigma_d,
            sigma_r,
            radius,
        })
    }

    /// Window radius `ceil(2 * sigma_d)`, at least 1.
    pub fn with_default_radius(sigma_d: f64, sigma_r: f64) -> Result<Self, FilterError> {
        let radius = if sigma_d > 0.0 && sigma_d.is_finite() {
            ((2.0 * sigma_d).ceil() as usize).max(1)
        } else {
            1
        };
        Self::new(sigma_d, sigma_r, radius)
    }
}

/// Bilateral filter over a `(2r+1)^2` window clipped at the image border.
///
/// Gaussians are unnormalized; the per-pixel normalizer is the sum of the
/// in-bounds weights. Spatial weights come from a precomputed table and
/// range weights from a 256-entry lookup, both in double precision.
pub fn bilateral_filter(img: &GrayImage, p: &BilateralParams) -> GrayImage {
    let (rows, cols) = (img.rows(), img.cols());
    let rad = p.radius as isize;
    let side = 2 * p.radius + 1;
    let spatial: Vec<f64> = (0..side * side)
        .map(|i| {
            let dy = (i / side) as f64 - rad as f64;
            let dx = (i % side) as f64 - rad as f64;
            (-(dx * dx + dy * dy) / (2.0 * p.sigma_d * p.sigma_d)).exp()
        })
        .collect();
    let range: Vec<f64> = (0..256)
        .map(|d| {
            let d = d as f64;
            (-(d * d) / (2.0 * p.sigma_r * p.sigma_r)).exp()
        })
        .collect();

    let src = img.pixels();
    let mut out = vec![0u8; rows * cols];
    out.par_chunks_mut(cols).enumerate().for_each(|(r, out_row)| {
        let r = r as isize;
        let r0 = (r - rad).max(0);
        let r1 = (r + rad).min(rows as isize - 1);
        for (c, slot) in out_row.iter_mut().enumerate() {
            let c = c as isize;
            let c0 = (c - rad).max(0);
            let c1 = (c + rad).min(cols as isize - 1);
            let center = src[r as usize * cols + c as usize];
            let mut num = 0.0;
            let mut norm = 0.0;
            for y in r0..=r1 {
                let srow = &src[y as usize * cols..(y as usize + 1) * cols];
                let krow = &spatial[((y - r + rad) as usize) * side..];
                for x in c0..=c1 {
                    let v = srow[x as usize];
                    let w = krow[(x - c + rad) as usize] * range[v.abs_diff(center) as usize];
                    num += w * v as f64;
                    norm += w;
                }
            }
            // The center tap has weight 1, so norm >= 1.
            *slot = (num / norm).round().clamp(0.0, 255.0) as u8;
        }
    });
    GrayImage::new(rows, cols, out).expect("same dims as input")
}

/// Number of top rows sampled for the range estimate: 10% of the height,
/// at least 8, never more than the image has.
pub fn default_background_rows(rows: usize) -> usize {
    rows.div_ceil(10).max(8).min(rows)
}

/// Population standard deviation of the first `top_rows` rows, floored at 1.
pub fn estimate_sigma_r(img: &GrayImage, top_rows: usize) -> f64 {
    let top_rows = top_rows.clamp(1, img.rows());
    let band = &img.pixels()[..top_rows * img.cols()];
    let n = band.len() as f64;
    let mean = band.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = band.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt().max(1.0)
}

/// Denoises with `sigma_d` and a range parameter estimated from the
/// background rows.
pub fn denoise(img: &GrayImage, sigma_d: f64) -> Result<GrayImage, FilterError> {
    let sigma_r = estimate_sigma_r(img, default_background_rows(img.rows()));
    let params = BilateralParams::with_default_radius(sigma_d, sigma_r)?;
    Ok(bilateral_filter(img, &params))
}
