//! Turns a scan into a fixed-size two-channel network input: the
//! normalized denoised image and its ROI indicator, both zero-padded into
//! the center of a reference frame.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dataio::{self, BinaryMask, DataError, FloatRaster, GrayImage};
use crate::preprocess::{self, FilterError};
use crate::retinagraph::{self, GraphError, LayerSegmentation, RoiMask};

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("image {rows}x{cols} exceeds reference frame {ref_rows}x{ref_cols}")]
    TooLarge {
        rows: usize,
        cols: usize,
        ref_rows: usize,
        ref_cols: usize,
    },
    #[error("crop window {rows}x{cols} at ({row_off}, {col_off}) leaves the {frame_rows}x{frame_cols} frame")]
    WindowOutOfBounds {
        rows: usize,
        cols: usize,
        row_off: usize,
        col_off: usize,
        frame_rows: usize,
        frame_cols: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("reference frame {rows}x{cols} is not divisible by {factor}")]
    IndivisibleReference { rows: usize, cols: usize, factor: usize },
    #[error("malformed sample sidecar: {0}")]
    BadSidecar(String),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, SampleError>;

/// Single-channel float image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(SampleError::DimMismatch(format!(
                "{rows}x{cols} image with {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self {
            rows: mask.rows(),
            cols: mask.cols(),
            data: mask.to_f32(),
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }
}

/// The frame every sample is padded into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReferenceDims {
    pub rows: usize,
    pub cols: usize,
}

impl Default for ReferenceDims {
    fn default() -> Self {
        Self {
            rows: 640,
            cols: 1024,
        }
    }
}

impl ReferenceDims {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    /// Both sides must survive `depth` halvings.
    pub fn check_divisible(&self, depth: usize) -> Result<()> {
        let factor = 1usize << depth;
        if self.rows == 0 || self.cols == 0 || !self.rows.is_multiple_of(factor) || !self.cols.is_multiple_of(factor) {
            return Err(SampleError::IndivisibleReference {
                rows: self.rows,
                cols: self.cols,
                factor,
            });
        }
        Ok(())
    }
}

/// Two-channel network input. Channel 0 is the normalized denoised scan,
/// channel 1 the ROI indicator; both are zero outside the embedded window.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub rows: usize,
    pub cols: usize,
    /// Channel-major, `2 * rows * cols` values.
    pub values: Vec<f32>,
    /// Top-left corner of the original scan inside the frame.
    pub offset: (usize, usize),
    pub orig_dims: (usize, usize),
}

impl Sample {
    pub const CHANNELS: usize = 2;

    pub fn reference(&self) -> ReferenceDims {
        ReferenceDims::new(self.rows, self.cols)
    }

    pub fn image_channel(&self) -> &[f32] {
        &self.values[..self.rows * self.cols]
    }

    pub fn roi_channel(&self) -> &[f32] {
        &self.values[self.rows * self.cols..]
    }

    /// ROI support cropped back to original coordinates.
    pub fn roi_support(&self) -> BinaryMask {
        let roi = self.roi_channel();
        let (r0, c0) = self.offset;
        BinaryMask::from_fn(self.orig_dims.0, self.orig_dims.1, |r, c| {
            roi[(r + r0) * self.cols + c + c0] > 0.5
        })
        .expect("orig dims are nonzero")
    }

    /// Pads a mask in original coordinates into this sample's frame.
    pub fn pad_mask(&self, mask: &BinaryMask) -> Result<Vec<f32>> {
        if (mask.rows(), mask.cols()) != self.orig_dims {
            return Err(SampleError::DimMismatch(format!(
                "mask {}x{} vs sample window {}x{}",
                mask.rows(),
                mask.cols(),
                self.orig_dims.0,
                self.orig_dims.1
            )));
        }
        let mut out = vec![0.0; self.rows * self.cols];
        let (r0, c0) = self.offset;
        for r in 0..mask.rows() {
            for c in 0..mask.cols() {
                out[(r + r0) * self.cols + c + c0] = mask.get(r, c) as u8 as f32;
            }
        }
        Ok(out)
    }

    pub fn sidecar_line(&self) -> String {
        format!(
            "offset={},{} orig={},{}",
            self.offset.0, self.offset.1, self.orig_dims.0, self.orig_dims.1
        )
    }

    pub fn to_raster(&self) -> FloatRaster {
        FloatRaster::new(self.rows, self.cols, Self::CHANNELS, self.values.clone())
            .expect("sample values are finite")
    }

    pub fn from_raster(raster: FloatRaster, sidecar: &str) -> Result<Self> {
        if raster.channels() != Self::CHANNELS {
            return Err(SampleError::DimMismatch(format!(
                "sample raster has {} channels",
                raster.channels()
            )));
        }
        let (offset, orig_dims) = parse_sidecar(sidecar)?;
        let (rows, cols) = (raster.rows(), raster.cols());
        if offset.0 + orig_dims.0 > rows || offset.1 + orig_dims.1 > cols {
            return Err(SampleError::BadSidecar(format!(
                "window exceeds {rows}x{cols} frame"
            )));
        }
        Ok(Self {
            rows,
            cols,
            values: raster.into_values(),
            offset,
            orig_dims,
        })
    }
}

fn parse_sidecar(line: &str) -> Result<((usize, usize), (usize, usize))> {
    let bad = || SampleError::BadSidecar(line.trim().to_string());
    let pair = |text: &str| -> Result<(usize, usize)> {
        let (a, b) = text.split_once(',').ok_or_else(bad)?;
        Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
    };
    let mut offset = None;
    let mut orig = None;
    for token in line.split_whitespace() {
        match token.split_once('=') {
            Some(("offset", v)) => offset = Some(pair(v)?),
            Some(("orig", v)) => orig = Some(pair(v)?),
            _ => return Err(bad()),
        }
    }
    let orig = orig.ok_or_else(bad)?;
    if orig.0 == 0 || orig.1 == 0 {
        return Err(bad());
    }
    Ok((offset.ok_or_else(bad)?, orig))
}

/// Path of the text sidecar stored next to a sample raster.
pub fn sidecar_path(raster_path: &Path) -> PathBuf {
    raster_path.with_extension("txt")
}

pub fn save_sample(sample: &Sample, path: &Path) -> Result<()> {
    dataio::write_float_raster(&sample.to_raster(), path)?;
    let line = format!("{}\n", sample.sidecar_line());
    dataio::write_atomic(&sidecar_path(path), line.as_bytes())?;
    Ok(())
}

pub fn load_sample(path: &Path) -> Result<Sample> {
    let raster = dataio::read_float_raster(path)?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|source| DataError::Io { path: side, source })?;
    Sample::from_raster(raster, text.lines().next().unwrap_or(""))
}

/// Min-max scaling to `[0, 1]`; a constant image maps to zeros.
pub fn normalize(img: &GrayImage) -> FloatImage {
    let lo = *img.pixels().iter().min().expect("nonempty image");
    let hi = *img.pixels().iter().max().expect("nonempty image");
    let data = if hi == lo {
        vec![0.0; img.pixels().len()]
    } else {
        let span = (hi - lo) as f32;
        img.pixels().iter().map(|&v| (v - lo) as f32 / span).collect()
    };
    FloatImage {
        rows: img.rows(),
        cols: img.cols(),
        data,
    }
}

/// Floor-centered offset of a `rows x cols` window in the frame.
pub fn centered_offset(rows: usize, cols: usize, reference: ReferenceDims) -> Result<(usize, usize)> {
    if rows > reference.rows || cols > reference.cols {
        return Err(SampleError::TooLarge {
            rows,
            cols,
            ref_rows: reference.rows,
            ref_cols: reference.cols,
        });
    }
    Ok(((reference.rows - rows) / 2, (reference.cols - cols) / 2))
}

pub fn pad_to_reference(img: &FloatImage, reference: ReferenceDims) -> Result<(FloatImage, (usize, usize))> {
    let (r0, c0) = centered_offset(img.rows, img.cols, reference)?;
    let mut out = FloatImage::zeros(reference.rows, reference.cols);
    for r in 0..img.rows {
        let dst = (r + r0) * reference.cols + c0;
        out.data[dst..dst + img.cols].copy_from_slice(&img.data[r * img.cols..(r + 1) * img.cols]);
    }
    Ok((out, (r0, c0)))
}

pub fn crop_from_reference(
    padded: &FloatImage,
    offset: (usize, usize),
    orig_dims: (usize, usize),
) -> Result<FloatImage> {
    crop_plane(&padded.data, padded.rows, padded.cols, offset, orig_dims)
}

pub(crate) fn crop_plane(
    plane: &[f32],
    rows: usize,
    cols: usize,
    offset: (usize, usize),
    orig_dims: (usize, usize),
) -> Result<FloatImage> {
    let (r0, c0) = offset;
    let (h, w) = orig_dims;
    if h == 0 || w == 0 || r0 + h > rows || c0 + w > cols {
        return Err(SampleError::WindowOutOfBounds {
            rows: h,
            cols: w,
            row_off: r0,
            col_off: c0,
            frame_rows: rows,
            frame_cols: cols,
        });
    }
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        let src = (r + r0) * cols + c0;
        data.extend_from_slice(&plane[src..src + w]);
    }
    FloatImage::new(h, w, data)
}

/// Stacks two padded planes into a sample.
pub fn stack_channels(
    image: &FloatImage,
    roi: &FloatImage,
    offset: (usize, usize),
    orig_dims: (usize, usize),
) -> Result<Sample> {
    if image.rows != roi.rows || image.cols != roi.cols {
        return Err(SampleError::DimMismatch(format!(
            "image {}x{} vs ROI {}x{}",
            image.rows, image.cols, roi.rows, roi.cols
        )));
    }
    let mut values = Vec::with_capacity(2 * image.data.len());
    values.extend_from_slice(&image.data);
    values.extend(roi.data.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }));
    Ok(Sample {
        rows: image.rows,
        cols: image.cols,
        values,
        offset,
        orig_dims,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrepareParams {
    pub sigma_d: f64,
    pub w_min: f64,
}

impl Default for PrepareParams {
    fn default() -> Self {
        Self {
            sigma_d: 2.0,
            w_min: retinagraph::DEFAULT_W_MIN,
        }
    }
}

/// A prepared sample together with the intermediate products.
#[derive(Debug, Clone)]
pub struct PreparedScan {
    pub denoised: GrayImage,
    pub layers: LayerSegmentation,
    pub roi: RoiMask,
    pub sample: Sample,
}

/// Denoise, extract ILM/ISM, build the ROI, normalize, pad, stack.
pub fn prepare_scan(img: &GrayImage, reference: ReferenceDims, params: &PrepareParams) -> Result<PreparedScan> {
    // Fail on oversize input before doing any work.
    centered_offset(img.rows(), img.cols(), reference)?;
    let denoised = preprocess::denoise(img, params.sigma_d)?;
    let layers = retinagraph::segment_layers(&denoised, params.w_min)?;
    let roi = retinagraph::roi_mask(&layers.ilm, &layers.ism, img.rows(), img.cols())?;
    let (image, offset) = pad_to_reference(&normalize(&denoised), reference)?;
    let (roi_plane, _) = pad_to_reference(&FloatImage::from_mask(&roi.mask), reference)?;
    let sample = stack_channels(&image, &roi_plane, offset, (img.rows(), img.cols()))?;
    Ok(PreparedScan {
        denoised,
        layers,
        roi,
        sample,
    })
}

pub fn prepare_sample(img: &GrayImage, reference: ReferenceDims, params: &PrepareParams) -> Result<Sample> {
    prepare_scan(img, reference, params).map(|p| p.sample)
}
