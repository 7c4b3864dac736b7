//! Image, mask, and raster types with their on-disk formats, manifests,
//! and the synthetic retina phantom generator.

mod manifest;
mod phantom;
mod pgm;
mod raster;

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use manifest::{read_manifest, Manifest, ManifestRecord};
pub use phantom::{gen_phantom, phantom_series, Phantom, PhantomSpec};
pub use pgm::{read_mask_pgm, read_pgm, write_mask_pgm, write_pgm};
pub use raster::{read_float_raster, write_float_raster, FloatRaster};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed PGM header: {0}")]
    MalformedHeader(String),
    #[error("unsupported PGM maxval {0} (only 255 is accepted)")]
    UnsupportedMaxval(u32),
    #[error("truncated data: expected {expected} bytes, found {found}")]
    TruncatedData { expected: usize, found: usize },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    VersionMismatch(u32),
    #[error("non-finite value at index {0}")]
    NonFiniteValue(usize),
    #[error("referenced file does not exist: {0}")]
    MissingFile(PathBuf),
    #[error("manifest has no records")]
    EmptyManifest,
    #[error("manifest line {line}: expected 2 or 3 tab-separated fields, found {fields}")]
    BadRecord { line: usize, fields: usize },
    #[error("could not place {requested} non-overlapping cysts (placed {placed})")]
    PlacementFailure { requested: usize, placed: usize },
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// 8-bit grayscale scan, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    rows: usize,
    cols: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(rows: usize, cols: usize, pixels: Vec<u8>) -> Result<Self> {
        check_dims(rows, cols, pixels.len())?;
        Ok(Self { rows, cols, pixels })
    }

    pub fn filled(rows: usize, cols: usize, value: u8) -> Result<Self> {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> u8) -> Result<Self> {
        let mut pixels = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                pixels.push(f(r, c));
            }
        }
        Self::new(rows, cols, pixels)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.pixels[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.pixels[r * self.cols + c] = v;
    }
}

/// Binary mask with values in {0, 1}, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(rows: usize, cols: usize, bits: Vec<u8>) -> Result<Self> {
        check_dims(rows, cols, bits.len())?;
        if let Some(i) = bits.iter().position(|&b| b > 1) {
            return Err(DataError::InvalidDims(format!(
                "mask value {} at index {i} is not 0 or 1",
                bits[i]
            )));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0; rows * cols])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut bits = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                bits.push(f(r, c) as u8);
            }
        }
        Self::new(rows, cols, bits)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c] == 1
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, on: bool) {
        self.bits[r * self.cols + c] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// The mask as 0.0/1.0 floats.
    pub fn to_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }
}

fn check_dims(rows: usize, cols: usize, len: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(DataError::InvalidDims(format!("{rows}x{cols} has a zero dimension")));
    }
    if rows.checked_mul(cols) != Some(len) {
        return Err(DataError::InvalidDims(format!(
            "{rows}x{cols} needs {} values, got {len}",
            rows.saturating_mul(cols)
        )));
    }
    Ok(())
}
