//! OCTF float raster: `"OCTF"`, then little-endian u32 version, rows,
//! cols, channels, then channel-major little-endian f32 values.

use std::path::Path;

use super::{io_err, write_atomic, DataError, Result};

const MAGIC: &[u8; 4] = b"OCTF";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Multi-channel float image, channel-major (`values[(ch * rows + r) * cols + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FloatRaster {
    rows: usize,
    cols: usize,
    channels: usize,
    values: Vec<f32>,
}

impl FloatRaster {
    pub fn new(rows: usize, cols: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || channels == 0 {
            return Err(DataError::InvalidDims(format!("{rows}x{cols}x{channels}")));
        }
        if rows * cols * channels != values.len() {
            return Err(DataError::InvalidDims(format!(
                "{rows}x{cols}x{channels} needs {} values, got {}",
                rows * cols * channels,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFiniteValue(i));
        }
        Ok(Self {
            rows,
            cols,
            channels,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn channel(&self, ch: usize) -> &[f32] {
        let plane = self.rows * self.cols;
        &self.values[ch * plane..(ch + 1) * plane]
    }

    pub fn get(&self, ch: usize, r: usize, c: usize) -> f32 {
        self.values[(ch * self.rows + r) * self.cols + c]
    }
}

pub fn write_float_raster(raster: &FloatRaster, path: &Path) -> Result<()> {
    write_atomic(path, &encode(raster)?)
}

pub fn read_float_raster(path: &Path) -> Result<FloatRaster> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode(&bytes)
}

fn encode(raster: &FloatRaster) -> Result<Vec<u8>> {
    if let Some(i) = raster.values.iter().position(|v| !v.is_finite()) {
        return Err(DataError::NonFiniteValue(i));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * raster.values.len());
    out.extend_from_slice(MAGIC);
    for field in [VERSION, raster.rows as u32, raster.cols as u32, raster.channels as u32] {
        out.extend_from_slice(&field.to_le_bytes());
    }
    for v in &raster.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<FloatRaster> {
    if bytes.len() < 4 {
        return Err(DataError::TruncatedData {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(DataError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(DataError::TruncatedData {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != VERSION {
        return Err(DataError::VersionMismatch(version));
    }
    let (rows, cols, channels) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let count = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| DataError::InvalidDims(format!("{rows}x{cols}x{channels} overflows")))?;
    let expected = HEADER_LEN + 4 * count;
    if bytes.len() < expected {
        return Err(DataError::TruncatedData {
            expected,
            found: bytes.len(),
        });
    }
    let values = bytes[HEADER_LEN..expected]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    FloatRaster::new(rows, cols, channels, values)
}
