//! Binary PGM ("P5", maxval 255).

use std::path::Path;

use super::{io_err, write_atomic, BinaryMask, DataError, GrayImage, Result};

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_pgm(&bytes)
}

/// Reads a PGM and maps nonzero bytes to 1.
pub fn read_mask_pgm(path: &Path) -> Result<BinaryMask> {
    let img = read_pgm(path)?;
    let bits = img.pixels().iter().map(|&p| (p != 0) as u8).collect();
    BinaryMask::new(img.rows(), img.cols(), bits)
}

pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    write_atomic(path, &encode_pgm(img.rows(), img.cols(), img.pixels().iter().copied()))
}

/// Writes mask bits as 0 / 255.
pub fn write_mask_pgm(mask: &BinaryMask, path: &Path) -> Result<()> {
    let bytes = mask.bits().iter().map(|&b| if b == 1 { 255 } else { 0 });
    write_atomic(path, &encode_pgm(mask.rows(), mask.cols(), bytes))
}

pub(crate) fn encode_pgm(rows: usize, cols: usize, pixels: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(pixels);
    out
}

pub(crate) fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(DataError::MalformedHeader("missing P5 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        pos = skip_whitespace_and_comments(bytes, pos);
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::MalformedHeader(format!("expected a number at byte {start}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| DataError::MalformedHeader(format!("number out of range: {text}")))?;
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(DataError::MalformedHeader("missing whitespace after maxval".into()));
    }
    pos += 1;

    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(DataError::UnsupportedMaxval(maxval));
    }
    let (cols, rows) = (width as usize, height as usize);
    if rows == 0 || cols == 0 {
        return Err(DataError::MalformedHeader(format!("zero dimension {cols}x{rows}")));
    }
    let expected = rows * cols;
    let data = &bytes[pos..];
    if data.len() < expected {
        return Err(DataError::TruncatedData {
            expected,
            found: data.len(),
        });
    }
    GrayImage::new(rows, cols, data[..expected].to_vec())
}

fn skip_whitespace_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_maps_width_to_cols() {
        let mut bytes = b"P5 6 4 255\n".to_vec();
        bytes.extend(0u8..24);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!((img.rows(), img.cols()), (4, 6));
        assert_eq!(img.get(0, 0), 0);
        assert_eq!(img.get(1, 0), 6);
        assert_eq!(img.get(3, 5), 23);
    }

    #[test]
    fn comments_in_header() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([9, 8]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.pixels(), &[9, 8]);
    }

    #[test]
    fn rejects_16_bit() {
        let mut bytes = b"P5 1 1 65535\n".to_vec();
        bytes.extend([0, 0]);
        assert!(matches!(decode_pgm(&bytes), Err(DataError::UnsupportedMaxval(65535))));
    }

    #[test]
    fn rejects_truncated_and_malformed() {
        let mut bytes = b"P5 3 3 255\n".to_vec();
        bytes.extend([1, 2, 3]);
        assert!(matches!(
            decode_pgm(&bytes),
            Err(DataError::TruncatedData { expected: 9, found: 3 })
        ));
        assert!(matches!(decode_pgm(b"P2 1 1 255\n0"), Err(DataError::MalformedHeader(_))));
        assert!(matches!(decode_pgm(b"P5 x 1 255\n0"), Err(DataError::MalformedHeader(_))));
    }

    #[test]
    fn single_pixel_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.pgm");
        write_pgm(&GrayImage::new(1, 1, vec![42]).unwrap(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 12);
        assert_eq!(&bytes[..11], b"P5\n1 1\n255\n");
        assert_eq!(*bytes.last().unwrap(), 0x2A);
    }

    #[test]
    fn mask_encoding_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let mask = BinaryMask::new(1, 3, vec![1, 0, 1]).unwrap();
        let a = dir.path().join("a.pgm");
        let b = dir.path().join("b.pgm");
        write_mask_pgm(&mask, &a).unwrap();
        write_mask_pgm(&mask, &b).unwrap();
        let bytes = std::fs::read(&a).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[255, 0, 255]);
        assert_eq!(bytes, std::fs::read(&b).unwrap());
        assert_eq!(read_mask_pgm(&a).unwrap(), mask);
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless(rows in 1usize..12, cols in 1usize..12, seed in any::<u64>()) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let img = GrayImage::from_fn(rows, cols, |_, _| rng.below(256) as u8).unwrap();
            let bytes = encode_pgm(rows, cols, img.pixels().iter().copied());
            prop_assert_eq!(decode_pgm(&bytes).unwrap(), img);
        }
    }
}
