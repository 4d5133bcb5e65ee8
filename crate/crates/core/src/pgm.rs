//! Binary PGM (P5) reading and writing, 8-bit, max value 255.

use std::path::Path;

use thiserror::Error;

use crate::tile::GrayImage;

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("not a P5 PGM file")]
    BadMagic,
    #[error("header field missing or not a number")]
    BadHeader,
    #[error("max value must be 255, got {0}")]
    BadMaxVal(u32),
    #[error("payload is {have} bytes, expected {want}")]
    Truncated { have: usize, want: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub fn to_pgm_bytes(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Parses P5 bytes, tolerating `#` comments and any whitespace between
/// header tokens.
pub fn from_pgm_bytes(bytes: &[u8]) -> Result<GrayImage, PgmError> {
    let mut pos = 0usize;

    fn skip_separators(bytes: &[u8], mut pos: usize) -> usize {
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

    fn read_number(bytes: &[u8], start: usize) -> Result<(u32, usize), PgmError> {
        let pos = skip_separators(bytes, start);
        let mut end = pos;
        while end < bytes.len() && bytes[end].is_ascii_digit() {
            end += 1;
        }
        if end == pos {
            return Err(PgmError::BadHeader);
        }
        let text = std::str::from_utf8(&bytes[pos..end]).map_err(|_| PgmError::BadHeader)?;
        let value = text.parse::<u32>().map_err(|_| PgmError::BadHeader)?;
        Ok((value, end))
    }

    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(PgmError::BadMagic);
    }
    pos += 2;
    let (width, p) = read_number(bytes, pos)?;
    let (height, p) = read_number(bytes, p)?;
    let (maxval, p) = read_number(bytes, p)?;
    if maxval != 255 {
        return Err(PgmError::BadMaxVal(maxval));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos = p + 1;
    let want = width as usize * height as usize;
    let have = bytes.len().saturating_sub(pos);
    if have < want {
        return Err(PgmError::Truncated { have, want });
    }
    GrayImage::new(
        width as usize,
        height as usize,
        bytes[pos..pos + want].to_vec(),
    )
    .map_err(|_| PgmError::Truncated { have, want })
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<(), PgmError> {
    std::fs::write(path, to_pgm_bytes(img)).map_err(|source| PgmError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage, PgmError> {
    let bytes = std::fs::read(path).map_err(|source| PgmError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_pgm_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_header_tolerance() {
        let img = GrayImage::new(3, 2, vec![0, 128, 255, 10, 20, 30]).unwrap();
        let bytes = to_pgm_bytes(&img);
        assert_eq!(from_pgm_bytes(&bytes).unwrap(), img);

        let commented = b"P5\n# synthetic slide\n3 2\n255\n\x00\x80\xff\x0a\x14\x1e";
        assert_eq!(from_pgm_bytes(commented).unwrap(), img);
    }

    #[test]
    fn rejects_malformed_files() {
        assert!(matches!(from_pgm_bytes(b"P6\n1 1\n255\nx"), Err(PgmError::BadMagic)));
        assert!(matches!(
            from_pgm_bytes(b"P5\n2 2\n65535\n\x00\x00\x00\x00"),
            Err(PgmError::BadMaxVal(65535))
        ));
        assert!(matches!(
            from_pgm_bytes(b"P5\n2 2\n255\n\x00\x00"),
            Err(PgmError::Truncated { have: 2, want: 4 })
        ));
        assert!(from_pgm_bytes(b"P5\nx 2\n255\n").is_err());
    }
}
