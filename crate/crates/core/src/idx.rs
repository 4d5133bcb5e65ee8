//! Bit-exact reader and writer for the IDX container format used by MNIST.
//!
//! Layout: a big-endian 32-bit magic word 0x0000080N (two zero bytes, dtype
//! code 0x08 for unsigned bytes, N = number of dimensions), then N big-endian
//! 32-bit dimension sizes, then the row-major payload. Only dtype 0x08 is
//! accepted; files may be plain or externally decompressed.

use std::fs;
use std::path::Path;

use thiserror::Error;

pub const DTYPE_U8: u8 = 0x08;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("bad magic: leading bytes must be zero, got {0:#04x} {1:#04x}")]
    BadMagic(u8, u8),
    #[error("unsupported dtype code {0:#04x} (only 0x08 unsigned byte)")]
    UnsupportedDtype(u8),
    #[error("dimension count must be at least 1")]
    ZeroNdim,
    #[error("header truncated: need {need} bytes, have {have}")]
    HeaderTruncated { need: usize, have: usize },
    #[error("payload is {have} bytes but header promises {need}")]
    PayloadMismatch { need: usize, have: usize },
    #[error("element count overflows")]
    Overflow,
    #[error("images and labels disagree: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("images file must have at least 2 dimensions, got {0}")]
    NotAnImagesFile(usize),
    #[error("labels file must have exactly 1 dimension, got {0}")]
    NotALabelsFile(usize),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Parsed IDX header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxHeader {
    pub dtype_code: u8,
    pub dims: Vec<usize>,
}

/// Dense row-major byte tensor, the payload of one IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl RawTensor {
    pub fn element_count(&self) -> usize {
        self.data.len()
    }
}

fn checked_product(dims: &[usize]) -> Result<usize, IdxError> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(IdxError::Overflow)
}

/// Parses a complete IDX byte stream. Trailing bytes beyond the promised
/// payload are rejected, so parse and serialize round-trip exactly.
pub fn parse_idx(bytes: &[u8]) -> Result<RawTensor, IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::HeaderTruncated {
            need: 4,
            have: bytes.len(),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(IdxError::BadMagic(bytes[0], bytes[1]));
    }
    if bytes[2] != DTYPE_U8 {
        return Err(IdxError::UnsupportedDtype(bytes[2]));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(IdxError::ZeroNdim);
    }
    let header_len = 4 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(IdxError::HeaderTruncated {
            need: header_len,
            have: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| {
            let off = 4 + 4 * i;
            u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
                as usize
        })
        .collect();
    let count = checked_product(&dims)?;
    let have = bytes.len() - header_len;
    if have != count {
        return Err(IdxError::PayloadMismatch { need: count, have });
    }
    Ok(RawTensor {
        dims,
        data: bytes[header_len..].to_vec(),
    })
}

/// Serializes a tensor back to IDX bytes; inverse of `parse_idx`.
pub fn serialize_idx(t: &RawTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * t.dims.len() + t.data.len());
    out.extend_from_slice(&[0, 0, DTYPE_U8, t.dims.len() as u8]);
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&t.data);
    out
}

/// Maps each byte to value/255 and flattens every leading-dimension slice
/// into one feature vector.
pub fn normalize(raw: &RawTensor) -> Vec<Vec<f32>> {
    let n = raw.dims[0];
    if n == 0 {
        return Vec::new();
    }
    let stride = raw.data.len() / n;
    raw.data
        .chunks_exact(stride)
        .map(|chunk| chunk.iter().map(|&b| b as f32 / 255.0).collect())
        .collect()
}

/// One normalized feature vector paired with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub features: Vec<f32>,
    pub label: u8,
}

fn read_file(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads an images/labels IDX pair into labeled examples, checking that the
/// two files agree on the example count.
pub fn load_split(image_path: &Path, label_path: &Path) -> Result<Vec<LabeledExample>, IdxError> {
    let images = parse_idx(&read_file(image_path)?)?;
    let labels = parse_idx(&read_file(label_path)?)?;
    if images.dims.len() < 2 {
        return Err(IdxError::NotAnImagesFile(images.dims.len()));
    }
    if labels.dims.len() != 1 {
        return Err(IdxError::NotALabelsFile(labels.dims.len()));
    }
    if images.dims[0] != labels.dims[0] {
        return Err(IdxError::CountMismatch {
            images: images.dims[0],
            labels: labels.dims[0],
        });
    }
    let features = normalize(&images);
    Ok(features
        .into_iter()
        .zip(labels.data)
        .map(|(features, label)| LabeledExample { features, label })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_label_style_vector() {
        let bytes = [0x00, 0x00, 0x08, 0x01, 0, 0, 0, 3, 5, 0, 9];
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.dims, vec![3]);
        assert_eq!(t.data, vec![5, 0, 9]);
    }

    #[test]
    fn parses_three_dimensional_images() {
        let mut bytes = vec![0x00, 0x00, 0x08, 0x03];
        for d in [2u32, 2, 2] {
            bytes.extend_from_slice(&d.to_be_bytes());
        }
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6, 7, 8]);
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.dims, vec![2, 2, 2]);
        assert_eq!(t.element_count(), 8);
    }

    #[test]
    fn rejects_malformed_streams() {
        // Truncated payload: header promises 10, gives 9.
        let mut bytes = vec![0x00, 0x00, 0x08, 0x01, 0, 0, 0, 10];
        bytes.extend_from_slice(&[0; 9]);
        assert!(matches!(
            parse_idx(&bytes),
            Err(IdxError::PayloadMismatch { need: 10, have: 9 })
        ));
        // Trailing garbage.
        let mut bytes = vec![0x00, 0x00, 0x08, 0x01, 0, 0, 0, 1, 7, 7];
        assert!(parse_idx(&bytes).is_err());
        bytes.truncate(0);
        assert!(parse_idx(&bytes).is_err());
        // Non-zero leading magic bytes.
        assert!(matches!(
            parse_idx(&[0x01, 0x00, 0x08, 0x01, 0, 0, 0, 0]),
            Err(IdxError::BadMagic(1, 0))
        ));
        // Unsupported dtype (0x0D = float).
        assert!(matches!(
            parse_idx(&[0x00, 0x00, 0x0D, 0x01, 0, 0, 0, 0]),
            Err(IdxError::UnsupportedDtype(0x0D))
        ));
        // Zero dimensions.
        assert!(matches!(parse_idx(&[0, 0, 0x08, 0]), Err(IdxError::ZeroNdim)));
        // Header cut inside the dims table.
        assert!(matches!(
            parse_idx(&[0, 0, 0x08, 2, 0, 0]),
            Err(IdxError::HeaderTruncated { .. })
        ));
    }

    #[test]
    fn normalize_maps_endpoints_exactly() {
        let t = RawTensor {
            dims: vec![3, 1],
            data: vec![0, 255, 51],
        };
        let v = normalize(&t);
        assert_eq!(v[0][0], 0.0);
        assert_eq!(v[1][0], 1.0);
        assert_eq!(v[2][0], 0.2);
    }

    #[test]
    fn normalize_is_monotone() {
        let t = RawTensor {
            dims: vec![256],
            data: (0..=255).collect(),
        };
        let v = normalize(&t);
        for pair in v.windows(2) {
            assert!(pair[1][0] > pair[0][0]);
        }
    }

    #[test]
    fn load_split_pairs_and_checks_counts() {
        let dir = tempfile::tempdir().unwrap();
        let images = RawTensor {
            dims: vec![3, 2, 2],
            data: vec![0, 51, 102, 153, 204, 255, 10, 20, 30, 40, 50, 60],
        };
        let labels = RawTensor {
            dims: vec![3],
            data: vec![7, 0, 7],
        };
        let img_path = dir.path().join("img.idx");
        let lbl_path = dir.path().join("lbl.idx");
        std::fs::write(&img_path, serialize_idx(&images)).unwrap();
        std::fs::write(&lbl_path, serialize_idx(&labels)).unwrap();

        let split = load_split(&img_path, &lbl_path).unwrap();
        assert_eq!(split.len(), 3);
        assert_eq!(split[0].label, 7);
        assert_eq!(split[0].features, vec![0.0, 0.2, 0.4, 0.6]);

        let short = RawTensor {
            dims: vec![2],
            data: vec![1, 2],
        };
        std::fs::write(&lbl_path, serialize_idx(&short)).unwrap();
        assert!(matches!(
            load_split(&img_path, &lbl_path),
            Err(IdxError::CountMismatch {
                images: 3,
                labels: 2
            })
        ));
    }

    proptest! {
        /// serialize(parse(b)) == b for every well-formed stream.
        #[test]
        fn roundtrip_preserves_bytes(
            dims in proptest::collection::vec(1usize..6, 1..4),
            seed in any::<u64>()
        ) {
            let count: usize = dims.iter().product();
            let data: Vec<u8> = (0..count).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 3) as u8).collect();
            let bytes = serialize_idx(&RawTensor { dims, data });
            let parsed = parse_idx(&bytes).unwrap();
            prop_assert_eq!(serialize_idx(&parsed), bytes);
        }
    }
}
