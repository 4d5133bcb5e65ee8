//! Desk-scale slide preprocessing: Otsu foreground detection, non-overlapping
//! tiling, tissue filtering, cancer-ratio computation, and tile manifests.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::domain::RegionLabel;

#[derive(Debug, Error)]
pub enum TileError {
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("tile size must be at least 1")]
    TileSizeZero,
    #[error("pixel buffer is {got} bytes, expected {want} for {w}x{h}")]
    PixelCountMismatch {
        got: usize,
        want: usize,
        w: usize,
        h: usize,
    },
    #[error("mask is {mask_w}x{mask_h} but image is {img_w}x{img_h}")]
    MaskMismatch {
        mask_w: usize,
        mask_h: usize,
        img_w: usize,
        img_h: usize,
    },
    #[error("tile ({tx},{ty}) lies outside the {cols}x{rows} grid")]
    TileOutOfGrid {
        tx: usize,
        ty: usize,
        cols: usize,
        rows: usize,
    },
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Row-major 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, TileError> {
        if pixels.len() != width * height {
            return Err(TileError::PixelCountMismatch {
                got: pixels.len(),
                want: width * height,
                w: width,
                h: height,
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn histogram(&self) -> [u64; 256] {
        let mut hist = [0u64; 256];
        for &p in &self.pixels {
            hist[p as usize] += 1;
        }
        hist
    }
}

/// Row-major binary mask aligned with an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, TileError> {
        if bits.len() != width * height {
            return Err(TileError::PixelCountMismatch {
                got: bits.len(),
                want: width * height,
                w: width,
                h: height,
            });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Cuts the `w`x`h` sub-mask at pixel origin (`x0`, `y0`).
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Mask {
        let mut bits = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            bits.extend_from_slice(&self.bits[y * self.width + x0..y * self.width + x0 + w]);
        }
        Mask {
            width: w,
            height: h,
            bits,
        }
    }
}

/// Which side of the Otsu threshold counts as tissue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    DarkIsTissue,
    BrightIsTissue,
}

/// Threshold maximizing between-class variance over a 256-bin histogram.
///
/// Candidate thresholds are those whose low class (pixels <= t) is non-empty;
/// an empty high class contributes zero variance. Ties resolve to the
/// smallest threshold, so a single-intensity histogram yields that intensity.
pub fn otsu_threshold(hist: &[u64; 256]) -> Result<u8, TileError> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return Err(TileError::EmptyHistogram);
    }
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &h)| i as f64 * h as f64)
        .sum();

    let mut w0 = 0u64;
    let mut sum0 = 0.0f64;
    let mut best_var = f64::NEG_INFINITY;
    let mut best_t = 0u8;
    for t in 0..256usize {
        w0 += hist[t];
        sum0 += t as f64 * hist[t] as f64;
        if w0 == 0 {
            continue;
        }
        let w1 = total - w0;
        let var = if w1 == 0 {
            0.0
        } else {
            let mean0 = sum0 / w0 as f64;
            let mean1 = (sum_all - sum0) / w1 as f64;
            let diff = mean0 - mean1;
            w0 as f64 * w1 as f64 * diff * diff
        };
        if var > best_var {
            best_var = var;
            best_t = t as u8;
        }
    }
    Ok(best_t)
}

/// Binarizes an image against the Otsu threshold of its own histogram,
/// oriented by polarity.
pub fn foreground_mask(img: &GrayImage, polarity: Polarity) -> Result<Mask, TileError> {
    let threshold = otsu_threshold(&img.histogram())?;
    let bits = img
        .pixels
        .iter()
        .map(|&p| match polarity {
            Polarity::DarkIsTissue => p <= threshold,
            Polarity::BrightIsTissue => p > threshold,
        })
        .collect();
    Mask::new(img.width, img.height, bits)
}

/// Tile-grid coordinates of one non-overlapping tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileCoord {
    pub tx: usize,
    pub ty: usize,
}

/// Non-overlapping tiles covering an image in reading order; edge remainders
/// smaller than the tile are dropped.
pub fn tile_grid(width: usize, height: usize, tile: usize) -> Result<Vec<TileCoord>, TileError> {
    if tile == 0 {
        return Err(TileError::TileSizeZero);
    }
    let cols = width / tile;
    let rows = height / tile;
    let mut out = Vec::with_capacity(cols * rows);
    for ty in 0..rows {
        for tx in 0..cols {
            out.push(TileCoord { tx, ty });
        }
    }
    Ok(out)
}

fn set_fraction_in_tile(coord: TileCoord, tile: usize, mask: &Mask) -> Result<f64, TileError> {
    let cols = mask.width / tile;
    let rows = mask.height / tile;
    if coord.tx >= cols || coord.ty >= rows {
        return Err(TileError::TileOutOfGrid {
            tx: coord.tx,
            ty: coord.ty,
            cols,
            rows,
        });
    }
    let x0 = coord.tx * tile;
    let y0 = coord.ty * tile;
    let mut set = 0u64;
    for y in y0..y0 + tile {
        for x in x0..x0 + tile {
            if mask.get(x, y) {
                set += 1;
            }
        }
    }
    Ok(set as f64 / (tile * tile) as f64)
}

/// Fraction of tissue-mask pixels inside one tile.
pub fn tissue_fraction(coord: TileCoord, tile: usize, mask: &Mask) -> Result<f64, TileError> {
    set_fraction_in_tile(coord, tile, mask)
}

/// Fraction of annotation-mask pixels inside one tile.
pub fn cancer_ratio(coord: TileCoord, tile: usize, mask: &Mask) -> Result<f64, TileError> {
    set_fraction_in_tile(coord, tile, mask)
}

/// One manifest row describing a retained tile.
#[derive(Debug, Clone, PartialEq)]
pub struct TileManifestRow {
    pub slide_id: String,
    pub tile_x: usize,
    pub tile_y: usize,
    pub tissue_fraction: f64,
    pub cancer_ratio: f64,
    pub region_label: RegionLabel,
}

/// Quantizes a fraction to the manifest's six decimal digits.
fn quantize(frac: f64) -> f64 {
    (frac * 1e6).round() / 1e6
}

/// Builds manifest rows for one slide: tiles with tissue at or above
/// `min_tissue` are kept and labeled by their cancer ratio against
/// `pos_threshold`. Fractions are stored at the manifest's 6-decimal
/// precision so written rows read back exactly.
pub fn build_manifest(
    slide_id: &str,
    img: &GrayImage,
    tissue_mask: &Mask,
    cancer_mask: &Mask,
    tile: usize,
    min_tissue: f64,
    pos_threshold: f64,
) -> Result<Vec<TileManifestRow>, TileError> {
    for mask in [tissue_mask, cancer_mask] {
        if mask.width != img.width || mask.height != img.height {
            return Err(TileError::MaskMismatch {
                mask_w: mask.width,
                mask_h: mask.height,
                img_w: img.width,
                img_h: img.height,
            });
        }
    }
    let mut rows = Vec::new();
    for coord in tile_grid(img.width, img.height, tile)? {
        let tissue = tissue_fraction(coord, tile, tissue_mask)?;
        if tissue < min_tissue {
            continue;
        }
        let cancer = quantize(cancer_ratio(coord, tile, cancer_mask)?);
        let label = classify_or_manifest_err(cancer, pos_threshold)?;
        rows.push(TileManifestRow {
            slide_id: slide_id.to_string(),
            tile_x: coord.tx,
            tile_y: coord.ty,
            tissue_fraction: quantize(tissue),
            cancer_ratio: cancer,
            region_label: label,
        });
    }
    Ok(rows)
}

fn classify_or_manifest_err(ratio: f64, threshold: f64) -> Result<RegionLabel, TileError> {
    crate::domain::classify_region_label(ratio, threshold).map_err(|e| TileError::Manifest {
        line: 0,
        reason: e.to_string(),
    })
}

pub const MANIFEST_HEADER: &str = "slide_id,tile_x,tile_y,tissue_fraction,cancer_ratio,region_label";

/// Renders manifest rows as CSV with 6-decimal fractions.
pub fn manifest_to_csv(rows: &[TileManifestRow]) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{}",
            r.slide_id,
            r.tile_x,
            r.tile_y,
            r.tissue_fraction,
            r.cancer_ratio,
            r.region_label.as_str()
        )
        .unwrap();
    }
    out
}

pub fn write_manifest(path: &Path, rows: &[TileManifestRow]) -> Result<(), TileError> {
    std::fs::write(path, manifest_to_csv(rows)).map_err(|source| TileError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses manifest CSV, rejecting malformed rows with their line number.
pub fn manifest_from_csv(text: &str) -> Result<Vec<TileManifestRow>, TileError> {
    let err = |line: usize, reason: &str| TileError::Manifest {
        line,
        reason: reason.to_string(),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == MANIFEST_HEADER => {}
        Some((_, other)) => {
            return Err(err(1, &format!("bad header {other:?}")));
        }
        None => return Err(err(1, "missing header")),
    }
    let mut rows = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 6 {
            return Err(err(line, &format!("expected 6 columns, got {}", fields.len())));
        }
        let tile_x = fields[1]
            .parse::<usize>()
            .map_err(|_| err(line, "tile_x is not an integer"))?;
        let tile_y = fields[2]
            .parse::<usize>()
            .map_err(|_| err(line, "tile_y is not an integer"))?;
        let tissue = fields[3]
            .parse::<f64>()
            .map_err(|_| err(line, "tissue_fraction is not a number"))?;
        let cancer = fields[4]
            .parse::<f64>()
            .map_err(|_| err(line, "cancer_ratio is not a number"))?;
        if !(0.0..=1.0).contains(&tissue) {
            return Err(err(line, "tissue_fraction outside [0,1]"));
        }
        if !(0.0..=1.0).contains(&cancer) {
            return Err(err(line, "cancer_ratio outside [0,1]"));
        }
        let region_label = RegionLabel::parse(fields[5])
            .ok_or_else(|| err(line, &format!("unknown region label {:?}", fields[5])))?;
        rows.push(TileManifestRow {
            slide_id: fields[0].to_string(),
            tile_x,
            tile_y,
            tissue_fraction: tissue,
            cancer_ratio: cancer,
            region_label,
        });
    }
    Ok(rows)
}

pub fn read_manifest(path: &Path) -> Result<Vec<TileManifestRow>, TileError> {
    let text = std::fs::read_to_string(path).map_err(|source| TileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    manifest_from_csv(&text)
}
