//! Synthetic grayscale "slides" with known annotation masks: bright glass
//! background, dark elliptical tissue blobs, and speckled darker lesion
//! regions inside the tissue. Instance-level ground truth is exact because
//! the lesion mask is generated, not inferred.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::pgm::{write_pgm, PgmError};
use crate::tile::{
    build_manifest, foreground_mask, write_manifest, GrayImage, Mask, Polarity, TileError,
    TileManifestRow,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error(transparent)]
    Tile(#[from] TileError),
    #[error(transparent)]
    Pgm(#[from] PgmError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct SynthParams {
    pub n_pos_slides: usize,
    pub n_neg_slides: usize,
    /// Square slide edge in pixels.
    pub slide: usize,
    pub tile: usize,
    pub instance: usize,
    pub min_tissue: f64,
    pub pos_threshold: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_pos_slides: 4,
            n_neg_slides: 4,
            slide: 1024,
            tile: 256,
            instance: 32,
            min_tissue: 0.10,
            pos_threshold: 0.20,
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<(), SynthError> {
        let err = |msg: &str| Err(SynthError::Geometry(msg.to_string()));
        if self.n_pos_slides + self.n_neg_slides == 0 {
            return err("need at least one slide");
        }
        if self.instance == 0 || self.tile == 0 || self.slide == 0 {
            return err("slide, tile, and instance must be positive");
        }
        if self.slide % self.tile != 0 {
            return err("tile must divide the slide edge evenly");
        }
        if self.tile % self.instance != 0 {
            return err("instance must divide the tile edge evenly");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub slide_ids: Vec<String>,
    pub manifest_path: PathBuf,
    pub rows: Vec<TileManifestRow>,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 - self.cx) / self.rx;
        let dy = (y as f64 - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Renders one slide and its lesion mask. Lesions are painted only where
/// tissue exists, so the mask and the texture agree exactly.
fn render_slide(params: &SynthParams, positive: bool, rng: &mut ChaCha8Rng) -> (GrayImage, Mask) {
    let edge = params.slide;
    let tissue_blobs: Vec<Ellipse> = (0..rng.random_range(3..=5))
        .map(|_| Ellipse {
            cx: rng.random_range(0.0..edge as f64),
            cy: rng.random_range(0.0..edge as f64),
            rx: rng.random_range(edge as f64 / 6.0..edge as f64 / 2.5),
            ry: rng.random_range(edge as f64 / 6.0..edge as f64 / 2.5),
        })
        .collect();
    let lesions: Vec<Ellipse> = if positive {
        (0..rng.random_range(2..=4))
            .map(|_| {
                // Center each lesion inside a tissue blob so tiles with real
                // tissue carry it.
                let blob = tissue_blobs[rng.random_range(0..tissue_blobs.len())];
                Ellipse {
                    cx: blob.cx + rng.random_range(-blob.rx / 2.0..blob.rx / 2.0),
                    cy: blob.cy + rng.random_range(-blob.ry / 2.0..blob.ry / 2.0),
                    rx: rng.random_range(params.tile as f64 / 2.0..params.tile as f64 * 1.3),
                    ry: rng.random_range(params.tile as f64 / 2.0..params.tile as f64 * 1.3),
                }
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut pixels = Vec::with_capacity(edge * edge);
    let mut bits = Vec::with_capacity(edge * edge);
    for y in 0..edge {
        for x in 0..edge {
            let in_tissue = tissue_blobs.iter().any(|b| b.contains(x, y));
            let in_lesion = in_tissue && lesions.iter().any(|l| l.contains(x, y));
            let value = if in_lesion {
                // Darker base with a checker speckle.
                let speckle = if (x + y) % 2 == 0 { -18.0 } else { 18.0 };
                95.0 + speckle + rng.random_range(-8.0..=8.0)
            } else if in_tissue {
                150.0 + rng.random_range(-10.0..=10.0)
            } else {
                230.0 + rng.random_range(-6.0..=6.0)
            };
            pixels.push(clamp_u8(value));
            bits.push(in_lesion);
        }
    }
    (
        GrayImage {
            width: edge,
            height: edge,
            pixels,
        },
        Mask {
            width: edge,
            height: edge,
            bits,
        },
    )
}

/// Generates slides, lesion masks, and the combined tile manifest under
/// `out_dir`. Slides alternate positive/negative so any prefix/suffix split
/// contains both kinds. Tissue is detected through the same thresholding
/// path real runs use.
pub fn make_synthetic_slides(
    params: &SynthParams,
    seed: u64,
    out_dir: &Path,
) -> Result<SynthOutput, SynthError> {
    params.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|source| SynthError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;

    let total = params.n_pos_slides + params.n_neg_slides;
    let mut labels = Vec::with_capacity(total);
    let (mut pos_left, mut neg_left) = (params.n_pos_slides, params.n_neg_slides);
    for i in 0..total {
        let positive = if pos_left == 0 {
            false
        } else if neg_left == 0 {
            true
        } else {
            i % 2 == 0
        };
        if positive {
            pos_left -= 1;
        } else {
            neg_left -= 1;
        }
        labels.push(positive);
    }

    let mut slide_ids = Vec::with_capacity(total);
    let mut rows = Vec::new();
    for (i, &positive) in labels.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let (img, lesion_mask) = render_slide(params, positive, &mut rng);

        let slide_id = format!("slide_{i:03}");
        write_pgm(&out_dir.join(format!("{slide_id}.pgm")), &img)?;
        let mask_img = GrayImage {
            width: lesion_mask.width,
            height: lesion_mask.height,
            pixels: lesion_mask
                .bits
                .iter()
                .map(|&b| if b { 255 } else { 0 })
                .collect(),
        };
        write_pgm(&out_dir.join(format!("{slide_id}_mask.pgm")), &mask_img)?;

        let tissue = foreground_mask(&img, Polarity::DarkIsTissue)?;
        rows.extend(build_manifest(
            &slide_id,
            &img,
            &tissue,
            &lesion_mask,
            params.tile,
            params.min_tissue,
            params.pos_threshold,
        )?);
        slide_ids.push(slide_id);
    }

    let manifest_path = out_dir.join("manifest.csv");
    write_manifest(&manifest_path, &rows)?;
    Ok(SynthOutput {
        slide_ids,
        manifest_path,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::RegionLabel;
    use crate::pgm::read_pgm;
    use crate::tile::read_manifest;

    fn small_params() -> SynthParams {
        SynthParams {
            n_pos_slides: 2,
            n_neg_slides: 2,
            slide: 256,
            tile: 64,
            instance: 16,
            ..SynthParams::default()
        }
    }

    #[test]
    fn geometry_validation() {
        let mut p = small_params();
        p.slide = 250; // not a multiple of tile
        assert!(matches!(
            make_synthetic_slides(&p, 0, Path::new("/tmp/unused")),
            Err(SynthError::Geometry(_))
        ));
        let mut p = small_params();
        p.instance = 24; // does not divide tile
        assert!(matches!(
            make_synthetic_slides(&p, 0, Path::new("/tmp/unused")),
            Err(SynthError::Geometry(_))
        ));
    }

    #[test]
    fn generates_slides_masks_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let params = small_params();
        let out = make_synthetic_slides(&params, 11, dir.path()).unwrap();
        assert_eq!(out.slide_ids.len(), 4);

        // Files exist and parse; manifest reads back exactly.
        for id in &out.slide_ids {
            let img = read_pgm(&dir.path().join(format!("{id}.pgm"))).unwrap();
            assert_eq!(img.width, 256);
            read_pgm(&dir.path().join(format!("{id}_mask.pgm"))).unwrap();
        }
        let rows = read_manifest(&out.manifest_path).unwrap();
        assert_eq!(rows, out.rows);
        assert!(!rows.is_empty());

        // Positive slides carry positive tiles; negative slides only
        // negative ones (no lesions at all).
        let pos_rows: Vec<_> = rows.iter().filter(|r| r.slide_id == "slide_000").collect();
        assert!(pos_rows
            .iter()
            .any(|r| r.region_label == RegionLabel::Positive));
        let neg_rows: Vec<_> = rows.iter().filter(|r| r.slide_id == "slide_001").collect();
        assert!(!neg_rows.is_empty());
        assert!(neg_rows
            .iter()
            .all(|r| r.region_label == RegionLabel::Negative && r.cancer_ratio == 0.0));

        // Deterministic regeneration.
        let dir2 = tempfile::tempdir().unwrap();
        let again = make_synthetic_slides(&params, 11, dir2.path()).unwrap();
        assert_eq!(again.rows, out.rows);
        let a = std::fs::read(dir.path().join("slide_000.pgm")).unwrap();
        let b = std::fs::read(dir2.path().join("slide_000.pgm")).unwrap();
        assert_eq!(a, b);
    }
}
