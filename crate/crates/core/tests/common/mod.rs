//! Shared test support: a deterministic 10-class digit corpus written as IDX
//! files and exercised through the same ingestion path as real data.
//!
//! Each 28x28 sample combines a 5x7 bitmap glyph (random scale, shear,
//! stroke dropout, dilation, position jitter) with a fixed per-class smooth
//! background pattern and per-sample low-frequency style fields, plus pixel
//! noise. Classes are broad factor-structured clusters that a small dense
//! network separates comfortably, while each sample still varies enough that
//! instance ranking inside a bag is non-trivial.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use topmil_core::idx::{serialize_idx, RawTensor};

const GLYPHS: [[u8; 7]; 10] = [
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
    [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
];

const EDGE: usize = 28;
const N_FIELDS: usize = 8;
const MEAN_AMP: f32 = 70.0;
const STYLE_AMP: f32 = 15.0;

fn normal(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller from two uniforms.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

/// Smooth 28x28 pattern: 4x4 unit normals upsampled bilinearly.
fn smooth_field(rng: &mut ChaCha8Rng) -> [f32; EDGE * EDGE] {
    let mut coarse = [[0f32; 4]; 4];
    for row in coarse.iter_mut() {
        for v in row.iter_mut() {
            *v = normal(rng);
        }
    }
    let mut out = [0f32; EDGE * EDGE];
    let pos: Vec<(usize, f32)> = (0..EDGE)
        .map(|i| {
            let x = i as f32 * 3.0 / (EDGE - 1) as f32;
            let xi = (x as usize).min(2);
            (xi, x - xi as f32)
        })
        .collect();
    for (yy, &(yi, fy)) in pos.iter().enumerate() {
        for (xx, &(xi, fx)) in pos.iter().enumerate() {
            let interp = |r: usize| coarse[r][xi] * (1.0 - fx) + coarse[r][xi + 1] * fx;
            out[yy * EDGE + xx] = interp(yi) * (1.0 - fy) + interp(yi + 1) * fy;
        }
    }
    out
}

struct StyleBasis {
    /// Fixed per-class mean pattern.
    class_mean: Vec<[f32; EDGE * EDGE]>,
    /// Per-class style fields weighted by per-sample factors.
    fields: Vec<Vec<[f32; EDGE * EDGE]>>,
}

fn style_basis() -> StyleBasis {
    let mut mean_rng = ChaCha8Rng::seed_from_u64(54321);
    let mut field_rng = ChaCha8Rng::seed_from_u64(12345);
    StyleBasis {
        class_mean: (0..10).map(|_| smooth_field(&mut mean_rng)).collect(),
        fields: (0..10)
            .map(|_| (0..N_FIELDS).map(|_| smooth_field(&mut field_rng)).collect())
            .collect(),
    }
}

fn render_digit(digit: u8, basis: &StyleBasis, rng: &mut ChaCha8Rng) -> [u8; EDGE * EDGE] {
    let glyph = &GLYPHS[digit as usize];
    let mut canvas = [0f32; EDGE * EDGE];

    // Glyph shape with random scale, shear, dropout, and position.
    let scale = rng.random_range(2..=3usize);
    let (gw, gh) = (5 * scale, 7 * scale);
    let ox = rng.random_range(1..=EDGE - gw - 2);
    let oy = rng.random_range(1..=EDGE - gh - 2);
    let shear = rng.random_range(-2i32..=2);
    let dropout = rng.random_bool(0.5);
    for (r, bits) in glyph.iter().enumerate() {
        let row_shift = ((shear * r as i32) as f32 / 6.0).round() as i32;
        for c in 0..5 {
            if (bits >> (4 - c)) & 1 == 0 {
                continue;
            }
            if dropout && rng.random_bool(0.15) {
                continue;
            }
            let x0 = (ox + c * scale) as i32 + row_shift;
            let y0 = oy + r * scale;
            for dy in 0..scale {
                for dx in 0..scale {
                    let x = x0 + dx as i32;
                    if (0..EDGE as i32).contains(&x) {
                        canvas[(y0 + dy) * EDGE + x as usize] = 230.0;
                    }
                }
            }
        }
    }
    if rng.random_bool(0.5) {
        // Thicken strokes by one pixel.
        let src = canvas;
        for y in 0..EDGE {
            for x in 0..EDGE {
                if src[y * EDGE + x] > 0.0 {
                    continue;
                }
                let lit = (x > 0 && src[y * EDGE + x - 1] > 0.0)
                    || (x + 1 < EDGE && src[y * EDGE + x + 1] > 0.0)
                    || (y > 0 && src[(y - 1) * EDGE + x] > 0.0)
                    || (y + 1 < EDGE && src[(y + 1) * EDGE + x] > 0.0);
                if lit {
                    canvas[y * EDGE + x] = 184.0;
                }
            }
        }
    }

    // Class pattern, style factors, pixel noise.
    let factors: Vec<f32> = (0..N_FIELDS).map(|_| normal(rng)).collect();
    let mean = &basis.class_mean[digit as usize];
    let fields = &basis.fields[digit as usize];
    let mut out = [0u8; EDGE * EDGE];
    for (i, o) in out.iter_mut().enumerate() {
        let mut v = canvas[i] + mean[i] * MEAN_AMP + 60.0;
        for (f, field) in factors.iter().zip(fields) {
            v += f * field[i] * STYLE_AMP;
        }
        v += rng.random_range(-30.0..=30.0);
        *o = v.round().clamp(0.0, 255.0) as u8;
    }
    out
}

fn write_split(
    dir: &Path,
    prefix: &str,
    per_class: usize,
    basis: &StyleBasis,
    rng: &mut ChaCha8Rng,
) -> (PathBuf, PathBuf) {
    let n = per_class * 10;
    let mut images = Vec::with_capacity(n * EDGE * EDGE);
    let mut labels = Vec::with_capacity(n);
    // Interleave classes so any prefix is class-balanced.
    for i in 0..n {
        let digit = (i % 10) as u8;
        images.extend_from_slice(&render_digit(digit, basis, rng));
        labels.push(digit);
    }
    let images_path = dir.join(format!("{prefix}-images.idx"));
    let labels_path = dir.join(format!("{prefix}-labels.idx"));
    std::fs::write(
        &images_path,
        serialize_idx(&RawTensor {
            dims: vec![n, EDGE, EDGE],
            data: images,
        }),
    )
    .unwrap();
    std::fs::write(
        &labels_path,
        serialize_idx(&RawTensor {
            dims: vec![n],
            data: labels,
        }),
    )
    .unwrap();
    (images_path, labels_path)
}

pub struct DigitCorpus {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

/// Writes a train/test IDX pair under `dir`, `per_class_*` samples per digit.
pub fn generate_digit_corpus(
    dir: &Path,
    per_class_train: usize,
    per_class_test: usize,
    seed: u64,
) -> DigitCorpus {
    let basis = style_basis();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train_images, train_labels) = write_split(dir, "train", per_class_train, &basis, &mut rng);
    let (test_images, test_labels) = write_split(dir, "test", per_class_test, &basis, &mut rng);
    DigitCorpus {
        train_images,
        train_labels,
        test_images,
        test_labels,
    }
}

/// Config text for one digit-corpus run; callers append task-specific keys.
pub fn base_run_config(corpus: &DigitCorpus, out_dir: &Path) -> String {
    format!(
        "task = mnist_mil\n\
         standardize = true\n\
         train_images = {}\n\
         train_labels = {}\n\
         test_images = {}\n\
         test_labels = {}\n\
         out_dir = {}\n",
        corpus.train_images.display(),
        corpus.train_labels.display(),
        corpus.test_images.display(),
        corpus.test_labels.display(),
        out_dir.display(),
    )
}
