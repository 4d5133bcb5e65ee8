//! Dense-network classifier with exact hand-derived gradients: Glorot-uniform
//! initialization, forward pass, softmax cross-entropy, backprop, Adam, the
//! stepped learning-rate schedule, and checkpoint files.
//!
//! The module is generic over `f32`/`f64`. Training runs in single precision;
//! loss and gradient reductions accumulate in double precision over a
//! canonical instance order, so results are bit-reproducible regardless of
//! worker count. Class index 1 is the positive class.

use std::path::Path;

use ndarray::parallel::prelude::*;
use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis, NdFloat};
use num_traits::NumCast;
use rand::Rng;
use thiserror::Error;

/// Fixed row-chunk size for batch parallelism. Chunk boundaries depend only
/// on the batch size, which keeps reductions deterministic for any number of
/// worker threads.
const ROW_CHUNK: usize = 512;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("batch has {got} features, network expects {want}")]
    DimMismatch { got: usize, want: usize },
    #[error("invalid architecture: {0}")]
    BadArchitecture(String),
    #[error("{0} rows of logits but {1} labels")]
    LabelMismatch(usize, usize),
    #[error("gradient/state shapes do not match parameters")]
    ShapeMismatch,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("cache does not match this network")]
    CacheMismatch,
}

/// Weight matrix (fan_out x fan_in) and bias vector for one dense layer; also
/// the container for congruent per-layer tensors such as gradients and
/// optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub weights: Array2<T>,
    pub biases: Array1<T>,
}

impl<T: NdFloat> DenseLayer<T> {
    fn zeros_like(&self) -> Self {
        DenseLayer {
            weights: Array2::zeros(self.weights.raw_dim()),
            biases: Array1::zeros(self.biases.raw_dim()),
        }
    }

    fn congruent(&self, other: &Self) -> bool {
        self.weights.raw_dim() == other.weights.raw_dim()
            && self.biases.raw_dim() == other.biases.raw_dim()
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().all(|v| v.is_finite()) && self.biases.iter().all(|v| v.is_finite())
    }
}

/// Multi-layer perceptron with rectifier hidden activations and a two-way
/// softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    layers: Vec<DenseLayer<T>>,
}

/// Weight entries i.i.d. uniform on [-L, L] with L = sqrt(6 / (fan_in + fan_out)),
/// drawn in row-major order.
pub fn glorot_init<T: NdFloat, R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<T> {
    assert!(fan_in >= 1 && fan_out >= 1, "fans must be at least 1");
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_out, fan_in), |_| {
        <T as NumCast>::from(rng.random_range(-limit..=limit)).unwrap()
    })
}

impl<T: NdFloat> MlpParams<T> {
    /// Builds a Glorot-initialized network for layer widths
    /// `[input, hidden..., 2]`; biases start at zero.
    pub fn glorot<R: Rng>(dims: &[usize], rng: &mut R) -> Result<Self, NnError> {
        if dims.len() < 2 {
            return Err(NnError::BadArchitecture(
                "need at least input and output widths".into(),
            ));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(NnError::BadArchitecture("zero-width layer".into()));
        }
        if *dims.last().unwrap() != 2 {
            return Err(NnError::BadArchitecture(format!(
                "output width must be 2, got {}",
                dims.last().unwrap()
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer {
                weights: glorot_init(w[0], w[1], rng),
                biases: Array1::zeros(w[1]),
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<DenseLayer<T>>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::BadArchitecture("no layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[1].weights.ncols() != pair[0].weights.nrows() {
                return Err(NnError::BadArchitecture("layer widths do not chain".into()));
            }
        }
        for layer in &layers {
            if layer.biases.len() != layer.weights.nrows() {
                return Err(NnError::BadArchitecture("bias width mismatch".into()));
            }
        }
        if layers.last().unwrap().weights.nrows() != 2 {
            return Err(NnError::BadArchitecture("output width must be 2".into()));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer<T>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    /// Layer widths `[input, hidden..., output]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.weights.nrows()));
        dims
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.is_finite())
    }
}

/// Layer inputs captured by a forward pass; `inputs[0]` is the batch itself.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub layer_inputs: Vec<Array2<T>>,
}

impl<T: NdFloat> ForwardCache<T> {
    /// Restricts the cache to the given batch rows, preserving their order.
    pub fn select_rows(&self, rows: &[usize]) -> ForwardCache<T> {
        ForwardCache {
            layer_inputs: self
                .layer_inputs
                .iter()
                .map(|a| a.select(Axis(0), rows))
                .collect(),
        }
    }
}

/// x (n x k) times w' (k x m), computed over fixed row chunks in parallel.
fn matmul_chunked<T: NdFloat>(x: ArrayView2<T>, w_t: ArrayView2<T>) -> Array2<T> {
    if x.nrows() == 0 {
        return Array2::zeros((0, w_t.ncols()));
    }
    if x.nrows() <= ROW_CHUNK {
        return x.dot(&w_t);
    }
    let parts: Vec<Array2<T>> = x
        .axis_chunks_iter(Axis(0), ROW_CHUNK)
        .into_par_iter()
        .map(|chunk| chunk.dot(&w_t))
        .collect();
    let views: Vec<ArrayView2<T>> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).expect("chunk widths agree")
}

fn affine<T: NdFloat>(x: ArrayView2<T>, layer: &DenseLayer<T>) -> Array2<T> {
    let mut z = matmul_chunked(x, layer.weights.t());
    z += &layer.biases;
    z
}

fn relu_inplace<T: NdFloat>(z: &mut Array2<T>) {
    z.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Forward pass returning per-instance logit pairs and the cached layer
/// inputs needed by `backward`. Deterministic: identical parameters and batch
/// give bitwise-identical logits.
pub fn forward<T: NdFloat>(
    params: &MlpParams<T>,
    batch: Array2<T>,
) -> Result<(Array2<T>, ForwardCache<T>), NnError> {
    if batch.ncols() != params.input_dim() {
        return Err(NnError::DimMismatch {
            got: batch.ncols(),
            want: params.input_dim(),
        });
    }
    let depth = params.layers.len();
    let mut layer_inputs = Vec::with_capacity(depth);
    let mut current = batch;
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = affine(current.view(), layer);
        if l + 1 < depth {
            relu_inplace(&mut z);
        }
        layer_inputs.push(current);
        current = z;
    }
    Ok((current, ForwardCache { layer_inputs }))
}

/// Forward pass without caching, for prediction.
pub fn predict_logits<T: NdFloat>(
    params: &MlpParams<T>,
    batch: ArrayView2<T>,
) -> Result<Array2<T>, NnError> {
    if batch.ncols() != params.input_dim() {
        return Err(NnError::DimMismatch {
            got: batch.ncols(),
            want: params.input_dim(),
        });
    }
    let depth = params.layers.len();
    let mut current = affine(batch, &params.layers[0]);
    if depth > 1 {
        relu_inplace(&mut current);
    }
    for (l, layer) in params.layers.iter().enumerate().skip(1) {
        let mut z = affine(current.view(), layer);
        if l + 1 < depth {
            relu_inplace(&mut z);
        }
        current = z;
    }
    Ok(current)
}

/// Softmax probability of the positive class (index 1) per row, in double
/// precision.
pub fn positive_probs<T: NdFloat>(logits: &Array2<T>) -> Vec<f64> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let d = row[1].to_f64().unwrap() - row[0].to_f64().unwrap();
            1.0 / (1.0 + (-d).exp())
        })
        .collect()
}

pub fn predict_positive_probs<T: NdFloat>(
    params: &MlpParams<T>,
    batch: ArrayView2<T>,
) -> Result<Vec<f64>, NnError> {
    Ok(positive_probs(&predict_logits(params, batch)?))
}

/// Cross-entropy of one logit pair against a binary label, with
/// max-subtraction for stability. Returns the loss and dLoss/dLogits
/// (softmax minus one-hot).
pub fn softmax_ce<T: NdFloat>(logits: (T, T), positive: bool) -> (f64, (T, T)) {
    let z0 = logits.0.to_f64().unwrap();
    let z1 = logits.1.to_f64().unwrap();
    let m = z0.max(z1);
    let e0 = (z0 - m).exp();
    let e1 = (z1 - m).exp();
    let sum = e0 + e1;
    let p0 = e0 / sum;
    let p1 = e1 / sum;
    let z_label = if positive { z1 } else { z0 };
    let loss = sum.ln() - (z_label - m);
    let (g0, g1) = if positive { (p0, p1 - 1.0) } else { (p0 - 1.0, p1) };
    (
        loss,
        (
            <T as NumCast>::from(g0).unwrap(),
            <T as NumCast>::from(g1).unwrap(),
        ),
    )
}

/// Mean cross-entropy over a batch plus dLoss/dLogits already scaled by 1/n,
/// so downstream gradients are those of the mean selected-instance loss.
/// The loss sum accumulates in double precision over row order.
pub fn batch_softmax_ce<T: NdFloat>(
    logits: &Array2<T>,
    labels: &[bool],
) -> Result<(f64, Array2<T>), NnError> {
    if logits.nrows() != labels.len() {
        return Err(NnError::LabelMismatch(logits.nrows(), labels.len()));
    }
    if labels.is_empty() {
        return Err(NnError::LabelMismatch(0, 0));
    }
    let n = labels.len();
    let inv_n = <T as NumCast>::from(1.0 / n as f64).unwrap();
    let mut dlogits = Array2::<T>::zeros((n, 2));
    let mut loss_sum = 0.0f64;
    for (i, (row, &label)) in logits.rows().into_iter().zip(labels).enumerate() {
        let (loss, (g0, g1)) = softmax_ce((row[0], row[1]), label);
        loss_sum += loss;
        dlogits[[i, 0]] = g0 * inv_n;
        dlogits[[i, 1]] = g1 * inv_n;
    }
    Ok((loss_sum / n as f64, dlogits))
}

/// Per-layer parameter gradients, congruent with `MlpParams`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<DenseLayer<T>>,
}

/// x' (p x n) times y (n x q) accumulated across fixed row chunks in double
/// precision.
fn xt_dot_accum<T: NdFloat>(x: &Array2<T>, y: ArrayView2<T>) -> Array2<f64> {
    let parts: Vec<Array2<T>> = if x.nrows() <= ROW_CHUNK {
        vec![x.t().dot(&y)]
    } else {
        x.axis_chunks_iter(Axis(0), ROW_CHUNK)
            .into_par_iter()
            .zip(y.axis_chunks_iter(Axis(0), ROW_CHUNK).into_par_iter())
            .map(|(xc, yc)| xc.t().dot(&yc))
            .collect()
    };
    let mut acc = Array2::<f64>::zeros((x.ncols(), y.ncols()));
    for part in &parts {
        acc.zip_mut_with(part, |a, &v| *a += v.to_f64().unwrap());
    }
    acc
}

/// Exact gradients of the (already mean-scaled) loss with respect to every
/// weight and bias, from a matching forward cache.
pub fn backward<T: NdFloat>(
    params: &MlpParams<T>,
    cache: &ForwardCache<T>,
    dlogits: &Array2<T>,
) -> Result<Gradients<T>, NnError> {
    let depth = params.layers.len();
    if cache.layer_inputs.len() != depth {
        return Err(NnError::CacheMismatch);
    }
    let n = dlogits.nrows();
    if cache.layer_inputs[0].nrows() != n || dlogits.ncols() != 2 {
        return Err(NnError::CacheMismatch);
    }
    for (l, layer) in params.layers.iter().enumerate() {
        if cache.layer_inputs[l].ncols() != layer.weights.ncols() {
            return Err(NnError::CacheMismatch);
        }
    }

    let mut grads: Vec<DenseLayer<T>> = params.layers.iter().map(|l| l.zeros_like()).collect();
    let mut delta = dlogits.clone();
    for l in (0..depth).rev() {
        let inputs = &cache.layer_inputs[l];
        let dw = xt_dot_accum(&delta, inputs.view());
        grads[l].weights = dw.mapv(|v| <T as NumCast>::from(v).unwrap());

        let mut db = vec![0.0f64; delta.ncols()];
        for row in delta.rows() {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc += v.to_f64().unwrap();
            }
        }
        grads[l].biases = Array1::from_iter(db.iter().map(|&v| <T as NumCast>::from(v).unwrap()));

        if l > 0 {
            let mut upstream = matmul_chunked(delta.view(), params.layers[l].weights.view());
            // The layer input is post-rectifier: zero entries carry no gradient.
            upstream.zip_mut_with(inputs, |d, &a| {
                if a <= T::zero() {
                    *d = T::zero();
                }
            });
            delta = upstream;
        }
    }
    Ok(Gradients { layers: grads })
}

/// Adam moment accumulators, congruent with the parameters they update.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<DenseLayer<T>>,
    v: Vec<DenseLayer<T>>,
    step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: NdFloat> AdamState<T> {
    pub fn new(params: &MlpParams<T>) -> Self {
        AdamState {
            m: params.layers.iter().map(|l| l.zeros_like()).collect(),
            v: params.layers.iter().map(|l| l.zeros_like()).collect(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// Standard bias-corrected Adam update:
/// p -= lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps).
pub fn adam_step<T: NdFloat>(
    params: &mut MlpParams<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<(), NnError> {
    if grads.layers.len() != params.layers.len() || state.m.len() != params.layers.len() {
        return Err(NnError::ShapeMismatch);
    }
    for (g, p) in grads.layers.iter().zip(&params.layers) {
        if !g.congruent(p) {
            return Err(NnError::ShapeMismatch);
        }
        if !g.is_finite() {
            return Err(NnError::NonFiniteGradient);
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let b1 = <T as NumCast>::from(state.beta1).unwrap();
    let b2 = <T as NumCast>::from(state.beta2).unwrap();
    let one_minus_b1 = <T as NumCast>::from(1.0 - state.beta1).unwrap();
    let one_minus_b2 = <T as NumCast>::from(1.0 - state.beta2).unwrap();
    let bc1 = <T as NumCast>::from(1.0 - state.beta1.powi(t)).unwrap();
    let bc2 = <T as NumCast>::from(1.0 - state.beta2.powi(t)).unwrap();
    let eps = <T as NumCast>::from(state.epsilon).unwrap();
    let lr_t = <T as NumCast>::from(lr).unwrap();

    let update = |p: &mut T, g: T, m: &mut T, v: &mut T| {
        *m = b1 * *m + one_minus_b1 * g;
        *v = b2 * *v + one_minus_b2 * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
    };

    for (l, layer) in params.layers.iter_mut().enumerate() {
        let g = &grads.layers[l];
        ndarray::Zip::from(&mut layer.weights)
            .and(&g.weights)
            .and(&mut state.m[l].weights)
            .and(&mut state.v[l].weights)
            .for_each(|p, &gv, m, v| update(p, gv, m, v));
        ndarray::Zip::from(&mut layer.biases)
            .and(&g.biases)
            .and(&mut state.m[l].biases)
            .and(&mut state.v[l].biases)
            .for_each(|p, &gv, m, v| update(p, gv, m, v));
    }
    Ok(())
}

/// Initial rate halved after every `halve_every` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub halve_every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 0.001,
            halve_every: 5,
        }
    }
}

/// Learning rate for a 1-based epoch: initial * 0.5^floor((epoch-1)/halve_every).
pub fn lr_at_epoch(epoch: usize, schedule: &LrSchedule) -> f64 {
    assert!(epoch >= 1, "epochs are 1-based");
    assert!(schedule.initial > 0.0 && schedule.halve_every >= 1);
    schedule.initial * 0.5f64.powi(((epoch - 1) / schedule.halve_every) as i32)
}

// ---------------------------------------------------------------------------
// Checkpoint files
// ---------------------------------------------------------------------------

/// Checkpoint layout: magic, format version, epoch tag, layer count,
/// per-layer (fan_in, fan_out), row-major little-endian f32 payloads
/// (weights then biases per layer), trailing CRC-32 of everything before it.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MLPCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated or padded: {0}")]
    Truncated(String),
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("shape manifest invalid: {0}")]
    ShapeMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub fn checkpoint_to_bytes(params: &MlpParams<f32>, epoch: u32) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&epoch.to_le_bytes());
    out.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for layer in &params.layers {
        out.extend_from_slice(&(layer.weights.ncols() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.weights.nrows() as u32).to_le_bytes());
    }
    for layer in &params.layers {
        for &w in layer.weights.iter() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for &b in layer.biases.iter() {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(MlpParams<f32>, u32), CheckpointError> {
    let take_u32 = |off: usize| -> Result<u32, CheckpointError> {
        bytes
            .get(off..off + 4)
            .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
            .ok_or_else(|| CheckpointError::Truncated("header".into()))
    };

    if bytes.len() < CHECKPOINT_MAGIC.len() + 12 {
        return Err(CheckpointError::Truncated("header".into()));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = take_u32(8)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let epoch = take_u32(12)?;
    let layer_count = take_u32(16)? as usize;
    if layer_count == 0 {
        return Err(CheckpointError::ShapeMismatch("no layers".into()));
    }

    let mut dims = Vec::with_capacity(layer_count);
    let mut off = 20;
    for _ in 0..layer_count {
        let fan_in = take_u32(off)? as usize;
        let fan_out = take_u32(off + 4)? as usize;
        dims.push((fan_in, fan_out));
        off += 8;
    }
    let payload_floats: usize = dims.iter().map(|&(i, o)| i * o + o).sum();
    let expected_len = off + payload_floats * 4 + 4;
    if bytes.len() != expected_len {
        return Err(CheckpointError::Truncated(format!(
            "expected {expected_len} bytes, got {}",
            bytes.len()
        )));
    }
    let crc_stored = take_u32(bytes.len() - 4)?;
    if crc32fast::hash(&bytes[..bytes.len() - 4]) != crc_stored {
        return Err(CheckpointError::ChecksumMismatch);
    }

    let read_f32 = |off: &mut usize| {
        let v = f32::from_le_bytes([bytes[*off], bytes[*off + 1], bytes[*off + 2], bytes[*off + 3]]);
        *off += 4;
        v
    };
    let mut layers = Vec::with_capacity(layer_count);
    for &(fan_in, fan_out) in &dims {
        let mut weights = Array2::<f32>::zeros((fan_out, fan_in));
        for w in weights.iter_mut() {
            *w = read_f32(&mut off);
        }
        let mut biases = Array1::<f32>::zeros(fan_out);
        for b in biases.iter_mut() {
            *b = read_f32(&mut off);
        }
        layers.push(DenseLayer { weights, biases });
    }
    let params =
        MlpParams::from_layers(layers).map_err(|e| CheckpointError::ShapeMismatch(e.to_string()))?;
    Ok((params, epoch))
}

pub fn save_checkpoint(
    path: &Path,
    params: &MlpParams<f32>,
    epoch: u32,
) -> Result<(), CheckpointError> {
    std::fs::write(path, checkpoint_to_bytes(params, epoch)).map_err(|source| {
        CheckpointError::Io {
            path: path.display().to_string(),
            source,
        }
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(MlpParams<f32>, u32), CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    checkpoint_from_bytes(&bytes)
}
