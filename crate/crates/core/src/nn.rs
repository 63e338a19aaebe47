//! Minimal dense feed-forward classifier with hand-written backpropagation.
//!
//! A model with `layer_dims = [d0, d1, ..., dL]` has `L` affine layers. Every
//! layer except the last is followed by a rectifier; the last layer emits
//! logits. One hidden layer is designated as the feature layer: its (post
//! rectifier) activations are the feature map used by the transport loss.
//! When no index is given the penultimate layer, i.e. the last hidden layer,
//! is used.
//!
//! Weights are stored row-major with shape `(out_dim, in_dim)`, so a layer
//! computes `Z = X · Wᵀ + b` on a batch `X` of shape `(rows, in_dim)`.
//!
//! # Model file layout
//!
//! All integers and floats are little-endian.
//!
//! | field | type |
//! |---|---|
//! | magic `DLFDMLP\0` | 8 bytes |
//! | format version (= 1) | u32 |
//! | number of layer dims `L + 1` | u32 |
//! | layer dims | `(L + 1)` × u32 |
//! | feature layer index, `u32::MAX` for none | u32 |
//! | init seed | u64 |
//! | per layer: weights row-major, then biases | f64 |

use std::fs;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::matrix::Matrix;
use crate::{Error, Result};

const MODEL_MAGIC: &[u8; 8] = b"DLFDMLP\0";
const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    feature_layer_index: Option<usize>,
    seed: u64,
}

/// Cached intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Matrix,
    pre_activations: Vec<Matrix>,
    activations: Vec<Matrix>,
    layer_dims: Vec<usize>,
    fingerprint: u64,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    pub fn input(&self) -> &Matrix {
        &self.input
    }

    /// Number of layers evaluated by the pass that produced this trace.
    pub fn depth(&self) -> usize {
        self.activations.len()
    }

    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre_activations
    }

    pub fn activations(&self) -> &[Matrix] {
        &self.activations
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub weight_grads: Vec<Matrix>,
    pub bias_grads: Vec<Vec<f64>>,
    pub input_grads: Matrix,
}

impl GradientBundle {
    pub fn is_finite(&self) -> bool {
        self.weight_grads.iter().all(Matrix::is_finite)
            && self.bias_grads.iter().flatten().all(|v| v.is_finite())
            && self.input_grads.is_finite()
    }

    /// Parameter gradients flattened in the same order as [`MlpModel::params_flat`].
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weight_grads.iter().zip(&self.bias_grads) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    /// Element-wise `self + scale * other` on the parameter gradients.
    ///
    /// Input gradients are kept from `self`.
    pub fn combine(&self, other: &GradientBundle, scale: f64) -> Result<GradientBundle> {
        if self.weight_grads.len() != other.weight_grads.len() {
            return Err(Error::Shape("gradient bundles have different depth".into()));
        }
        let mut out = self.clone();
        for (w, ow) in out.weight_grads.iter_mut().zip(&other.weight_grads) {
            if w.shape() != ow.shape() {
                return Err(Error::Shape("gradient bundle layer shapes differ".into()));
            }
            for (a, b) in w.as_mut_slice().iter_mut().zip(ow.as_slice()) {
                *a += scale * b;
            }
        }
        for (b, ob) in out.bias_grads.iter_mut().zip(&other.bias_grads) {
            for (a, v) in b.iter_mut().zip(ob) {
                *a += scale * v;
            }
        }
        Ok(out)
    }
}

fn validate_dims(layer_dims: &[usize], feature_layer_index: Option<usize>) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::Config(format!(
            "a model needs at least an input and an output dimension, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::Config(format!(
            "layer dimensions must be positive, got {layer_dims:?}"
        )));
    }
    let hidden = layer_dims.len() - 2;
    if let Some(idx) = feature_layer_index {
        if idx >= hidden {
            return Err(Error::Config(format!(
                "feature layer {idx} is not a hidden layer of a model with {hidden} hidden layers"
            )));
        }
    }
    Ok(())
}

impl MlpModel {
    /// Initializes a model with weights drawn from `U(-1/√fan_in, 1/√fan_in)` and zero biases.
    ///
    /// `feature_layer_index = None` selects the last hidden layer, or no feature
    /// layer at all for a model without hidden layers.
    pub fn init(
        layer_dims: &[usize],
        feature_layer_index: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        validate_dims(layer_dims, feature_layer_index)?;
        let hidden = layer_dims.len() - 2;
        let feature_layer_index = feature_layer_index.or(hidden.checked_sub(1));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit)
                .map_err(|e| Error::Config(format!("weight distribution: {e}")))?;
            let data = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
            weights.push(Matrix::from_vec(fan_out, fan_in, data)?);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            feature_layer_index,
            seed,
        })
    }

    /// Assembles a model from explicit parameters. The feature layer defaults as in [`MlpModel::init`].
    pub fn from_parameters(
        layer_dims: &[usize],
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
        feature_layer_index: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        validate_dims(layer_dims, feature_layer_index)?;
        let layers = layer_dims.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::Shape(format!(
                "expected {layers} weight matrices and bias vectors, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for (l, pair) in layer_dims.windows(2).enumerate() {
            if weights[l].shape() != (pair[1], pair[0]) || biases[l].len() != pair[1] {
                return Err(Error::Shape(format!(
                    "layer {l}: weight {:?} / bias {} do not match dims {}->{}",
                    weights[l].shape(),
                    biases[l].len(),
                    pair[0],
                    pair[1]
                )));
            }
        }
        let model = Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            feature_layer_index: feature_layer_index.or((layer_dims.len() - 2).checked_sub(1)),
            seed,
        };
        if !model.is_finite() {
            return Err(Error::Numeric("model parameters are not finite".into()));
        }
        Ok(model)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn feature_layer_index(&self) -> Option<usize> {
        self.feature_layer_index
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.feature_layer_index.map(|i| self.layer_dims[i + 1])
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.as_slice().len()).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// All parameters, layer by layer: weights row-major, then biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    /// Returns a copy of the model with parameters replaced from a flat buffer.
    pub fn with_params_flat(&self, params: &[f64]) -> Result<Self> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for (w, b) in out.weights.iter_mut().zip(out.biases.iter_mut()) {
            let n = w.as_slice().len();
            w.as_mut_slice().copy_from_slice(&params[offset..offset + n]);
            offset += n;
            let m = b.len();
            b.copy_from_slice(&params[offset..offset + m]);
            offset += m;
        }
        Ok(out)
    }

    fn fingerprint(&self) -> u64 {
        // FNV-1a over dims and parameter bits
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for byte in x.to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for &d in &self.layer_dims {
            eat(d as u64);
        }
        for v in self.params_flat() {
            eat(v.to_bits());
        }
        h
    }

    fn check_batch(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} columns, model expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn run_layers(&self, batch: &Matrix, depth: usize) -> ForwardTrace {
        let last = self.layer_count() - 1;
        let mut pre_activations = Vec::with_capacity(depth);
        let mut activations: Vec<Matrix> = Vec::with_capacity(depth);
        for l in 0..depth {
            let input = activations.last().unwrap_or(batch);
            let mut z = input.matmul_transposed(&self.weights[l]);
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&self.biases[l]) {
                    *v += b;
                }
            }
            let a = if l < last {
                let mut a = z.clone();
                a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                a
            } else {
                z.clone()
            };
            pre_activations.push(z);
            activations.push(a);
        }
        ForwardTrace {
            input: batch.clone(),
            pre_activations,
            activations,
            layer_dims: self.layer_dims.clone(),
            fingerprint: self.fingerprint(),
        }
    }

    /// Computes logits for a batch and the trace needed by [`MlpModel::backward`].
    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, ForwardTrace)> {
        self.check_batch(batch)?;
        let trace = self.run_layers(batch, self.layer_count());
        let logits = trace.activations.last().expect("at least one layer").clone();
        Ok((logits, trace))
    }

    /// Logits only.
    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        self.forward(batch).map(|(logits, _)| logits)
    }

    /// Activations of the feature layer, plus a trace truncated at that layer.
    pub fn feature_extract(&self, batch: &Matrix) -> Result<(Matrix, ForwardTrace)> {
        let idx = self.feature_layer_index.ok_or_else(|| {
            Error::Config("model has no hidden layer to extract features from".into())
        })?;
        self.check_batch(batch)?;
        let trace = self.run_layers(batch, idx + 1);
        let features = trace.activations[idx].clone();
        Ok((features, trace))
    }

    fn check_trace(&self, trace: &ForwardTrace, min_depth: usize) -> Result<()> {
        if trace.layer_dims != self.layer_dims || trace.fingerprint != self.fingerprint() {
            return Err(Error::Consistency(
                "trace was produced by a different model".into(),
            ));
        }
        if trace.depth() < min_depth {
            return Err(Error::Consistency(format!(
                "trace covers {} layers, {min_depth} needed",
                trace.depth()
            )));
        }
        Ok(())
    }

    /// Backpropagates `upstream` (gradient w.r.t. the activations of layer
    /// `top`) down to the input.
    fn backprop_from(
        &self,
        trace: &ForwardTrace,
        top: usize,
        upstream: &Matrix,
        want_params: bool,
    ) -> (Vec<Matrix>, Vec<Vec<f64>>, Matrix) {
        let last = self.layer_count() - 1;
        let mut weight_grads: Vec<Matrix> = self
            .weights
            .iter()
            .map(|w| Matrix::zeros(w.rows(), w.cols()))
            .collect();
        let mut bias_grads: Vec<Vec<f64>> = self.biases.iter().map(|b| vec![0.0; b.len()]).collect();

        let mut grad = upstream.clone();
        for l in (0..=top).rev() {
            if l < last {
                let z = &trace.pre_activations[l];
                for (g, &zv) in grad.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    if zv <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            if want_params {
                let layer_input = if l == 0 {
                    &trace.input
                } else {
                    &trace.activations[l - 1]
                };
                weight_grads[l] = grad.transposed_matmul(layer_input);
                for r in 0..grad.rows() {
                    for (b, g) in bias_grads[l].iter_mut().zip(grad.row(r)) {
                        *b += g;
                    }
                }
            }
            grad = grad.matmul(&self.weights[l]);
        }
        (weight_grads, bias_grads, grad)
    }

    /// Parameter and input gradients of the scalar loss whose gradient w.r.t.
    /// the logits is `dlogits`.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &Matrix) -> Result<GradientBundle> {
        self.check_trace(trace, self.layer_count())?;
        if dlogits.shape() != (trace.batch_size(), self.class_count()) {
            return Err(Error::Shape(format!(
                "dlogits {:?} does not match batch {} x classes {}",
                dlogits.shape(),
                trace.batch_size(),
                self.class_count()
            )));
        }
        let (weight_grads, bias_grads, input_grads) =
            self.backprop_from(trace, self.layer_count() - 1, dlogits, true);
        Ok(GradientBundle {
            weight_grads,
            bias_grads,
            input_grads,
        })
    }

    /// Vector-Jacobian product of the feature map: returns `J(x)ᵀ · dfeatures`
    /// row by row.
    pub fn feature_vjp(&self, trace: &ForwardTrace, dfeatures: &Matrix) -> Result<Matrix> {
        let idx = self
            .feature_layer_index
            .ok_or_else(|| Error::Config("model has no feature layer".into()))?;
        self.check_trace(trace, idx + 1)?;
        let expected = (trace.batch_size(), self.layer_dims[idx + 1]);
        if dfeatures.shape() != expected {
            return Err(Error::Shape(format!(
                "dfeatures {:?} does not match expected {expected:?}",
                dfeatures.shape()
            )));
        }
        let (_, _, input_grads) = self.backprop_from(trace, idx, dfeatures, false);
        Ok(input_grads)
    }

    /// Returns `θ - lr · ∇θ`.
    pub fn sgd_step(&self, grads: &GradientBundle, lr: f64) -> Result<Self> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        if grads.weight_grads.len() != self.weights.len() {
            return Err(Error::Shape("gradient depth does not match model".into()));
        }
        for (l, (w, g)) in self.weights.iter().zip(&grads.weight_grads).enumerate() {
            if w.shape() != g.shape() || self.biases[l].len() != grads.bias_grads[l].len() {
                return Err(Error::Shape(format!("gradient shape mismatch at layer {l}")));
            }
        }
        if !grads.weight_grads.iter().all(Matrix::is_finite)
            || !grads.bias_grads.iter().flatten().all(|v| v.is_finite())
        {
            return Err(Error::Numeric("non-finite parameter gradient".into()));
        }
        let mut next = self.clone();
        for (w, g) in next.weights.iter_mut().zip(&grads.weight_grads) {
            for (p, d) in w.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *p -= lr * d;
            }
        }
        for (b, g) in next.biases.iter_mut().zip(&grads.bias_grads) {
            for (p, d) in b.iter_mut().zip(g) {
                *p -= lr * d;
            }
        }
        if !next.is_finite() {
            return Err(Error::Numeric("parameters became non-finite".into()));
        }
        Ok(next)
    }

    /// Flat little-endian record: header, dims, feature index, seed, then
    /// every layer's weights (row-major) followed by its biases.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.param_count());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layer_dims.len() as u32).to_le_bytes());
        for &d in &self.layer_dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let feature = self.feature_layer_index.map_or(u32::MAX, |i| i as u32);
        out.extend_from_slice(&feature.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for v in self.params_flat() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != MODEL_MAGIC {
            return Err(Error::Format("not a model file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "model format version {version} is not supported (expected {MODEL_FORMAT_VERSION})"
            )));
        }
        let n_dims = r.u32()? as usize;
        if n_dims > 1024 {
            return Err(Error::Format(format!("implausible layer count {n_dims}")));
        }
        let dims = (0..n_dims)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let feature = match r.u32()? {
            u32::MAX => None,
            i => Some(i as usize),
        };
        let seed = r.u64()?;
        validate_dims(&dims, feature).map_err(|e| Error::Format(e.to_string()))?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in dims.windows(2) {
            let w = (0..pair[0] * pair[1]).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            weights.push(Matrix::from_vec(pair[1], pair[0], w)?);
            biases.push((0..pair[1]).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after model parameters".into()));
        }
        Self::from_parameters(&dims, weights, biases, feature, seed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the serialized model, hex encoded.
    pub fn digest(&self) -> String {
        hex_digest(&self.to_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Little-endian cursor that reports truncation as a format error.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated input at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn rest(&mut self) -> &'a [u8] {
        let out = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        out
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let per_sample = per_sample_cross_entropy(logits, labels)?;
    let n = logits.rows() as f64;
    let loss = per_sample.iter().sum::<f64>() / n;
    let mut dlogits = softmax(logits);
    for (r, &y) in labels.iter().enumerate() {
        let row = dlogits.row_mut(r);
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok((loss, dlogits))
}

/// Per-row `-log softmax(logits)[label]`, computed through log-sum-exp.
pub fn per_sample_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    if labels.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    if logits.rows() == 0 {
        return Err(Error::Input("cross-entropy of an empty batch".into()));
    }
    let classes = logits.cols();
    labels
        .iter()
        .zip(logits.row_iter())
        .map(|(&y, row)| {
            if y >= classes {
                return Err(Error::Label { label: y, classes });
            }
            Ok(log_sum_exp(row) - row[y])
        })
        .collect()
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v = (*v - lse).exp());
    }
    out
}

/// Index of the largest logit in every row.
pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    logits
        .row_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn zero_model(dims: &[usize]) -> MlpModel {
        let weights = dims
            .windows(2)
            .map(|p| Matrix::zeros(p[1], p[0]))
            .collect();
        let biases = dims.windows(2).map(|p| vec![0.0; p[1]]).collect();
        MlpModel::from_parameters(dims, weights, biases, None, 0).unwrap()
    }

    /// Straight-line forward pass over explicit loops, independent of the
    /// matrix helpers.
    fn naive_forward(model: &MlpModel, x: &[f64], depth: usize) -> Vec<f64> {
        let mut a = x.to_vec();
        for l in 0..depth {
            let w = &model.weights()[l];
            let b = &model.biases()[l];
            let mut z = vec![0.0; w.rows()];
            for o in 0..w.rows() {
                let mut s = b[o];
                for i in 0..w.cols() {
                    s += w.get(o, i) * a[i];
                }
                z[o] = if l + 1 < model.layer_count() { s.max(0.0) } else { s };
            }
            a = z;
        }
        a
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = MlpModel::init(&[4, 8, 2], None, 7).unwrap();
        let b = MlpModel::init(&[4, 8, 2], None, 7).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = MlpModel::init(&[4, 8, 2], None, 8).unwrap();
        assert_ne!(a.params_flat(), c.params_flat());
        assert!(a.biases().iter().flatten().all(|&b| b == 0.0));
        let limit = 0.5; // 1/sqrt(4) for the first layer
        assert!(a.weights()[0].as_slice().iter().all(|w| w.abs() <= limit));
    }

    #[test]
    fn init_rejects_bad_configs() {
        assert!(matches!(MlpModel::init(&[4], None, 0), Err(Error::Config(_))));
        assert!(matches!(MlpModel::init(&[4, 0, 2], None, 0), Err(Error::Config(_))));
        // index 1 would be the logit layer
        assert!(matches!(MlpModel::init(&[4, 8, 2], Some(1), 0), Err(Error::Config(_))));
        assert_eq!(MlpModel::init(&[4, 8, 6, 2], None, 0).unwrap().feature_layer_index(), Some(1));
        assert_eq!(MlpModel::init(&[4, 2], None, 0).unwrap().feature_layer_index(), None);
    }

    #[test]
    fn zero_model_gives_zero_logits_and_features() {
        let model = zero_model(&[4, 8, 2]);
        let batch = random_batch(5, 4, 1);
        let (logits, _) = model.forward(&batch).unwrap();
        assert!(logits.as_slice().iter().all(|&v| v == 0.0));
        let (features, _) = model.feature_extract(&batch).unwrap();
        assert_eq!(features.shape(), (5, 8));
        assert!(features.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_rows_give_identical_logits() {
        let model = MlpModel::init(&[3, 5, 4], None, 3).unwrap();
        let row = [0.2, -0.7, 0.4];
        let batch = Matrix::from_rows(&[row, row, row]).unwrap();
        let (logits, _) = model.forward(&batch).unwrap();
        assert_eq!(logits.row(0), logits.row(1));
        assert_eq!(logits.row(1), logits.row(2));
    }

    #[test]
    fn forward_matches_naive_recomputation() {
        let model = MlpModel::init(&[6, 9, 7, 3], None, 11).unwrap();
        let batch = random_batch(4, 6, 12);
        let (logits, _) = model.forward(&batch).unwrap();
        let (features, _) = model.feature_extract(&batch).unwrap();
        for r in 0..4 {
            let expected = naive_forward(&model, batch.row(r), 3);
            for (a, b) in logits.row(r).iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
            let expected = naive_forward(&model, batch.row(r), 2);
            for (a, b) in features.row(r).iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let model = MlpModel::init(&[4, 8, 2], None, 7).unwrap();
        assert!(matches!(model.forward(&random_batch(2, 3, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_entropy_known_values() {
        let (loss, _) = cross_entropy(&Matrix::from_rows(&[[0.0, 0.0]]).unwrap(), &[0]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);

        let (loss, d) = cross_entropy(&Matrix::from_rows(&[[1000.0, 0.0]]).unwrap(), &[0]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(d.is_finite());

        let (loss, d) = cross_entropy(&Matrix::from_rows(&[[-1e4, 1e4, 0.0]]).unwrap(), &[0]).unwrap();
        assert!((loss - 2e4).abs() < 1e-6);
        assert!(d.is_finite());

        let logits = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        assert!(matches!(cross_entropy(&logits, &[2]), Err(Error::Label { label: 2, classes: 2 })));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = random_batch(5, 4, 21);
        let labels = [0, 3, 1, 1, 2];
        let (_, d) = cross_entropy(&logits, &labels).unwrap();
        let h = 1e-5;
        for i in 0..logits.as_slice().len() {
            let mut plus = logits.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = logits.clone();
            minus.as_mut_slice()[i] -= h;
            let fd = (cross_entropy(&plus, &labels).unwrap().0 - cross_entropy(&minus, &labels).unwrap().0)
                / (2.0 * h);
            let an = d.as_slice()[i];
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "{fd} vs {an}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let model = MlpModel::init(&[4, 8, 3], None, 2).unwrap();
        let batch = random_batch(3, 4, 4);
        let (_, trace) = model.forward(&batch).unwrap();
        let grads = model.backward(&trace, &Matrix::zeros(3, 3)).unwrap();
        assert!(grads.params_flat().iter().all(|&g| g == 0.0));
        assert!(grads.input_grads.as_slice().iter().all(|&g| g == 0.0));

        let (_, ftrace) = model.feature_extract(&batch).unwrap();
        let vjp = model.feature_vjp(&ftrace, &Matrix::zeros(3, 8)).unwrap();
        assert!(vjp.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn linear_model_input_gradient_is_dlogits_times_weights() {
        let model = MlpModel::init(&[3, 4], None, 5).unwrap();
        let batch = random_batch(2, 3, 6);
        let (_, trace) = model.forward(&batch).unwrap();
        let dlogits = random_batch(2, 4, 7);
        let grads = model.backward(&trace, &dlogits).unwrap();
        let w = &model.weights()[0];
        for r in 0..2 {
            for i in 0..3 {
                let expected: f64 = (0..4).map(|o| dlogits.get(r, o) * w.get(o, i)).sum();
                assert!((grads.input_grads.get(r, i) - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn positive_region_feature_vjp_is_dfeatures_times_weights() {
        // positive inputs and weights keep every hidden unit active
        let w0 = Matrix::from_rows(&[[0.5, 0.1, 0.3], [0.2, 0.4, 0.1]]).unwrap();
        let w1 = Matrix::from_rows(&[[1.0, -1.0]]).unwrap();
        let model = MlpModel::from_parameters(
            &[3, 2, 1],
            vec![w0.clone(), w1],
            vec![vec![0.1, 0.1], vec![0.0]],
            Some(0),
            0,
        )
        .unwrap();
        let batch = Matrix::from_rows(&[[0.3, 0.9, 0.2], [1.0, 0.5, 0.5]]).unwrap();
        let (_, trace) = model.feature_extract(&batch).unwrap();
        let dfeat = Matrix::from_rows(&[[1.5, -0.5], [0.25, 2.0]]).unwrap();
        let vjp = model.feature_vjp(&trace, &dfeat).unwrap();
        assert_eq!(vjp, dfeat.matmul(&w0));
    }

    #[test]
    fn trace_from_other_model_is_rejected() {
        let a = MlpModel::init(&[4, 8, 2], None, 1).unwrap();
        let b = MlpModel::init(&[4, 8, 2], None, 2).unwrap();
        let batch = random_batch(2, 4, 0);
        let (_, trace) = a.forward(&batch).unwrap();
        assert!(matches!(b.backward(&trace, &Matrix::zeros(2, 2)), Err(Error::Consistency(_))));
        let (_, ftrace) = a.feature_extract(&batch).unwrap();
        // a truncated trace cannot drive a full backward pass
        assert!(matches!(a.backward(&ftrace, &Matrix::zeros(2, 2)), Err(Error::Consistency(_))));
        assert!(matches!(b.feature_vjp(&ftrace, &Matrix::zeros(2, 8)), Err(Error::Consistency(_))));
    }

    #[test]
    fn sgd_step_edge_cases() {
        let model = MlpModel::init(&[4, 8, 2], None, 1).unwrap();
        let batch = random_batch(6, 4, 2);
        let labels = [0, 1, 1, 0, 1, 0];
        let (logits, trace) = model.forward(&batch).unwrap();
        let (_, d) = cross_entropy(&logits, &labels).unwrap();
        let grads = model.backward(&trace, &d).unwrap();
        assert_eq!(model.sgd_step(&grads, 0.0).unwrap(), model);

        let zero = GradientBundle {
            weight_grads: grads.weight_grads.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            bias_grads: grads.bias_grads.iter().map(|b| vec![0.0; b.len()]).collect(),
            input_grads: grads.input_grads.clone(),
        };
        assert_eq!(model.sgd_step(&zero, 0.5).unwrap(), model);

        let mut bad = grads.clone();
        bad.weight_grads[0].as_mut_slice()[0] = f64::NAN;
        assert!(matches!(model.sgd_step(&bad, 0.1), Err(Error::Numeric(_))));
    }

    #[test]
    fn sgd_step_reduces_convex_softmax_loss() {
        let model = MlpModel::init(&[2, 3], None, 9).unwrap();
        let batch = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0], [0.8, 0.1]]).unwrap();
        let labels = [0, 1, 2, 0];
        let (logits, trace) = model.forward(&batch).unwrap();
        let (before, d) = cross_entropy(&logits, &labels).unwrap();
        let grads = model.backward(&trace, &d).unwrap();
        let next = model.sgd_step(&grads, 0.1).unwrap();
        let (after, _) = cross_entropy(&next.predict(&batch).unwrap(), &labels).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn serialization_round_trip_and_corruption() {
        let model = MlpModel::init(&[5, 7, 6, 3], Some(0), 99).unwrap();
        let bytes = model.to_bytes();
        let back = MlpModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_bytes(), bytes);
        assert!(matches!(MlpModel::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(matches!(MlpModel::from_bytes(&wrong), Err(Error::Format(_))));
    }

    /// Pre-activation closest to the rectifier kink, over every hidden layer.
    fn kink_margin(trace: &ForwardTrace, hidden_layers: usize) -> f64 {
        trace.pre_activations()[..hidden_layers]
            .iter()
            .flat_map(|z| z.as_slice().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn backward_matches_finite_differences(
            dims in proptest::collection::vec(1usize..=16, 1..=3),
            input_dim in 1usize..=16,
            classes in 2usize..=6,
            rows in 1usize..=8,
            seed in any::<u64>(),
        ) {
            let mut layer_dims = vec![input_dim];
            layer_dims.extend(&dims);
            layer_dims.push(classes);
            let model = MlpModel::init(&layer_dims, None, seed).unwrap();
            let batch = random_batch(rows, input_dim, seed ^ 0xabcd);
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
            let (logits, trace) = model.forward(&batch).unwrap();
            prop_assume!(kink_margin(&trace, dims.len()) > 1e-3);
            let (_, d) = cross_entropy(&logits, &labels).unwrap();
            let grads = model.backward(&trace, &d).unwrap();

            let loss_at = |m: &MlpModel, x: &Matrix| cross_entropy(&m.predict(x).unwrap(), &labels).unwrap().0;
            let h = 1e-5;
            let params = model.params_flat();
            let analytic = grads.params_flat();
            for i in 0..params.len() {
                let mut p = params.clone();
                p[i] += h;
                let up = loss_at(&model.with_params_flat(&p).unwrap(), &batch);
                p[i] -= 2.0 * h;
                let down = loss_at(&model.with_params_flat(&p).unwrap(), &batch);
                let fd = (up - down) / (2.0 * h);
                if fd.abs().max(analytic[i].abs()) > 1e-8 {
                    prop_assert!(rel_err(fd, analytic[i]) <= 1e-4 || (fd - analytic[i]).abs() < 1e-9,
                        "param {i}: fd {fd} analytic {}", analytic[i]);
                }
            }
            for i in 0..batch.as_slice().len() {
                let mut x = batch.clone();
                x.as_mut_slice()[i] += h;
                let up = loss_at(&model, &x);
                x.as_mut_slice()[i] -= 2.0 * h;
                let down = loss_at(&model, &x);
                let fd = (up - down) / (2.0 * h);
                let an = grads.input_grads.as_slice()[i];
                if fd.abs().max(an.abs()) > 1e-8 {
                    prop_assert!(rel_err(fd, an) <= 1e-4 || (fd - an).abs() < 1e-9,
                        "input {i}: fd {fd} analytic {an}");
                }
            }
        }

        #[test]
        fn feature_vjp_matches_finite_differences(
            dims in proptest::collection::vec(1usize..=16, 1..=3),
            input_dim in 1usize..=16,
            rows in 1usize..=8,
            seed in any::<u64>(),
        ) {
            let mut layer_dims = vec![input_dim];
            layer_dims.extend(&dims);
            layer_dims.push(3);
            let model = MlpModel::init(&layer_dims, None, seed).unwrap();
            let batch = random_batch(rows, input_dim, seed ^ 0x1234);
            let (features, trace) = model.feature_extract(&batch).unwrap();
            prop_assume!(kink_margin(&trace, dims.len()) > 1e-3);
            let dfeat = random_batch(rows, features.cols(), seed ^ 0x5678);
            let vjp = model.feature_vjp(&trace, &dfeat).unwrap();
            let objective = |x: &Matrix| model.feature_extract(x).unwrap().0.frobenius_dot(&dfeat).unwrap();
            let h = 1e-5;
            for i in 0..batch.as_slice().len() {
                let mut x = batch.clone();
                x.as_mut_slice()[i] += h;
                let up = objective(&x);
                x.as_mut_slice()[i] -= 2.0 * h;
                let down = objective(&x);
                let fd = (up - down) / (2.0 * h);
                let an = vjp.as_slice()[i];
                if fd.abs().max(an.abs()) > 1e-8 {
                    prop_assert!(rel_err(fd, an) <= 1e-4 || (fd - an).abs() < 1e-9,
                        "input {i}: fd {fd} analytic {an}");
                }
            }
        }

        #[test]
        fn row_permutation_commutes(seed in any::<u64>(), rows in 2usize..=8) {
            let model = MlpModel::init(&[5, 7, 4], None, seed).unwrap();
            let batch = random_batch(rows, 5, seed);
            let perm: Vec<usize> = (0..rows).rev().collect();
            let permuted = batch.select_rows(&perm);
            let labels: Vec<usize> = (0..rows).map(|i| i % 4).collect();
            let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();

            let (l1, t1) = model.forward(&batch).unwrap();
            let (l2, t2) = model.forward(&permuted).unwrap();
            prop_assert_eq!(l1.select_rows(&perm), l2.clone());
            // per-sample gradient rows are independent of the other rows
            let (_, d1) = cross_entropy(&l1, &labels).unwrap();
            let (_, d2) = cross_entropy(&l2, &plabels).unwrap();
            let g1 = model.backward(&t1, &d1).unwrap();
            let g2 = model.backward(&t2, &d2).unwrap();
            prop_assert_eq!(g1.input_grads.select_rows(&perm), g2.input_grads);
            let (f1, _) = model.feature_extract(&batch).unwrap();
            let (f2, _) = model.feature_extract(&permuted).unwrap();
            prop_assert_eq!(f1.select_rows(&perm), f2);
        }
    }
}
