//! Softmax classifiers with analytic gradients and the plain-SGD local solver.

use std::io::{self, Read, Write};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::seed::rng_from;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("local dataset is empty")]
    EmptyDataset,
    #[error("epochs must be at least 1")]
    NoEpochs,
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    #[serde(alias = "multinomial-logistic")]
    Logistic,
    #[serde(alias = "one-hidden-layer-mlp")]
    Mlp,
}

/// Flat parameters plus the named blocks they are laid out in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub layout: Vec<(String, Vec<usize>)>,
}

impl ParameterVector {
    pub fn zeros(layout: Vec<(String, Vec<usize>)>) -> Self {
        let len = layout_len(&layout);
        Self {
            values: vec![0.0; len],
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Splits the flat values into one slice per named block.
    pub fn blocks(&self) -> Vec<(&str, &[f64])> {
        let mut offset = 0;
        self.layout
            .iter()
            .map(|(name, dims)| {
                let n: usize = dims.iter().product();
                let block = &self.values[offset..offset + n];
                offset += n;
                (name.as_str(), block)
            })
            .collect()
    }

    /// Inverse of [`ParameterVector::blocks`]; `None` if a block's length
    /// disagrees with its shape.
    pub fn from_blocks(blocks: &[(&str, &[usize], &[f64])]) -> Option<Self> {
        let mut values = Vec::new();
        let mut layout = Vec::new();
        for (name, dims, block) in blocks {
            if dims.iter().product::<usize>() != block.len() {
                return None;
            }
            values.extend_from_slice(block);
            layout.push((name.to_string(), dims.to_vec()));
        }
        Some(Self { values, layout })
    }

    /// `self − delta`, the server update.
    pub fn step(&mut self, delta: &GradientVector, scale: f64) {
        assert_eq!(self.values.len(), delta.len());
        for (w, g) in self.values.iter_mut().zip(&delta.0) {
            *w -= scale * g;
        }
    }

    /// `self − other` as a gradient-table row.
    pub fn delta_from(&self, other: &ParameterVector) -> GradientVector {
        GradientVector(self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect())
    }
}

fn layout_len(layout: &[(String, Vec<usize>)]) -> usize {
    layout.iter().map(|(_, d)| d.iter().product::<usize>()).sum()
}

/// A flat update vector sharing the parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &GradientVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, s: f64) -> GradientVector {
        GradientVector(self.0.iter().map(|x| x * s).collect())
    }
}

/// Architecture of a classifier over `input_dim` features and `num_classes` labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Model {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Hidden width; ignored by the logistic model.
    pub hidden: usize,
}

pub const DEFAULT_HIDDEN: usize = 32;

/// Scratch for one sample's forward pass.
struct Activations {
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl Model {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Logistic,
            input_dim,
            num_classes,
            hidden: 0,
        }
    }

    pub fn mlp(input_dim: usize, num_classes: usize, hidden: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_dim,
            num_classes,
            hidden,
        }
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, c, h) = (self.input_dim, self.num_classes, self.hidden);
        match self.kind {
            ModelKind::Logistic => vec![("weight".into(), vec![c, d]), ("bias".into(), vec![c])],
            ModelKind::Mlp => vec![
                ("hidden.weight".into(), vec![h, d]),
                ("hidden.bias".into(), vec![h]),
                ("output.weight".into(), vec![c, h]),
                ("output.bias".into(), vec![c]),
            ],
        }
    }

    pub fn num_params(&self) -> usize {
        layout_len(&self.layout())
    }

    /// Seeded uniform(−0.05, 0.05) initialization.
    pub fn init_params(&self, seed: u64) -> ParameterVector {
        let mut rng = rng_from(seed, &[0x1A17]);
        let mut p = ParameterVector::zeros(self.layout());
        for v in &mut p.values {
            *v = rng.random_range(-0.05..0.05);
        }
        p
    }

    pub fn zero_params(&self) -> ParameterVector {
        ParameterVector::zeros(self.layout())
    }

    fn check(&self, params: &ParameterVector, batch: &Dataset) -> Result<(), ModelError> {
        if params.len() != self.num_params() {
            return Err(ModelError::DimensionMismatch {
                expected: self.num_params(),
                got: params.len(),
            });
        }
        if batch.dim() != self.input_dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.input_dim,
                got: batch.dim(),
            });
        }
        if batch.num_classes() != self.num_classes {
            return Err(ModelError::DimensionMismatch {
                expected: self.num_classes,
                got: batch.num_classes(),
            });
        }
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        Ok(())
    }

    fn forward_one(&self, w: &[f64], x: &[f64], act: &mut Activations) {
        let (d, c, h) = (self.input_dim, self.num_classes, self.hidden);
        match self.kind {
            ModelKind::Logistic => {
                let (weight, bias) = w.split_at(c * d);
                for k in 0..c {
                    act.logits[k] = bias[k] + dot(&weight[k * d..(k + 1) * d], x);
                }
            }
            ModelKind::Mlp => {
                let (w1, rest) = w.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                for j in 0..h {
                    act.hidden[j] = (b1[j] + dot(&w1[j * d..(j + 1) * d], x)).tanh();
                }
                for k in 0..c {
                    act.logits[k] = b2[k] + dot(&w2[k * h..(k + 1) * h], &act.hidden);
                }
            }
        }
    }

    fn activations(&self) -> Activations {
        Activations {
            hidden: vec![0.0; self.hidden],
            logits: vec![0.0; self.num_classes],
        }
    }

    /// Mean softmax cross-entropy and argmax accuracy (ties go to the lowest class).
    pub fn forward_loss(&self, params: &ParameterVector, batch: &Dataset) -> Result<(f64, f64), ModelError> {
        self.check(params, batch)?;
        let mut act = self.activations();
        let mut loss = 0.0;
        let mut correct = 0usize;
        for i in 0..batch.len() {
            self.forward_one(&params.values, batch.row(i), &mut act);
            let y = batch.labels()[i];
            loss += log_sum_exp(&act.logits) - act.logits[y];
            if argmax(&act.logits) == y {
                correct += 1;
            }
        }
        let n = batch.len() as f64;
        Ok((loss / n, correct as f64 / n))
    }

    /// Fraction of rows predicted correctly; `None` for an empty set.
    pub fn accuracy(&self, params: &ParameterVector, data: &Dataset) -> Result<Option<f64>, ModelError> {
        if data.is_empty() {
            return Ok(None);
        }
        self.forward_loss(params, data).map(|(_, acc)| Some(acc))
    }

    /// Exact gradient of [`Model::forward_loss`]'s mean loss.
    pub fn backward(&self, params: &ParameterVector, batch: &Dataset) -> Result<GradientVector, ModelError> {
        self.check(params, batch)?;
        let (d, c, h) = (self.input_dim, self.num_classes, self.hidden);
        let w = &params.values;
        let mut grad = vec![0.0; w.len()];
        let mut act = self.activations();
        let mut dlogits = vec![0.0; c];
        let mut dhidden = vec![0.0; h];
        let inv_n = 1.0 / batch.len() as f64;
        for i in 0..batch.len() {
            let x = batch.row(i);
            self.forward_one(w, x, &mut act);
            softmax_into(&act.logits, &mut dlogits);
            dlogits[batch.labels()[i]] -= 1.0;
            for v in &mut dlogits {
                *v *= inv_n;
            }
            match self.kind {
                ModelKind::Logistic => {
                    let (gw, gb) = grad.split_at_mut(c * d);
                    for k in 0..c {
                        axpy(dlogits[k], x, &mut gw[k * d..(k + 1) * d]);
                        gb[k] += dlogits[k];
                    }
                }
                ModelKind::Mlp => {
                    let w2 = &w[h * d + h..h * d + h + c * h];
                    let (gw1, rest) = grad.split_at_mut(h * d);
                    let (gb1, rest) = rest.split_at_mut(h);
                    let (gw2, gb2) = rest.split_at_mut(c * h);
                    dhidden.iter_mut().for_each(|v| *v = 0.0);
                    for k in 0..c {
                        axpy(dlogits[k], &act.hidden, &mut gw2[k * h..(k + 1) * h]);
                        gb2[k] += dlogits[k];
                        axpy(dlogits[k], &w2[k * h..(k + 1) * h], &mut dhidden);
                    }
                    for j in 0..h {
                        let da = dhidden[j] * (1.0 - act.hidden[j] * act.hidden[j]);
                        axpy(da, x, &mut gw1[j * d..(j + 1) * d]);
                        gb1[j] += da;
                    }
                }
            }
        }
        Ok(GradientVector(grad))
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Hyperparameters of the local solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

/// Runs `epochs` passes of mini-batch SGD from `global` on `data` and returns
/// the pseudo-gradient `global − local`.
///
/// Rows are reshuffled every epoch; the batch size is clipped to the dataset.
pub fn local_solver(
    model: &Model,
    global: &ParameterVector,
    data: &Dataset,
    sgd: &SgdConfig,
    seed: u64,
) -> Result<GradientVector, ModelError> {
    Ok(local_train(model, global, data, sgd, seed)?.delta_from_global(global))
}

/// Parameters after local training, before taking the delta.
pub struct LocalModel(pub ParameterVector);

impl LocalModel {
    fn delta_from_global(&self, global: &ParameterVector) -> GradientVector {
        global.delta_from(&self.0)
    }
}

pub fn local_train(
    model: &Model,
    global: &ParameterVector,
    data: &Dataset,
    sgd: &SgdConfig,
    seed: u64,
) -> Result<LocalModel, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if sgd.epochs == 0 {
        return Err(ModelError::NoEpochs);
    }
    let mut rng = rng_from(seed, &[0x5CD]);
    let batch_size = sgd.batch_size.clamp(1, data.len());
    let mut params = global.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..sgd.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let mut rows = chunk.to_vec();
            // Sorted rows make a full batch sum in dataset order.
            rows.sort_unstable();
            let grad = model.backward(&params, &data.select(&rows))?;
            params.step(&grad, sgd.lr);
        }
    }
    Ok(LocalModel(params))
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    layout: Vec<(String, Vec<usize>)>,
    len: usize,
}

/// Writes a u64 little-endian header length, a JSON shape header, then the
/// values as little-endian f64.
pub fn write_checkpoint<W: Write>(params: &ParameterVector, mut out: W) -> Result<(), ModelError> {
    let header = serde_json::to_vec(&CheckpointHeader {
        layout: params.layout.clone(),
        len: params.len(),
    })
    .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for v in &params.values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ParameterVector, ModelError> {
    let mut len_bytes = [0u8; 8];
    input.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > 1 << 24 {
        return Err(ModelError::Checkpoint(format!("header length {header_len} implausible")));
    }
    let mut header = vec![0u8; header_len];
    input.read_exact(&mut header)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if layout_len(&header.layout) != header.len {
        return Err(ModelError::Checkpoint("layout does not match value count".into()));
    }
    let mut values = Vec::with_capacity(header.len);
    let mut buf = [0u8; 8];
    for _ in 0..header.len {
        input.read_exact(&mut buf)?;
        values.push(f64::from_le_bytes(buf));
    }
    Ok(ParameterVector {
        values,
        layout: header.layout,
    })
}
