//! Feed-forward networks with hand-written reverse-mode gradients.
//!
//! Weights are stored `in x out` so a batch `X (B x in)` maps to
//! `act(X W + b)`. Losses are means over the batch of per-sample sums.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::rng::{standard_normal, stream_rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Linear => {}
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Sigmoid => z.mapv_inplace(sigmoid),
        }
    }

    /// Multiplies `grad` in place by the derivative, expressed through the
    /// activation output `a`.
    fn backprop(self, a: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Linear => {}
            Activation::Relu => Zip::from(grad).and(a).for_each(|g, &a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Sigmoid => Zip::from(grad).and(a).for_each(|g, &a| *g *= a * (1.0 - a)),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    /// He-scaled Gaussian weights for ReLU layers, Glorot-scaled otherwise.
    pub fn init<R: Rng + ?Sized>(
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let var = match activation {
            Activation::Relu => 2.0 / fan_in as f64,
            _ => 2.0 / (fan_in + fan_out) as f64,
        };
        let sd = var.sqrt();
        let weights = Array2::from_shape_simple_fn((fan_in, fan_out), || sd * standard_normal(rng));
        Self {
            weights,
            bias: Array1::zeros(fan_out),
            activation,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Layer inputs/outputs of one forward pass; `activations[0]` is the input
/// and `activations[i + 1]` the output of layer `i`.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache holds at least the input")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn zeros_like(model: &Mlp) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            *w *= s;
            *b *= s;
        }
    }

    /// Flat coordinate in the same order as [`Mlp::param`].
    pub fn get(&self, mut idx: usize) -> f64 {
        for (w, b) in &self.layers {
            if idx < w.len() {
                return w.as_slice().unwrap()[idx];
            }
            idx -= w.len();
            if idx < b.len() {
                return b[idx];
            }
            idx -= b.len();
        }
        panic!("gradient index out of range")
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().chain(b.iter()).all(|v| v.is_finite()))
    }
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`; hidden layers use `hidden`, the last
    /// layer `output`.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!("invalid layer widths {widths:?}")));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Dense::init(widths[i], widths[i + 1], act, rng)
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyInput("layers"));
        }
        for w in layers.windows(2) {
            if w[0].fan_out() != w[1].fan_in() {
                return Err(Error::ShapeMismatch {
                    expected: w[0].fan_out(),
                    actual: w[1].fan_in(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.fan_out() {
                return Err(Error::ShapeMismatch {
                    expected: l.fan_out(),
                    actual: l.bias.len(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.fan_out()));
        w
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        if x.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_owned());
        for layer in &self.layers {
            let mut z = activations.last().unwrap().dot(&layer.weights);
            z += &layer.bias;
            layer.activation.apply(&mut z);
            activations.push(z);
        }
        Ok(ForwardCache { activations })
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        let mut a = x.to_owned();
        for layer in &self.layers {
            let mut z = a.dot(&layer.weights);
            z += &layer.bias;
            layer.activation.apply(&mut z);
            a = z;
        }
        Ok(a)
    }

    /// Given `d_out = dL/d(output)`, returns parameter gradients and `dL/dx`.
    pub fn backward(&self, cache: &ForwardCache, d_out: ArrayView2<f64>) -> (Gradients, Array2<f64>) {
        let mut grad = d_out.to_owned();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            layer.activation.backprop(&cache.activations[i + 1], &mut grad);
            let input = &cache.activations[i];
            let dw = input.t().dot(&grad);
            let db = grad.sum_axis(Axis(0));
            grad = grad.dot(&layer.weights.t());
            layers.push((dw, db));
        }
        layers.reverse();
        (Gradients { layers }, grad)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for l in &mut self.layers {
            if idx < l.weights.len() {
                return &mut l.weights.as_slice_mut().unwrap()[idx];
            }
            idx -= l.weights.len();
            if idx < l.bias.len() {
                return &mut l.bias[idx];
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range")
    }

    /// Flat parameter view: each layer's weights (row-major) then its bias.
    pub fn param(&self, mut idx: usize) -> f64 {
        for l in &self.layers {
            if idx < l.weights.len() {
                return l.weights.as_slice().unwrap()[idx];
            }
            idx -= l.weights.len();
            if idx < l.bias.len() {
                return l.bias[idx];
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set_param(&mut self, idx: usize, v: f64) {
        *self.param_mut(idx) = v;
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.param_count() * 4);
        for l in &self.layers {
            for v in l.weights.iter().chain(l.bias.iter()) {
                out.extend((*v as f32).to_le_bytes());
            }
        }
        out
    }

    fn from_blob(spec: &NetSpec, bytes: &[u8]) -> Result<(Self, usize)> {
        let mut off = 0usize;
        let mut read = |n: usize| -> Result<Vec<f64>> {
            let end = off + 4 * n;
            let chunk = bytes.get(off..end).ok_or_else(|| {
                Error::invalid("checkpoint weight blob is truncated")
            })?;
            off = end;
            Ok(chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect())
        };
        if spec.widths.len() != spec.activations.len() + 1 {
            return Err(Error::invalid("checkpoint widths and activations disagree"));
        }
        let mut layers = Vec::new();
        for (i, &act) in spec.activations.iter().enumerate() {
            let (fi, fo) = (spec.widths[i], spec.widths[i + 1]);
            let w = Array2::from_shape_vec((fi, fo), read(fi * fo)?)
                .map_err(|e| Error::invalid(e.to_string()))?;
            let b = Array1::from(read(fo)?);
            layers.push(Dense {
                weights: w,
                bias: b,
                activation: act,
            });
        }
        Ok((Mlp::from_layers(layers)?, off))
    }
}

/// Per-feature standardization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).unwrap();
        let std = x.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-8));
        Self {
            mean: mean.to_vec(),
            std: std.to_vec(),
        }
    }

    pub fn apply(&self, x: &mut Array2<f64>) {
        for mut row in x.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `sum_i (y_i - t_i)^2`.
    SquaredError,
    /// Outputs are logits; targets are class probabilities.
    SoftmaxCrossEntropy,
    /// Outputs are logits; targets in `[0, 1]`.
    BceWithLogits,
}

impl Loss {
    /// Loss value (batch mean of per-sample sums) and its gradient with
    /// respect to the network output.
    pub fn evaluate(self, out: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
        if out.dim() != target.dim() {
            return Err(Error::ShapeMismatch {
                expected: out.len(),
                actual: target.len(),
            });
        }
        let b = out.nrows().max(1) as f64;
        let (value, grad) = match self {
            Loss::SquaredError => {
                let diff = &out - &target;
                let v = diff.iter().map(|d| d * d).sum::<f64>() / b;
                (v, diff * (2.0 / b))
            }
            Loss::SoftmaxCrossEntropy => {
                let p = softmax(out);
                let mut v = 0.0;
                Zip::from(&p).and(&target).for_each(|&p, &t| {
                    if t > 0.0 {
                        v -= t * p.max(1e-300).ln();
                    }
                });
                (v / b, (&p - &target) / b)
            }
            Loss::BceWithLogits => {
                let mut v = 0.0;
                Zip::from(&out).and(&target).for_each(|&z, &t| {
                    // log(1 + e^z) - t z, computed stably
                    v += z.max(0.0) - t * z + (-z.abs()).exp().ln_1p();
                });
                let g = Zip::from(&out)
                    .and(&target)
                    .map_collect(|&z, &t| (sigmoid(z) - t) / b);
                (v / b, g)
            }
        };
        if !value.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        Ok((value, grad))
    }
}

/// Row-wise softmax.
pub fn softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut p = logits.to_owned();
    for mut row in p.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// `h(t) = 0` for `t <= 0.5`, `1` otherwise.
pub fn hard_threshold(v: &[f64]) -> Result<Vec<u8>> {
    v.iter()
        .map(|&t| {
            if !(0.0..=1.0).contains(&t) {
                Err(Error::invalid(format!("hard threshold input {t} outside [0, 1]")))
            } else {
                Ok(u8::from(t > 0.5))
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// First-order optimizer state for one network.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Option<Gradients>,
    v: Option<Gradients>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            m: None,
            v: None,
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut Mlp, grads: &Gradients) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (l, (gw, gb)) in model.layers.iter_mut().zip(&grads.layers) {
                    l.weights.scaled_add(-self.lr, gw);
                    l.bias.scaled_add(-self.lr, gb);
                }
            }
            OptimizerKind::Adam => {
                let m = self.m.get_or_insert_with(|| Gradients::zeros_like(model));
                let v = self.v.get_or_insert_with(|| Gradients::zeros_like(model));
                self.t += 1;
                let c1 = 1.0 - BETA1.powi(self.t);
                let c2 = 1.0 - BETA2.powi(self.t);
                let step = self.lr * c2.sqrt() / c1;
                let eps = ADAM_EPS * c2.sqrt();
                for (((l, (gw, gb)), (mw, mb)), (vw, vb)) in model
                    .layers
                    .iter_mut()
                    .zip(&grads.layers)
                    .zip(m.layers.iter_mut())
                    .zip(v.layers.iter_mut())
                {
                    Zip::from(&mut l.weights)
                        .and(gw)
                        .and(mw)
                        .and(vw)
                        .for_each(|p, &g, m, v| adam_update(p, g, m, v, step, eps));
                    Zip::from(&mut l.bias)
                        .and(gb)
                        .and(mb)
                        .and(vb)
                        .for_each(|p, &g, m, v| adam_update(p, g, m, v, step, eps));
                }
            }
        }
    }
}

#[inline]
fn adam_update(p: &mut f64, g: f64, m: &mut f64, v: &mut f64, step: f64, eps: f64) {
    *m = BETA1 * *m + (1.0 - BETA1) * g;
    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
    *p -= step * *m / (v.sqrt() + eps);
}

/// Epoch-shuffled mini-batch index stream.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: crate::rng::SimRng,
}

impl BatchSampler {
    pub fn new(rows: usize, batch: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..rows).collect(),
            pos: rows,
            batch: batch.min(rows).max(1),
            rng: stream_rng(seed, 0xBA7C),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.reshuffle();
        }
        let s = self.pos;
        self.pos += self.batch;
        &self.order[s..s + self.batch]
    }
}

/// Mini-batch training where `batch_fn` materializes `(inputs, targets)` for
/// a set of row indices. Returns the per-step loss trace.
pub fn train_with<F>(
    model: &mut Mlp,
    rows: usize,
    loss: Loss,
    cfg: &TrainConfig,
    mut batch_fn: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[usize]) -> (Array2<f64>, Array2<f64>),
{
    cfg.validate()?;
    if rows == 0 {
        return Err(Error::EmptyInput("training rows"));
    }
    let mut sampler = BatchSampler::new(rows, cfg.batch_size, cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (x, y) = batch_fn(sampler.next_batch());
        let cache = model.forward(x.view())?;
        let (value, d_out) = loss
            .evaluate(cache.output().view(), y.view())
            .map_err(|_| Error::Divergence { what: "loss", step })?;
        let (grads, _) = model.backward(&cache, d_out.view());
        if !grads.is_finite() {
            return Err(Error::Divergence {
                what: "gradient",
                step,
            });
        }
        opt.step(model, &grads);
        trace.push(value);
    }
    Ok(trace)
}

/// In-memory convenience wrapper around [`train_with`].
pub fn train(
    model: &mut Mlp,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    loss: Loss,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if x.nrows() != y.nrows() {
        return Err(Error::ShapeMismatch {
            expected: x.nrows(),
            actual: y.nrows(),
        });
    }
    train_with(model, x.nrows(), loss, cfg, |idx| {
        (x.select(Axis(0), idx), y.select(Axis(0), idx))
    })
}

/// Mean loss over a full set, evaluated in chunks.
pub fn evaluate_loss(model: &Mlp, x: ArrayView2<f64>, y: ArrayView2<f64>, loss: Loss) -> Result<f64> {
    let mut total = 0.0;
    let chunk = 2048;
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + chunk).min(x.nrows());
        let out = model.predict(x.slice(ndarray::s![start..end, ..]))?;
        let (v, _) = loss.evaluate(out.view(), y.slice(ndarray::s![start..end, ..]))?;
        total += v * (end - start) as f64;
        start = end;
    }
    Ok(total / x.nrows().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NetSpec {
    name: String,
    widths: Vec<usize>,
    activations: Vec<Activation>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    optimizer_state: bool,
    meta: serde_json::Value,
    nets: Vec<NetSpec>,
}

const CHECKPOINT_FORMAT: &str = "ncspoof-mlp";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes `header-json \n f32le-blob`. Weights are rounded to f32.
pub fn save_checkpoint(path: &Path, meta: serde_json::Value, nets: &[(&str, &Mlp)]) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        optimizer_state: false,
        meta,
        nets: nets
            .iter()
            .map(|(name, m)| NetSpec {
                name: (*name).into(),
                widths: m.widths(),
                activations: m.activations(),
            })
            .collect(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for (_, m) in nets {
        bytes.extend(m.to_blob());
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    write_atomic(path, &bytes)
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, Vec<(String, Mlp)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Malformed {
        path: path.into(),
        reason: "missing header line".into(),
    })?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Malformed {
            path: path.into(),
            reason: format!("unknown format {}", header.format),
        });
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::SchemaVersion {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut blob = &bytes[nl + 1..];
    let mut nets = Vec::new();
    for spec in &header.nets {
        let (m, used) = Mlp::from_blob(spec, blob).map_err(|e| Error::Malformed {
            path: path.into(),
            reason: e.to_string(),
        })?;
        blob = &blob[used..];
        nets.push((spec.name.clone(), m));
    }
    if !blob.is_empty() {
        return Err(Error::Malformed {
            path: path.into(),
            reason: "trailing bytes after weight blob".into(),
        });
    }
    Ok((header.meta, nets))
}

/// One-hot rows for class labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut y = Array2::zeros((labels.len(), classes));
    for (i, &c) in labels.iter().enumerate() {
        y[[i, c]] = 1.0;
    }
    y
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference check of every requested coordinate; returns the
    /// worst relative error. `f` evaluates the scalar objective.
    pub(crate) fn worst_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| {
                let scale = a.abs().max(n.abs());
                if scale < 1e-8 {
                    0.0
                } else {
                    (a - n).abs() / scale
                }
            })
            .fold(0.0, f64::max)
    }

    fn check_net(widths: &[usize], hidden: Activation, output: Activation, loss: Loss, seed: u64) {
        let mut rng = stream_rng(seed, 0);
        let model = Mlp::new(widths, hidden, output, &mut rng).unwrap();
        let b = 6;
        let x = Array2::from_shape_simple_fn((b, widths[0]), || standard_normal(&mut rng));
        let out_dim = *widths.last().unwrap();
        let y = match loss {
            Loss::SoftmaxCrossEntropy => {
                let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..out_dim)).collect();
                one_hot(&labels, out_dim)
            }
            _ => Array2::from_shape_simple_fn((b, out_dim), || rng.random::<f64>()),
        };
        let objective = |m: &Mlp| {
            let out = m.predict(x.view()).unwrap();
            loss.evaluate(out.view(), y.view()).unwrap().0
        };
        let cache = model.forward(x.view()).unwrap();
        let (_, d_out) = loss.evaluate(cache.output().view(), y.view()).unwrap();
        let (grads, dx) = model.backward(&cache, d_out.view());

        let h = 1e-4;
        let coords: Vec<usize> = (0..100).map(|_| rng.random_range(0..model.param_count())).collect();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &c in &coords {
            let mut plus = model.clone();
            plus.set_param(c, model.param(c) + h);
            let mut minus = model.clone();
            minus.set_param(c, model.param(c) - h);
            numeric.push((objective(&plus) - objective(&minus)) / (2.0 * h));
            analytic.push(grads.get(c));
        }
        let err = worst_rel_error(&analytic, &numeric);
        assert!(err < 1e-4, "{hidden:?}/{output:?}/{loss:?}: {err}");

        // input gradient
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for r in 0..b {
            for c in 0..widths[0] {
                let f = |d: f64| {
                    let mut xp = x.clone();
                    xp[[r, c]] += d;
                    let out = model.predict(xp.view()).unwrap();
                    loss.evaluate(out.view(), y.view()).unwrap().0
                };
                numeric.push((f(h) - f(-h)) / (2.0 * h));
                analytic.push(dx[[r, c]]);
            }
        }
        assert!(worst_rel_error(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn gradient_check_all_combinations() {
        let mut seed = 0;
        for hidden in [Activation::Relu, Activation::Sigmoid, Activation::Linear] {
            for (output, loss) in [
                (Activation::Linear, Loss::SquaredError),
                (Activation::Sigmoid, Loss::SquaredError),
                (Activation::Linear, Loss::SoftmaxCrossEntropy),
                (Activation::Linear, Loss::BceWithLogits),
            ] {
                seed += 1;
                check_net(&[5, 7, 6, 4], hidden, output, loss, seed);
            }
        }
    }

    #[test]
    fn identity_layer_relu_sigmoid() {
        let eye = Dense {
            weights: Array2::eye(3),
            bias: Array1::zeros(3),
            activation: Activation::Linear,
        };
        let m = Mlp::from_layers(vec![eye]).unwrap();
        let x = array![[1.0, -2.0, 3.5]];
        assert_eq!(m.predict(x.view()).unwrap(), x);

        let relu = Dense {
            weights: Array2::eye(2),
            bias: Array1::zeros(2),
            activation: Activation::Relu,
        };
        let m = Mlp::from_layers(vec![relu]).unwrap();
        assert_eq!(m.predict(array![[-1.0, 2.0]].view()).unwrap(), array![[0.0, 2.0]]);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(m.forward(array![[1.0, 2.0, 3.0]].view()).is_err());
    }

    #[test]
    fn zero_input_zero_target_has_zero_gradient() {
        let mut rng = stream_rng(1, 0);
        let m = Mlp::new(&[3, 4, 2], Activation::Relu, Activation::Linear, &mut rng).unwrap();
        // biases are zero at init, so a zero input gives a zero output
        let x = Array2::zeros((4, 3));
        let y = Array2::zeros((4, 2));
        let cache = m.forward(x.view()).unwrap();
        let (v, d) = Loss::SquaredError.evaluate(cache.output().view(), y.view()).unwrap();
        assert_eq!(v, 0.0);
        let (g, _) = m.backward(&cache, d.view());
        for (w, b) in &g.layers {
            assert!(w.iter().chain(b.iter()).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn softmax_cross_entropy_gradient_identity() {
        let logits = array![[0.3, -1.2, 2.0], [1.0, 1.0, 1.0]];
        let target = array![[0.0, 0.0, 1.0], [0.2, 0.3, 0.5]];
        let (_, g) = Loss::SoftmaxCrossEntropy
            .evaluate(logits.view(), target.view())
            .unwrap();
        let p = softmax(logits.view());
        // dL/dlogits = (p_hat - p) per sample, divided by the batch size
        let expected = (&p - &target) / 2.0;
        for (a, b) in g.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_regression_recovers_weights() {
        let mut rng = stream_rng(2, 0);
        let w_true = array![[1.5, -0.5], [0.25, 2.0], [-1.0, 0.75]];
        let x = Array2::from_shape_simple_fn((512, 3), || standard_normal(&mut rng));
        let y = x.dot(&w_true);
        // closed-form least squares on noiseless data is w_true itself
        let mut m = Mlp::new(&[3, 2], Activation::Linear, Activation::Linear, &mut rng).unwrap();
        let cfg = TrainConfig {
            lr: 0.05,
            batch_size: 64,
            steps: 3000,
            optimizer: OptimizerKind::Sgd,
            seed: 1,
        };
        train(&mut m, x.view(), y.view(), Loss::SquaredError, &cfg).unwrap();
        for (a, b) in m.layers[0].weights.iter().zip(w_true.iter()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn xor_is_learned() {
        let x = array![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]];
        let labels = [0usize, 1, 1, 0];
        let y = one_hot(&labels, 2);
        let mut rng = stream_rng(3, 0);
        let mut m = Mlp::new(&[2, 8, 2], Activation::Relu, Activation::Linear, &mut rng).unwrap();
        let cfg = TrainConfig {
            lr: 0.01,
            batch_size: 4,
            steps: 3000,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        };
        train(&mut m, x.view(), y.view(), Loss::SoftmaxCrossEntropy, &cfg).unwrap();
        let out = m.predict(x.view()).unwrap();
        for (row, &l) in out.rows().into_iter().zip(&labels) {
            assert_eq!(argmax(row.as_slice().unwrap()), l);
        }
    }

    #[test]
    fn training_is_reproducible_and_reports_divergence() {
        let mut rng = stream_rng(4, 0);
        let x = Array2::from_shape_simple_fn((64, 3), || standard_normal(&mut rng));
        let y = Array2::from_shape_simple_fn((64, 1), || standard_normal(&mut rng));
        let base = Mlp::new(&[3, 5, 1], Activation::Relu, Activation::Linear, &mut rng).unwrap();
        let cfg = TrainConfig {
            lr: 1e-2,
            batch_size: 8,
            steps: 50,
            optimizer: OptimizerKind::Adam,
            seed: 9,
        };
        let (mut a, mut b) = (base.clone(), base.clone());
        let ta = train(&mut a, x.view(), y.view(), Loss::SquaredError, &cfg).unwrap();
        let tb = train(&mut b, x.view(), y.view(), Loss::SquaredError, &cfg).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a, b);

        let mut c = base;
        let bad = TrainConfig {
            lr: 1e6,
            optimizer: OptimizerKind::Sgd,
            steps: 200,
            ..cfg
        };
        let y_big = y.mapv(|v| v * 1e3);
        let err = train(&mut c, x.view(), y_big.view(), Loss::SquaredError, &bad).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    #[test]
    fn hard_threshold_branches() {
        assert_eq!(hard_threshold(&[0.3, 0.7, 0.5, 0.0, 1.0]).unwrap(), vec![0, 1, 0, 0, 1]);
        assert!(hard_threshold(&[1.2]).is_err());
        assert!(hard_threshold(&[-0.1]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = stream_rng(5, 0);
        let a = Mlp::new(&[4, 6, 3], Activation::Relu, Activation::Sigmoid, &mut rng).unwrap();
        let b = Mlp::new(&[3, 2], Activation::Linear, Activation::Linear, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("net.ckpt");
        save_checkpoint(&p, serde_json::json!({"role": "test"}), &[("a", &a), ("b", &b)]).unwrap();
        let (meta, nets) = load_checkpoint(&p).unwrap();
        assert_eq!(meta["role"], "test");
        assert_eq!(nets.len(), 2);
        for ((name, m), (orig_name, orig)) in nets.iter().zip([("a", &a), ("b", &b)]) {
            assert_eq!(name, orig_name);
            assert_eq!(m.activations(), orig.activations());
            for i in 0..orig.param_count() {
                assert_eq!(m.param(i), orig.param(i) as f32 as f64);
            }
        }
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
