//! Small differentiable models trained with plain mini-batch SGD.
//!
//! Parameters are flattened layer by layer: each dense layer contributes its
//! `fan_out × fan_in` weight matrix (row-major) followed by its bias vector.

use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::error::{usage, Error, Result};
use crate::params::Params;
use crate::rng::SeededRng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SoftmaxRegression,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub classes: usize,
}

impl ModelSpec {
    pub fn softmax_regression(input_dim: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::SoftmaxRegression,
            input_dim,
            hidden_dims: Vec::new(),
            classes,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_dim,
            hidden_dims,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes == 0 || self.hidden_dims.contains(&0) {
            return Err(usage("model dimensions must be positive"));
        }
        match (self.kind, self.hidden_dims.is_empty()) {
            (ModelKind::SoftmaxRegression, false) => Err(usage("softmax regression has no hidden layers")),
            (ModelKind::Mlp, true) => Err(usage("mlp needs at least one hidden layer")),
            _ => Ok(()),
        }
    }

    /// `(fan_in, fan_out)` per dense layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.classes);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|&(i, o)| i * o + o).sum()
    }
}

/// Labelled samples stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetShard<T> {
    dim: usize,
    features: Vec<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> DatasetShard<T> {
    pub fn new(dim: usize, features: Vec<T>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(usage(format!(
                "{} features do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self { dim, features, labels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Copies the listed rows (repeats allowed) into a new shard.
    pub fn gather(&self, rows: &[usize]) -> Self {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        Self {
            dim: self.dim,
            features,
            labels,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { base: 0.1, decay: 0.993 }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0 && self.decay > 0.0 && self.decay <= 1.0) {
            return Err(usage(format!("learning rate {} / decay {} out of range", self.base, self.decay)));
        }
        Ok(())
    }

    pub fn lr_at(&self, t: u32) -> f64 {
        self.base * self.decay.powi(t as i32)
    }
}

pub fn lr_at(schedule: &LrSchedule, t: u32) -> f64 {
    schedule.lr_at(t)
}

/// Glorot-uniform weights, zero biases.
pub fn init_model<T: Scalar>(spec: &ModelSpec, seed: u64) -> Params<T> {
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::with_capacity(spec.param_count());
    for (fan_in, fan_out) in spec.layers() {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        out.extend((0..fan_in * fan_out).map(|_| T::lit(rng.random_range(-limit..=limit))));
        out.extend(std::iter::repeat_n(T::zero(), fan_out));
    }
    Params::from_vec_unchecked(out)
}

fn check_inputs<T: Scalar>(w: &[T], spec: &ModelSpec, batch: &DatasetShard<T>) -> Result<()> {
    if w.len() != spec.param_count() {
        return Err(usage(format!("model has {} parameters, spec needs {}", w.len(), spec.param_count())));
    }
    if batch.dim != spec.input_dim {
        return Err(usage(format!("batch width {} vs input dim {}", batch.dim, spec.input_dim)));
    }
    if batch.is_empty() {
        return Err(usage("empty batch"));
    }
    if let Some(&y) = batch.labels.iter().find(|&&y| y >= spec.classes) {
        return Err(usage(format!("label {y} out of range for {} classes", spec.classes)));
    }
    Ok(())
}

/// Pre-activations of every layer for one sample. Hidden layers apply ReLU
/// to produce the next layer's input; the last entry holds the logits.
fn forward<T: Scalar>(w: &[T], layers: &[(usize, usize)], x: &[T]) -> Vec<Vec<T>> {
    let mut pre = Vec::with_capacity(layers.len());
    let mut input: Vec<T> = x.to_vec();
    let mut off = 0;
    for (l, &(fan_in, fan_out)) in layers.iter().enumerate() {
        let weights = &w[off..off + fan_in * fan_out];
        let bias = &w[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
        off += fan_in * fan_out + fan_out;
        let z: Vec<T> = (0..fan_out)
            .map(|o| {
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                row.iter().zip(&input).fold(bias[o], |acc, (&a, &b)| acc + a * b)
            })
            .collect();
        if l + 1 < layers.len() {
            input = z.iter().map(|&v| v.max(T::zero())).collect();
        }
        pre.push(z);
    }
    pre
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax of `logits` and the cross-entropy against `label`.
fn softmax_xent<T: Scalar>(logits: &[T], label: usize) -> (Vec<T>, f64) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    let loss = (sum.ln() + max - logits[label]).as_f64();
    (exps.into_iter().map(|e| e / sum).collect(), loss)
}

/// Mean loss and (optionally) its gradient by backpropagation.
fn loss_and_grad<T: Scalar>(w: &[T], spec: &ModelSpec, batch: &DatasetShard<T>, want_grad: bool) -> (f64, Vec<T>) {
    let layers = spec.layers();
    let mut grad = if want_grad { vec![T::zero(); w.len()] } else { Vec::new() };
    let mut offsets = Vec::with_capacity(layers.len());
    let mut off = 0;
    for &(i, o) in &layers {
        offsets.push(off);
        off += i * o + o;
    }

    let mut total = 0.0;
    for s in 0..batch.len() {
        let x = batch.row(s);
        let y = batch.labels[s];
        let pre = forward(w, &layers, x);
        let (probs, loss) = softmax_xent(pre.last().expect("at least one layer"), y);
        total += loss;
        if !want_grad {
            continue;
        }
        let mut delta = probs;
        delta[y] = delta[y] - T::one();
        for l in (0..layers.len()).rev() {
            let (fan_in, fan_out) = layers[l];
            let base = offsets[l];
            let input: Vec<T> = if l == 0 {
                x.to_vec()
            } else {
                pre[l - 1].iter().map(|&v| v.max(T::zero())).collect()
            };
            for o in 0..fan_out {
                let d = delta[o];
                let row = &mut grad[base + o * fan_in..base + (o + 1) * fan_in];
                for (g, &a) in row.iter_mut().zip(&input) {
                    *g = *g + d * a;
                }
                let b = base + fan_in * fan_out + o;
                grad[b] = grad[b] + d;
            }
            if l > 0 {
                let weights = &w[base..base + fan_in * fan_out];
                delta = (0..fan_in)
                    .map(|i| {
                        if pre[l - 1][i] > T::zero() {
                            (0..fan_out).fold(T::zero(), |acc, o| acc + weights[o * fan_in + i] * delta[o])
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
            }
        }
    }
    let m = batch.len() as f64;
    let inv = T::lit(1.0 / m);
    for g in &mut grad {
        *g = *g * inv;
    }
    (total / m, grad)
}

/// Mean softmax cross-entropy over `batch`.
pub fn loss<T: Scalar>(w: &[T], spec: &ModelSpec, batch: &DatasetShard<T>) -> Result<f64> {
    check_inputs(w, spec, batch)?;
    Ok(loss_and_grad(w, spec, batch, false).0)
}

/// Exact gradient of [`loss`], in the flattened parameter order.
pub fn grad<T: Scalar>(w: &[T], spec: &ModelSpec, batch: &DatasetShard<T>) -> Result<Params<T>> {
    check_inputs(w, spec, batch)?;
    Params::new(loss_and_grad(w, spec, batch, true).1)
}

/// Outcome of local training.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalUpdate<T> {
    /// Weights after the last SGD step.
    pub weights: Params<T>,
    /// Accumulated update `w0 - weights`, exact in floating point.
    pub delta: Params<T>,
}

/// Runs `iters` SGD steps from `w0` with batches of `batch_size` samples
/// drawn uniformly with replacement.
///
/// The returned weights are rebuilt as `w0 - delta`, so subtracting the
/// update from `w0` reproduces them bit for bit.
pub fn local_train<T: Scalar>(
    w0: &Params<T>,
    spec: &ModelSpec,
    shard: &DatasetShard<T>,
    batch_size: usize,
    iters: usize,
    lr: f64,
    seed: u64,
) -> Result<LocalUpdate<T>> {
    if shard.is_empty() {
        return Err(usage("cannot train on an empty shard"));
    }
    if batch_size == 0 {
        return Err(usage("batch size must be positive"));
    }
    let mut rng = SeededRng::new(seed);
    let eta = T::lit(lr);
    let mut w = w0.as_slice().to_vec();
    let mut rows = vec![0; batch_size];
    for _ in 0..iters {
        for r in rows.iter_mut() {
            *r = rng.random_range(0..shard.len());
        }
        let batch = shard.gather(&rows);
        check_inputs(&w, spec, &batch)?;
        let (_, g) = loss_and_grad(&w, spec, &batch, true);
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi = *wi - eta * *gi;
        }
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("local training diverged".into()));
    }
    let delta: Vec<T> = w0.iter().zip(&w).map(|(&a, &b)| a - b).collect();
    let delta = Params::new(delta)?;
    let weights = w0.sub(&delta)?;
    Ok(LocalUpdate { weights, delta })
}

/// Fraction of samples whose highest logit (lowest class on ties) matches
/// the label.
pub fn evaluate<T: Scalar>(w: &[T], spec: &ModelSpec, test: &DatasetShard<T>) -> Result<f64> {
    check_inputs(w, spec, test)?;
    let layers = spec.layers();
    let correct = (0..test.len())
        .filter(|&s| {
            let pre = forward(w, &layers, test.row(s));
            argmax(pre.last().expect("at least one layer")) == test.labels[s]
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}
