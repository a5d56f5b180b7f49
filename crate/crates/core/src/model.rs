//! Multilayer perceptron with ReLU hidden layers, softmax cross-entropy and
//! hand-written backpropagation. Parameters live in one flat [`ParamVector`]
//! so they can be averaged, compared and clustered directly.
//!
//! Layout: for each layer in order, the `fan_in x fan_out` weight matrix in
//! row-major order followed by the `fan_out` biases.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        let spec = ModelSpec { input_dim, hidden_dims, num_classes };
        spec.check()?;
        Ok(spec)
    }

    /// 784 -> 128 -> 64 -> 10.
    pub fn mnist_default() -> Self {
        ModelSpec { input_dim: 784, hidden_dims: vec![128, 64], num_classes: 10 }
    }

    pub fn check(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("num_classes must be at least 2".into()));
        }
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument("layer dimensions must be at least 1".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.num_classes);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_len(&self) -> usize {
        self.layers().iter().map(|(i, o)| (i + 1) * o).sum()
    }
}

/// Mean cross-entropy over a batch.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LossValue(pub f64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalStepsMode {
    /// `local_updates` full passes over the shard.
    #[default]
    Epochs,
    /// `local_updates` minibatch steps.
    Steps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdOptions {
    pub lr: f64,
    pub batch_size: usize,
    pub local_updates: usize,
    pub mode: LocalStepsMode,
}

#[derive(Debug, Clone, Copy)]
pub struct Proximal<'a> {
    pub beta: f64,
    pub anchor: &'a ParamVector,
}

#[derive(Debug, Clone)]
pub struct SgdOutcome {
    pub params: ParamVector,
    /// Mean minibatch loss of each pass (or of the whole run in `Steps` mode).
    pub epoch_losses: Vec<f64>,
}

struct LayerView<'a> {
    w: ArrayView2<'a, f64>,
    b: &'a [f64],
}

fn layer_views<'a>(spec: &ModelSpec, params: &'a [f64]) -> Vec<LayerView<'a>> {
    let mut off = 0;
    spec.layers()
        .into_iter()
        .map(|(fi, fo)| {
            let w = ArrayView2::from_shape((fi, fo), &params[off..off + fi * fo]).expect("layout");
            let b = &params[off + fi * fo..off + fi * fo + fo];
            off += (fi + 1) * fo;
            LayerView { w, b }
        })
        .collect()
}

/// Deterministic init: weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = rng::stream(seed, "init", &[]);
    let mut out = Vec::with_capacity(spec.param_len());
    for (fi, fo) in spec.layers() {
        let limit = (6.0 / (fi + fo) as f64).sqrt();
        out.extend((0..fi * fo).map(|_| rng.random_range(-limit..limit)));
        out.extend(std::iter::repeat_n(0.0, fo));
    }
    ParamVector(out)
}

fn check_batch(spec: &ModelSpec, params: &[f64], x: &ArrayView2<f64>, y: &[usize]) -> Result<()> {
    if params.len() != spec.param_len() {
        return Err(Error::LengthMismatch { expected: spec.param_len(), got: params.len() });
    }
    if x.ncols() != spec.input_dim {
        return Err(Error::LengthMismatch { expected: spec.input_dim, got: x.ncols() });
    }
    if x.nrows() != y.len() {
        return Err(Error::LengthMismatch { expected: x.nrows(), got: y.len() });
    }
    if y.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= spec.num_classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range")));
    }
    Ok(())
}

/// Forward pass; returns post-activation outputs of every layer (last = logits).
fn forward(layers: &[LayerView], x: ArrayView2<f64>) -> Vec<Array2<f64>> {
    let mut acts: Vec<Array2<f64>> = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let input = if l == 0 { x.view() } else { acts[l - 1].view() };
        let mut z = Array2::<f64>::zeros((input.nrows(), layer.w.ncols()));
        for mut row in z.rows_mut() {
            row.assign(&ndarray::aview1(layer.b));
        }
        general_mat_mul(1.0, &input, &layer.w, 1.0, &mut z);
        if l + 1 < layers.len() {
            z.mapv_inplace(|v| v.max(0.0));
        }
        acts.push(z);
    }
    acts
}

/// Turns logits into probabilities in place; returns (summed loss, correct count).
fn softmax_xent(logits: &mut Array2<f64>, y: &[usize]) -> (f64, usize) {
    let mut loss = 0.0;
    let mut correct = 0;
    for (mut row, &label) in logits.rows_mut().into_iter().zip(y) {
        let mut best = 0;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
        let max = row[best];
        let shifted_label = row[label] - max;
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        loss += sum.ln() - shifted_label;
        row /= sum;
    }
    (loss, correct)
}

/// Softmax probabilities for each row of `x`.
pub fn predict_proba(spec: &ModelSpec, params: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
    let layers = layer_views(spec, params);
    let mut acts = forward(&layers, x);
    let mut logits = acts.pop().expect("at least one layer");
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    logits
}

/// Mean cross-entropy, accuracy and the analytic gradient on one batch.
pub fn forward_loss_grad(
    spec: &ModelSpec,
    params: &[f64],
    x: ArrayView2<f64>,
    y: &[usize],
) -> Result<(LossValue, f64, ParamVector)> {
    check_batch(spec, params, &x, y)?;
    let mut grad = ParamVector::zeros(params.len());
    let (loss, acc) = loss_grad_into(spec, params, x, y, &mut grad);
    Ok((LossValue(loss), acc, grad))
}

fn loss_grad_into(spec: &ModelSpec, params: &[f64], x: ArrayView2<f64>, y: &[usize], grad: &mut [f64]) -> (f64, f64) {
    let n = y.len();
    let layers = layer_views(spec, params);
    let mut acts = forward(&layers, x.view());
    let last = acts.len() - 1;
    let (loss, correct) = softmax_xent(&mut acts[last], y);
    // delta = (p - onehot) / n
    let mut delta = acts.pop().expect("logits");
    for (mut row, &label) in delta.rows_mut().into_iter().zip(y) {
        row[label] -= 1.0;
    }
    delta /= n as f64;

    let dims = spec.layers();
    let mut offsets = Vec::with_capacity(dims.len());
    let mut off = 0;
    for (fi, fo) in &dims {
        offsets.push(off);
        off += (fi + 1) * fo;
    }
    for l in (0..layers.len()).rev() {
        let (fi, fo) = dims[l];
        let input = if l == 0 { x.view() } else { acts[l - 1].view() };
        let (gw, rest) = grad[offsets[l]..offsets[l] + (fi + 1) * fo].split_at_mut(fi * fo);
        let mut gw = ArrayViewMut2::from_shape((fi, fo), gw).expect("layout");
        general_mat_mul(1.0, &input.t(), &delta, 0.0, &mut gw);
        let gb: Array1<f64> = delta.sum_axis(Axis(0));
        rest.copy_from_slice(gb.as_slice().expect("contiguous"));
        if l > 0 {
            let mut next = Array2::<f64>::zeros((n, fi));
            general_mat_mul(1.0, &delta, &layers[l].w.t(), 0.0, &mut next);
            // relu' evaluated on the stored post-activation
            next.zip_mut_with(&acts[l - 1], |d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = next;
        }
    }
    (loss / n as f64, correct as f64 / n as f64)
}

/// Loss and accuracy of `params` over the listed dataset rows.
pub fn evaluate(spec: &ModelSpec, params: &[f64], data: &Dataset, rows: &[usize]) -> Result<(LossValue, f64)> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    const CHUNK: usize = 512;
    let layers = layer_views(spec, params);
    let mut loss = 0.0;
    let mut correct = 0;
    for chunk in rows.chunks(CHUNK) {
        let (x, y) = data.gather(chunk);
        check_batch(spec, params, &x.view(), &y)?;
        let mut acts = forward(&layers, x.view());
        let (l, c) = softmax_xent(acts.last_mut().expect("logits"), &y);
        loss += l;
        correct += c;
    }
    Ok((LossValue(loss / rows.len() as f64), correct as f64 / rows.len() as f64))
}

/// Minibatch SGD over the listed rows. Each step adds `beta * (params - anchor)`
/// to the gradient when a proximal anchor is given.
pub fn sgd_epochs(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    rows: &[usize],
    opts: &SgdOptions,
    seed: u64,
    prox: Option<Proximal>,
) -> Result<SgdOutcome> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("training shard"));
    }
    if !(opts.lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", opts.lr)));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    if params.len() != spec.param_len() {
        return Err(Error::LengthMismatch { expected: spec.param_len(), got: params.len() });
    }
    let mut rng = rng::stream(seed, "sgd", &[]);
    let mut w = params.clone();
    let mut grad = vec![0.0; w.len()];
    let mut order = rows.to_vec();
    let mut epoch_losses = Vec::new();

    let total_steps = match opts.mode {
        LocalStepsMode::Epochs => opts.local_updates * rows.len().div_ceil(opts.batch_size),
        LocalStepsMode::Steps => opts.local_updates,
    };
    let mut step = 0;
    let mut run_loss = 0.0;
    let mut run_n = 0usize;
    while step < total_steps {
        order.shuffle(&mut rng);
        for batch in order.chunks(opts.batch_size) {
            if step == total_steps {
                break;
            }
            let (x, y) = data.gather(batch);
            check_batch(spec, &w, &x.view(), &y)?;
            let (loss, _) = loss_grad_into(spec, &w, x.view(), &y, &mut grad);
            run_loss += loss * y.len() as f64;
            run_n += y.len();
            if let Some(p) = prox {
                for ((g, wi), a) in grad.iter_mut().zip(w.iter()).zip(p.anchor.iter()) {
                    *g += p.beta * (wi - a);
                }
            }
            for (wi, g) in w.iter_mut().zip(&grad) {
                *wi -= opts.lr * g;
            }
            if !w.is_finite() {
                return Err(Error::InvalidArgument(format!("parameters diverged at step {step}")));
            }
            step += 1;
        }
        if opts.mode == LocalStepsMode::Epochs {
            epoch_losses.push(run_loss / run_n as f64);
            run_loss = 0.0;
            run_n = 0;
        }
    }
    if opts.mode == LocalStepsMode::Steps && run_n > 0 {
        epoch_losses.push(run_loss / run_n as f64);
    }
    Ok(SgdOutcome { params: w, epoch_losses })
}
