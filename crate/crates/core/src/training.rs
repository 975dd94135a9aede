//! Cross-entropy training with momentum SGD, and per-sample gradients for
//! empirical Fisher estimation.

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{input_err, shape_err, LabError, Result};
use crate::math::linalg::gemm;
use crate::math::{RngState, TensorF};
use crate::model::{argmax_rows, BnMode, Model, Norm, Pass};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 128,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(LabError::Config(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(LabError::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size < 2 {
            return Err(LabError::Config(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Per-sample loss gradients restricted to one dense block: `n` rows of the
/// block's flattened `(weight, bias)` gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientStack {
    pub n: usize,
    pub dim: usize,
    pub rows: Vec<f64>,
}

impl GradientStack {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mean_row(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for row in self.rows.chunks_exact(self.dim) {
            for (a, b) in m.iter_mut().zip(row) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.n as f64);
        m
    }
}

/// Gradient of a scalar loss with respect to every trainable tensor.
/// `dense[b]` follows the model's block order (hidden blocks, then the
/// classifier); `bn[l]` holds `(d gamma, d beta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub dense: Vec<(Vec<f64>, Vec<f64>)>,
    pub bn: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            dense: model
                .blocks()
                .map(|b| (vec![0.0; b.weight.len()], vec![0.0; b.bias.len()]))
                .collect(),
            bn: model
                .norms
                .iter()
                .map(|bn| (vec![0.0; bn.width()], vec![0.0; bn.width()]))
                .collect(),
        }
    }

    /// Flattened dense-block gradient, in the model's parameter order.
    pub fn flat_dense(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.dense {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    fn matches(&self, model: &Model) -> bool {
        self.dense.len() == model.block_count()
            && self.bn.len() == model.norms.len()
            && self
                .dense
                .iter()
                .zip(model.blocks())
                .all(|((w, b), l)| w.len() == l.weight.len() && b.len() == l.bias.len())
            && self
                .bn
                .iter()
                .zip(&model.norms)
                .all(|((g, b), bn)| g.len() == bn.width() && b.len() == bn.width())
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(shape_err!("{} labels for {rows} logit rows", labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(input_err!("label {bad} out of range for {classes} classes"));
    }
    Ok(())
}

/// Per-sample `-log softmax(logits)[label]`, log-sum-exp stabilized.
pub fn per_sample_losses(logits: &TensorF, labels: &[usize]) -> Result<Vec<f64>> {
    let classes = logits.cols();
    check_labels(labels, logits.rows(), classes)?;
    Ok(logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .collect())
}

/// Mean cross-entropy over the batch.
pub fn cross_entropy(logits: &TensorF, labels: &[usize]) -> Result<f64> {
    let losses = per_sample_losses(logits, labels)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// `softmax - onehot`, optionally scaled (by `1/n` for a batch mean).
fn softmax_grad(logits: &[f64], labels: &[usize], classes: usize, scale: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for (row, &y) in logits.chunks_exact(classes).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (c, e) in exps.iter().enumerate() {
            let target = if c == y { 1.0 } else { 0.0 };
            out.push(scale * (e / sum - target));
        }
    }
    out
}

/// Output of a backward pass: per-block pre-activation deltas (the gradient
/// with respect to each dense layer's output) together with BN gradients.
struct Backward {
    /// `deltas[b]` is `n x out_dim(b)`.
    deltas: Vec<Vec<f64>>,
    bn: Vec<(Vec<f64>, Vec<f64>)>,
}

fn backward(model: &Model, pass: &Pass, dlogits: Vec<f64>, norm: Norm) -> Backward {
    let n = pass.n;
    let depth = model.depth();
    let mut deltas = vec![Vec::new(); depth + 1];
    let mut bn_grads = vec![(Vec::new(), Vec::new()); depth];

    let cls = &model.classifier;
    let mut d_act = vec![0.0; n * cls.in_dim];
    gemm(n, cls.out_dim, cls.in_dim, &dlogits, false, &cls.weight, false, &mut d_act, 0.0);
    deltas[depth] = dlogits;

    for l in (0..depth).rev() {
        let cache = &pass.blocks[l];
        let bn = &model.norms[l];
        let width = bn.width();
        let mut dgamma = vec![0.0; width];
        let mut dbeta = vec![0.0; width];
        let mut dxhat = vec![0.0; n * width];
        for i in 0..n {
            for c in 0..width {
                let k = i * width + c;
                let dz = if cache.post[k] > 0.0 { d_act[k] } else { 0.0 };
                dgamma[c] += dz * cache.xhat[k];
                dbeta[c] += dz;
                dxhat[k] = dz * bn.gamma[c];
            }
        }
        let mut dx = vec![0.0; n * width];
        match norm {
            Norm::Running => {
                for i in 0..n {
                    for c in 0..width {
                        let k = i * width + c;
                        dx[k] = dxhat[k] * cache.inv_std[c];
                    }
                }
            }
            Norm::Batch => {
                let mut sum_dxhat = vec![0.0; width];
                let mut sum_dxhat_xhat = vec![0.0; width];
                for i in 0..n {
                    for c in 0..width {
                        let k = i * width + c;
                        sum_dxhat[c] += dxhat[k];
                        sum_dxhat_xhat[c] += dxhat[k] * cache.xhat[k];
                    }
                }
                let nf = n as f64;
                for i in 0..n {
                    for c in 0..width {
                        let k = i * width + c;
                        dx[k] = cache.inv_std[c] / nf
                            * (nf * dxhat[k] - sum_dxhat[c] - cache.xhat[k] * sum_dxhat_xhat[c]);
                    }
                }
            }
        }
        bn_grads[l] = (dgamma, dbeta);
        if l > 0 {
            let dense = &model.hidden[l];
            let mut d_in = vec![0.0; n * dense.in_dim];
            gemm(n, dense.out_dim, dense.in_dim, &dx, false, &dense.weight, false, &mut d_in, 0.0);
            d_act = d_in;
        }
        deltas[l] = dx;
    }
    Backward {
        deltas,
        bn: bn_grads,
    }
}

/// Sums per-sample deltas into dense gradients.
fn reduce(model: &Model, pass: &Pass, bw: Backward) -> Gradients {
    let n = pass.n;
    let mut dense = Vec::with_capacity(model.block_count());
    for (b, layer) in model.blocks().enumerate() {
        let input = if b < model.depth() {
            &pass.blocks[b].input
        } else {
            &pass.features
        };
        let delta = &bw.deltas[b];
        let mut dw = vec![0.0; layer.weight.len()];
        gemm(layer.out_dim, n, layer.in_dim, delta, true, input, false, &mut dw, 0.0);
        let mut db = vec![0.0; layer.out_dim];
        for row in delta.chunks_exact(layer.out_dim) {
            for (a, v) in db.iter_mut().zip(row) {
                *a += v;
            }
        }
        dense.push((dw, db));
    }
    Gradients { dense, bn: bw.bn }
}

fn check_batch(model: &Model, batch: &TensorF, labels: &[usize]) -> Result<usize> {
    let n = match batch.dims() {
        [n, d] if *d == model.config.input_dim => *n,
        other => return Err(shape_err!("batch of shape {other:?} for input_dim {}", model.config.input_dim)),
    };
    check_labels(labels, n, model.config.num_classes)?;
    Ok(n)
}

/// Mean cross-entropy and its gradient. `TrainingStats` normalizes with the
/// batch statistics (coupling samples) but, unlike a training forward, does
/// not touch the running statistics.
pub fn loss_and_gradient(
    model: &Model,
    batch: &TensorF,
    labels: &[usize],
    mode: BnMode,
) -> Result<(f64, Gradients)> {
    let n = check_batch(model, batch, labels)?;
    let norm = match mode {
        BnMode::RunningStats => Norm::Running,
        BnMode::TrainingStats if n < 2 => {
            return Err(LabError::Precondition("batch statistics need >= 2 samples".into()))
        }
        BnMode::TrainingStats => Norm::Batch,
    };
    let pass = model.run(batch.data(), n, norm);
    Ok(gradient_from_pass(model, &pass, labels, norm))
}

fn gradient_from_pass(model: &Model, pass: &Pass, labels: &[usize], norm: Norm) -> (f64, Gradients) {
    let classes = model.config.num_classes;
    let logits = TensorF::from_parts(vec![pass.n, classes], pass.logits.clone());
    let loss = cross_entropy(&logits, labels).expect("labels checked");
    let dlogits = softmax_grad(&pass.logits, labels, classes, 1.0 / pass.n as f64);
    let bw = backward(model, pass, dlogits, norm);
    (loss, reduce(model, pass, bw))
}

/// Per-sample gradient stacks for every dense block at once, under
/// running-statistics BN so that samples decouple. Entry `b` matches
/// [`per_sample_gradients`] for block `b`.
pub fn per_sample_gradients_all(model: &Model, batch: &TensorF, labels: &[usize]) -> Result<Vec<GradientStack>> {
    let n = check_batch(model, batch, labels)?;
    let pass = model.run(batch.data(), n, Norm::Running);
    let dlogits = softmax_grad(&pass.logits, labels, model.config.num_classes, 1.0);
    let bw = backward(model, &pass, dlogits, Norm::Running);
    Ok((0..model.block_count())
        .map(|b| stack_block(model, &pass, &bw, b))
        .collect())
}

/// Row `i` is the gradient of sample `i`'s cross-entropy with respect to
/// block `block`'s flattened `(weight, bias)`.
pub fn per_sample_gradients(
    model: &Model,
    batch: &TensorF,
    labels: &[usize],
    block: usize,
) -> Result<GradientStack> {
    if block >= model.block_count() {
        return Err(input_err!(
            "unknown block {block}; model has {} dense blocks",
            model.block_count()
        ));
    }
    let n = check_batch(model, batch, labels)?;
    let pass = model.run(batch.data(), n, Norm::Running);
    let dlogits = softmax_grad(&pass.logits, labels, model.config.num_classes, 1.0);
    let bw = backward(model, &pass, dlogits, Norm::Running);
    Ok(stack_block(model, &pass, &bw, block))
}

fn stack_block(model: &Model, pass: &Pass, bw: &Backward, block: usize) -> GradientStack {
    let layer = model.block(block).expect("block id checked");
    let input = if block < model.depth() {
        &pass.blocks[block].input
    } else {
        &pass.features
    };
    let (n, in_dim, out_dim) = (pass.n, layer.in_dim, layer.out_dim);
    let dim = layer.param_count();
    let mut rows = vec![0.0; n * dim];
    for i in 0..n {
        let x = &input[i * in_dim..(i + 1) * in_dim];
        let delta = &bw.deltas[block][i * out_dim..(i + 1) * out_dim];
        let row = &mut rows[i * dim..(i + 1) * dim];
        for (o, d) in delta.iter().enumerate() {
            for (j, xv) in x.iter().enumerate() {
                row[o * in_dim + j] = d * xv;
            }
        }
        row[out_dim * in_dim..].copy_from_slice(delta);
    }
    GradientStack { n, dim, rows }
}

/// Momentum buffer with the same layout as [`Gradients`].
pub type Velocity = Gradients;

/// `v <- momentum * v + g; theta <- theta - lr * v` over dense weights,
/// biases and BN affine parameters. Running statistics are untouched.
pub fn sgd_step(model: &mut Model, grads: &Gradients, lr: f64, momentum: f64, velocity: &mut Velocity) -> Result<()> {
    if !grads.matches(model) || !velocity.matches(model) {
        return Err(shape_err!("gradient/velocity layout does not match the model"));
    }
    fn update(param: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64) {
        for ((p, g), v) in param.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
    for b in 0..model.block_count() {
        let layer = model.block_mut(b).unwrap();
        let (gw, gb) = &grads.dense[b];
        let (vw, vb) = &mut velocity.dense[b];
        update(&mut layer.weight, gw, vw, lr, momentum);
        update(&mut layer.bias, gb, vb, lr, momentum);
    }
    for (l, bn) in model.norms.iter_mut().enumerate() {
        let (gg, gb) = &grads.bn[l];
        let (vg, vb) = &mut velocity.bn[l];
        update(&mut bn.gamma, gg, vg, lr, momentum);
        update(&mut bn.beta, gb, vb, lr, momentum);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy_pct: f64,
}

/// Mini-batch momentum SGD with batch-statistics BN. The shuffle order is a
/// function of `cfg.seed` and the epoch index only. A trailing batch with a
/// single sample is skipped.
pub fn train(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<(Model, Vec<EpochRecord>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(input_err!("training set is empty"));
    }
    if data.input_dim() != model.config.input_dim {
        return Err(shape_err!(
            "dataset has {} features, model expects {}",
            data.input_dim(),
            model.config.input_dim
        ));
    }
    let mut model = model.clone();
    let mut velocity = Gradients::zeros_like(&model);
    let mut history = Vec::with_capacity(cfg.epochs);
    let root = RngState::new(cfg.seed).derive("train/shuffle");
    let classes = model.config.num_classes;
    for epoch in 0..cfg.epochs {
        let order = root.derive(&format!("epoch/{epoch}")).permutation(data.len());
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, y) = data.gather(chunk);
            let n = chunk.len();
            let pass = model.train_pass(x.data(), n)?;
            let (loss, grads) = gradient_from_pass(&model, &pass, &y, Norm::Batch);
            if !loss.is_finite() {
                return Err(LabError::Numeric(format!("loss diverged at epoch {epoch}")));
            }
            correct += argmax_rows(&pass.logits, classes)
                .iter()
                .zip(&y)
                .filter(|(p, t)| p == t)
                .count();
            loss_sum += loss * n as f64;
            seen += n;
            sgd_step(&mut model, &grads, cfg.learning_rate, cfg.momentum, &mut velocity)?;
        }
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / seen.max(1) as f64,
            accuracy_pct: 100.0 * correct as f64 / seen.max(1) as f64,
        });
    }
    Ok((model, history))
}

/// Eval-mode (running statistics) accuracy in percent.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    let preds = model.predict(&data.features)?;
    let correct = preds.iter().zip(&data.labels).filter(|(p, t)| p == t).count();
    Ok(100.0 * correct as f64 / data.len() as f64)
}
