//! Batch-normalized dense classifier: `[Linear -> BN -> ReLU] x depth`
//! followed by a linear classifier.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, LabError, Result};
use crate::math::linalg::gemm;
use crate::math::{RngState, TensorF};

/// Upper bound on the number of hidden blocks.
pub const MAX_DEPTH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub num_classes: usize,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 20,
            width: 48,
            depth: 24,
            num_classes: 10,
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(LabError::Config(msg));
        if self.input_dim == 0 || self.width == 0 {
            return fail("input_dim and width must be positive".into());
        }
        if self.depth == 0 || self.depth > MAX_DEPTH {
            return fail(format!("depth must be in 1..={MAX_DEPTH}, got {}", self.depth));
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if !(self.bn_epsilon > 0.0 && self.bn_epsilon.is_finite()) {
            return fail(format!("bn_epsilon must be > 0, got {}", self.bn_epsilon));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return fail(format!("bn_momentum must be in (0, 1], got {}", self.bn_momentum));
        }
        Ok(())
    }
}

/// Fully connected layer; `weight` is `out_dim x in_dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Number of prunable entries (weights then bias).
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Flattened `(weight, bias)` block.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.weight.clone();
        p.extend_from_slice(&self.bias);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count());
        let (w, b) = params.split_at(self.weight.len());
        self.weight.copy_from_slice(w);
        self.bias.copy_from_slice(b);
    }

    /// `input (n x in) -> input W^T + b (n x out)`.
    pub(crate) fn apply(&self, input: &[f64], n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * self.out_dim);
        for _ in 0..n {
            out.extend_from_slice(&self.bias);
        }
        gemm(n, self.in_dim, self.out_dim, input, false, &self.weight, true, &mut out, 1.0);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
}

impl BatchNormLayer {
    pub fn new(width: usize, epsilon: f64) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            epsilon,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }
}

/// Which statistics batch normalization uses during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Normalize by the current batch's statistics and fold them into the
    /// running statistics with momentum.
    TrainingStats,
    /// Normalize by the stored running statistics; the model is not touched.
    RunningStats,
}

/// Pre-BN (`pre`) and post-BN, pre-ReLU (`post`) activations of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub pre: TensorF,
    pub post: TensorF,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub layers: Vec<LayerTrace>,
}

/// Statistics source for a single pass, without any side effects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Norm {
    Running,
    Batch,
}

/// Everything a backward pass needs from one hidden block.
#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    /// Input to the dense layer (`n x in`).
    pub input: Vec<f64>,
    /// Pre-BN activations `X` (`n x width`).
    pub pre: Vec<f64>,
    /// Normalized activations before the affine map.
    pub xhat: Vec<f64>,
    /// Post-BN activations `Z`, before ReLU.
    pub post: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Pass {
    pub n: usize,
    pub blocks: Vec<BlockCache>,
    /// Input to the classifier.
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub hidden: Vec<DenseLayer>,
    pub norms: Vec<BatchNormLayer>,
    pub classifier: DenseLayer,
}

impl Model {
    /// Fresh model: weights `N(0, 1/in_dim)`, zero biases, identity BN.
    pub fn init(config: &ModelConfig, rng: &RngState) -> Result<Self> {
        config.validate()?;
        let mut stream = rng.derive("model/init");
        let mut dense = |in_dim: usize, out_dim: usize| {
            let scale = 1.0 / (in_dim as f64).sqrt();
            let mut layer = DenseLayer::zeros(in_dim, out_dim);
            for w in layer.weight.iter_mut() {
                *w = scale * stream.normal();
            }
            layer
        };
        let mut hidden = Vec::with_capacity(config.depth);
        let mut in_dim = config.input_dim;
        for _ in 0..config.depth {
            hidden.push(dense(in_dim, config.width));
            in_dim = config.width;
        }
        let classifier = dense(config.width, config.num_classes);
        let norms = (0..config.depth)
            .map(|_| BatchNormLayer::new(config.width, config.bn_epsilon))
            .collect();
        Ok(Self {
            config: config.clone(),
            hidden,
            norms,
            classifier,
        })
    }

    pub fn depth(&self) -> usize {
        self.hidden.len()
    }

    /// Dense layers in parameter order: hidden blocks, then the classifier.
    /// Block id `b` addresses `blocks()[b]`.
    pub fn blocks(&self) -> impl Iterator<Item = &DenseLayer> {
        self.hidden.iter().chain(std::iter::once(&self.classifier))
    }

    pub fn block_count(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn block(&self, id: usize) -> Option<&DenseLayer> {
        if id < self.hidden.len() {
            self.hidden.get(id)
        } else if id == self.hidden.len() {
            Some(&self.classifier)
        } else {
            None
        }
    }

    pub fn block_mut(&mut self, id: usize) -> Option<&mut DenseLayer> {
        if id < self.hidden.len() {
            self.hidden.get_mut(id)
        } else if id == self.hidden.len() {
            Some(&mut self.classifier)
        } else {
            None
        }
    }

    /// Offsets of each block inside the flat parameter vector, plus the
    /// total as the final entry.
    pub fn block_offsets(&self) -> Vec<usize> {
        let mut offs = vec![0];
        for b in self.blocks() {
            offs.push(offs.last().unwrap() + b.param_count());
        }
        offs
    }

    /// Count of prunable parameters (dense weights and biases).
    pub fn param_count(&self) -> usize {
        self.blocks().map(DenseLayer::param_count).sum()
    }

    /// Prunable parameter vector: for each block in order, its row-major
    /// weight followed by its bias. BN parameters are not included.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for b in self.blocks() {
            out.extend_from_slice(&b.weight);
            out.extend_from_slice(&b.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(shape_err!(
                "parameter vector of {} for model with {}",
                params.len(),
                self.param_count()
            ));
        }
        let mut offset = 0;
        for id in 0..self.block_count() {
            let block = self.block_mut(id).unwrap();
            let len = block.param_count();
            block.set_params(&params[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    pub(crate) fn check_batch(&self, batch: &TensorF) -> Result<usize> {
        match batch.dims() {
            [n, d] if *d == self.config.input_dim => Ok(*n),
            other => Err(shape_err!(
                "batch of shape {other:?}, model expects (n, {})",
                self.config.input_dim
            )),
        }
    }

    /// Inference forward pass with running statistics. Pure.
    pub fn forward(&self, batch: &TensorF, tap: bool) -> Result<(TensorF, Option<ActivationTrace>)> {
        let n = self.check_batch(batch)?;
        let pass = self.run(batch.data(), n, Norm::Running);
        Ok(self.finish(pass, tap))
    }

    /// Forward pass in either BN mode. `TrainingStats` needs at least two
    /// samples and updates the running statistics.
    pub fn forward_mode(
        &mut self,
        batch: &TensorF,
        mode: BnMode,
        tap: bool,
    ) -> Result<(TensorF, Option<ActivationTrace>)> {
        match mode {
            BnMode::RunningStats => self.forward(batch, tap),
            BnMode::TrainingStats => {
                let n = self.check_batch(batch)?;
                let pass = self.train_pass(batch.data(), n)?;
                Ok(self.finish(pass, tap))
            }
        }
    }

    /// Batch-statistics pass that also updates running statistics.
    pub(crate) fn train_pass(&mut self, input: &[f64], n: usize) -> Result<Pass> {
        if n < 2 {
            return Err(LabError::Precondition(
                "batch-statistics normalization needs at least 2 samples".into(),
            ));
        }
        let pass = self.run(input, n, Norm::Batch);
        let rho = self.config.bn_momentum;
        for (bn, cache) in self.norms.iter_mut().zip(&pass.blocks) {
            for c in 0..bn.width() {
                bn.running_mean[c] = (1.0 - rho) * bn.running_mean[c] + rho * cache.mean[c];
                bn.running_var[c] = (1.0 - rho) * bn.running_var[c] + rho * cache.var[c];
            }
        }
        Ok(pass)
    }

    fn finish(&self, pass: Pass, tap: bool) -> (TensorF, Option<ActivationTrace>) {
        let classes = self.classifier.out_dim;
        let trace = tap.then(|| ActivationTrace {
            layers: pass
                .blocks
                .iter()
                .map(|b| {
                    let w = b.mean.len();
                    LayerTrace {
                        pre: TensorF::from_parts(vec![pass.n, w], b.pre.clone()),
                        post: TensorF::from_parts(vec![pass.n, w], b.post.clone()),
                    }
                })
                .collect(),
        });
        (TensorF::from_parts(vec![pass.n, classes], pass.logits), trace)
    }

    /// Core forward pass with no side effects.
    pub(crate) fn run(&self, input: &[f64], n: usize, norm: Norm) -> Pass {
        let mut blocks = Vec::with_capacity(self.depth());
        let mut h = input.to_vec();
        for (dense, bn) in self.hidden.iter().zip(&self.norms) {
            let pre = dense.apply(&h, n);
            let width = dense.out_dim;
            let (mean, var) = match norm {
                Norm::Running => (bn.running_mean.clone(), bn.running_var.clone()),
                Norm::Batch => batch_moments(&pre, n, width),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.epsilon).sqrt()).collect();
            let mut xhat = vec![0.0; n * width];
            let mut post = vec![0.0; n * width];
            let mut act = vec![0.0; n * width];
            for i in 0..n {
                for c in 0..width {
                    let k = i * width + c;
                    let x = (pre[k] - mean[c]) * inv_std[c];
                    let z = x * bn.gamma[c] + bn.beta[c];
                    xhat[k] = x;
                    post[k] = z;
                    act[k] = z.max(0.0);
                }
            }
            blocks.push(BlockCache {
                input: std::mem::replace(&mut h, act),
                pre,
                xhat,
                post,
                mean,
                var,
                inv_std,
            });
        }
        let logits = self.classifier.apply(&h, n);
        Pass {
            n,
            blocks,
            features: h,
            logits,
        }
    }

    /// Row-wise argmax of the logits, ties to the lowest class index.
    pub fn predict(&self, batch: &TensorF) -> Result<Vec<usize>> {
        let (logits, _) = self.forward(batch, false)?;
        Ok(argmax_rows(logits.data(), self.classifier.out_dim))
    }
}

pub(crate) fn argmax_rows(logits: &[f64], classes: usize) -> Vec<usize> {
    logits
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (c, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Per-feature mean and population variance of an `n x width` block.
pub(crate) fn batch_moments(x: &[f64], n: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; width];
    for row in x.chunks_exact(width) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; width];
    for row in x.chunks_exact(width) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    (mean, var)
}
