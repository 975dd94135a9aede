//! REFLOW: re-estimate the BN running statistics of a pruned network from a
//! calibration set drawn through that network, leaving every trainable
//! parameter alone.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{input_err, LabError, Result};
use crate::math::{RngState, StreamingStats, TensorF};
use crate::model::{Model, Norm};
use crate::training::accuracy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Calibration forwards normalize with the current batch's statistics,
    /// so each layer sees the already-corrected signal of the layers above.
    #[default]
    BatchStatPropagation,
    /// Calibration forwards normalize with the stale running statistics.
    FrozenUpstream,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSpec {
    pub batch_count: usize,
    pub batch_size: usize,
    pub mode: CalibrationMode,
    pub seed: u64,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        Self {
            batch_count: 50,
            batch_size: 128,
            mode: CalibrationMode::BatchStatPropagation,
            seed: 42,
        }
    }
}

impl CalibrationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_count == 0 {
            return Err(LabError::Config("calibration batch_count must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(LabError::Config("calibration batch_size must be >= 2".into()));
        }
        Ok(())
    }
}

/// Recalibrated mean and population variance for one BN layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecalibratedStats {
    pub layers: Vec<LayerStats>,
    pub sample_count: u64,
}

/// Index batches for calibration: consecutive chunks of seeded
/// reshuffles of the training split, wrapping into a fresh shuffle when one
/// runs out.
pub fn calibration_batches(train: &Dataset, spec: &CalibrationSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    if train.is_empty() {
        return Err(input_err!("empty calibration source"));
    }
    let base = RngState::new(spec.seed).derive("reflow/calibration");
    let need = spec.batch_count * spec.batch_size;
    let mut order = Vec::with_capacity(need);
    let mut pass = 0;
    while order.len() < need {
        let mut rng = base.derive(&format!("epoch/{pass}"));
        order.extend(rng.permutation(train.len()));
        pass += 1;
    }
    order.truncate(need);
    Ok(order.chunks(spec.batch_size).map(<[usize]>::to_vec).collect())
}

/// Exact aggregate statistics of every layer's pre-BN activations over the
/// first `spec.batch_count` batches.
pub fn collect_bn_stats(model: &Model, batches: &[TensorF], spec: &CalibrationSpec) -> Result<RecalibratedStats> {
    if spec.batch_count == 0 {
        return Err(LabError::Precondition("batch_count must be >= 1".into()));
    }
    if batches.len() < spec.batch_count {
        return Err(input_err!(
            "{} calibration batches supplied, {} required",
            batches.len(),
            spec.batch_count
        ));
    }
    let batches = &batches[..spec.batch_count];
    let norm = match spec.mode {
        CalibrationMode::BatchStatPropagation => Norm::Batch,
        CalibrationMode::FrozenUpstream => Norm::Running,
    };
    let per_batch: Vec<Vec<StreamingStats>> = batches
        .par_iter()
        .map(|batch| {
            let n = model.check_batch(batch)?;
            if norm == Norm::Batch && n < 2 {
                return Err(LabError::Precondition(
                    "batch-statistics calibration needs at least 2 samples per batch".into(),
                ));
            }
            let pass = model.run(batch.data(), n, norm);
            pass.blocks
                .iter()
                .map(|b| {
                    let width = b.mean.len();
                    let mut s = StreamingStats::new(width);
                    s.push_rows(&b.pre, width)?;
                    Ok(s)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    // Merge in batch order so the result does not depend on scheduling.
    let mut acc: Vec<StreamingStats> = model.norms.iter().map(|bn| StreamingStats::new(bn.width())).collect();
    for stats in &per_batch {
        for (a, s) in acc.iter_mut().zip(stats) {
            *a = a.merge(s)?;
        }
    }
    let sample_count = acc.first().map_or(0, StreamingStats::count);
    Ok(RecalibratedStats {
        layers: acc
            .iter()
            .map(|s| LayerStats {
                mean: s.mean().to_vec(),
                var: s.variance(),
            })
            .collect(),
        sample_count,
    })
}

/// Draws the calibration batches from `train` and collects statistics.
pub fn collect_bn_stats_from(model: &Model, train: &Dataset, spec: &CalibrationSpec) -> Result<RecalibratedStats> {
    let batches: Vec<TensorF> = calibration_batches(train, spec)?
        .iter()
        .map(|idx| train.gather(idx).0)
        .collect();
    collect_bn_stats(model, &batches, spec)
}

/// Copies the recalibrated statistics into the selected BN layers (all of
/// them when `layers` is `None`).
pub fn apply_reflow(model: &Model, stats: &RecalibratedStats, layers: Option<&[usize]>) -> Result<Model> {
    if stats.layers.len() != model.depth() {
        return Err(input_err!(
            "statistics for {} layers, model has {}",
            stats.layers.len(),
            model.depth()
        ));
    }
    let all: Vec<usize> = (0..model.depth()).collect();
    let layers = layers.unwrap_or(&all);
    let mut out = model.clone();
    for &l in layers {
        let bn = out
            .norms
            .get_mut(l)
            .ok_or_else(|| input_err!("BN layer {l} out of range"))?;
        let s = &stats.layers[l];
        if s.mean.len() != bn.width() || s.var.len() != bn.width() {
            return Err(input_err!("layer {l}: statistics width {} vs {}", s.mean.len(), bn.width()));
        }
        bn.running_mean.clone_from(&s.mean);
        bn.running_var.clone_from(&s.var);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepDirection {
    Forward,
    Backward,
}

impl SweepDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepDirection::Forward => "forward",
            SweepDirection::Backward => "backward",
        }
    }

    /// Layer order of the sweep over `depth` BN layers.
    pub fn order(self, depth: usize) -> Vec<usize> {
        match self {
            SweepDirection::Forward => (0..depth).collect(),
            SweepDirection::Backward => (0..depth).rev().collect(),
        }
    }
}

impl fmt::Display for SweepDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub step_k: usize,
    /// Layer recalibrated at this step; `None` for the starting point.
    pub layer_index: Option<usize>,
    pub direction: SweepDirection,
    pub cumulative_accuracy_pct: f64,
}

/// Accuracy after recalibrating the first `k` layers in sweep order, for
/// `k = 0..=L`.
pub fn layerwise_recalibration_sweep(
    model: &Model,
    stats: &RecalibratedStats,
    eval: &Dataset,
    direction: SweepDirection,
) -> Result<Vec<SweepPoint>> {
    let order = direction.order(model.depth());
    (0..=order.len())
        .into_par_iter()
        .map(|k| {
            let m = apply_reflow(model, stats, Some(&order[..k]))?;
            Ok(SweepPoint {
                step_k: k,
                layer_index: k.checked_sub(1).map(|i| order[i]),
                direction,
                cumulative_accuracy_pct: accuracy(&m, eval)?,
            })
        })
        .collect()
}

/// Smallest `k` whose accuracy gain over step 0 reaches `fraction` of the
/// total gain at the last step; `None` when the sweep gains nothing.
pub fn steps_to_fraction_of_gain(curve: &[SweepPoint], fraction: f64) -> Option<usize> {
    let start = curve.first()?.cumulative_accuracy_pct;
    let total = curve.last()?.cumulative_accuracy_pct - start;
    if total <= 0.0 {
        return None;
    }
    curve
        .iter()
        .find(|p| p.cumulative_accuracy_pct - start >= fraction * total)
        .map(|p| p.step_k)
}
