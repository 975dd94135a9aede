//! Signal-collapse diagnostics: global activation moments, variance ratios
//! between an original and a pruned network, prediction histograms and mask
//! distances.

use serde::Serialize;

use crate::datasets::Dataset;
use crate::error::{input_err, shape_err, Result};
use crate::math::TensorF;
use crate::model::{ActivationTrace, Model};
use crate::pruning::PruneMask;

/// Default collapse threshold on the final layer's variance ratio.
pub const DEFAULT_COLLAPSE_THRESHOLD: f64 = 0.1;

/// Scalar mean and population variance over every element of `t`.
pub fn global_moments(t: &TensorF) -> (f64, f64) {
    let n = t.len() as f64;
    // Shifting by the first element keeps constant tensors exactly constant.
    let shift = t.data()[0];
    let mean = shift + t.data().iter().map(|x| x - shift).sum::<f64>() / n;
    let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Per-layer `(Mean, Var)` of the post-BN activations in `trace`.
pub fn activation_stats(trace: &ActivationTrace) -> Result<Vec<(f64, f64)>> {
    if trace.layers.is_empty() {
        return Err(input_err!("empty activation trace"));
    }
    Ok(trace.layers.iter().map(|l| global_moments(&l.post)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceRow {
    pub layer_index: usize,
    pub mean_orig: f64,
    pub var_orig: f64,
    pub mean_pruned: f64,
    pub var_pruned: f64,
    /// `var_pruned / var_orig`.
    pub ratio: f64,
    /// `ratio / previous ratio`, with the ratio before the first layer taken
    /// as 1.
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceReport {
    pub rows: Vec<VarianceRow>,
}

impl VarianceReport {
    pub fn ratios(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.ratio).collect()
    }

    pub fn etas(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.eta).collect()
    }

    pub fn final_ratio(&self) -> Option<f64> {
        self.rows.last().map(|r| r.ratio)
    }
}

/// Builds a report from per-layer moments of the two networks.
pub fn variance_report_from_moments(orig: &[(f64, f64)], pruned: &[(f64, f64)]) -> Result<VarianceReport> {
    if orig.len() != pruned.len() {
        return Err(input_err!("{} original layers vs {} pruned layers", orig.len(), pruned.len()));
    }
    let mut prev = 1.0;
    let rows = orig
        .iter()
        .zip(pruned)
        .enumerate()
        .map(|(l, (&(mo, vo), &(mp, vp)))| {
            let ratio = vp / vo;
            let eta = ratio / prev;
            prev = ratio;
            VarianceRow {
                layer_index: l,
                mean_orig: mo,
                var_orig: vo,
                mean_pruned: mp,
                var_pruned: vp,
                ratio,
                eta,
            }
        })
        .collect();
    Ok(VarianceReport { rows })
}

/// Runs both models on the same batch with running statistics and compares
/// the global variance of each layer's post-BN activations.
pub fn variance_ratio_report(original: &Model, pruned: &Model, batch: &TensorF) -> Result<VarianceReport> {
    if !same_architecture(original, pruned) {
        return Err(input_err!("original and pruned models differ in architecture"));
    }
    let (_, to) = original.forward(batch, true)?;
    let (_, tp) = pruned.forward(batch, true)?;
    let so = activation_stats(&to.expect("tapped"))?;
    let sp = activation_stats(&tp.expect("tapped"))?;
    variance_report_from_moments(&so, &sp)
}

fn same_architecture(a: &Model, b: &Model) -> bool {
    a.block_count() == b.block_count()
        && a.blocks().zip(b.blocks()).all(|(x, y)| x.in_dim == y.in_dim && x.out_dim == y.out_dim)
}

/// `prod(etas)`.
pub fn cumulative_variance_projection(etas: &[f64]) -> f64 {
    etas.iter().product()
}

/// Collapse verdict plus the layers whose ratio fell below the threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollapseVerdict {
    pub collapsed: bool,
    pub threshold: f64,
    pub layers_below: Vec<usize>,
}

/// Collapsed iff the final layer's ratio is below `threshold`.
pub fn detect_signal_collapse(report: &VarianceReport, threshold: f64) -> CollapseVerdict {
    let below = |r: f64| r < threshold;
    CollapseVerdict {
        collapsed: report.final_ratio().is_some_and(below),
        threshold,
        layers_below: report
            .rows
            .iter()
            .filter(|r| below(r.ratio))
            .map(|r| r.layer_index)
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionHistogram {
    pub counts: Vec<usize>,
    pub total: usize,
    pub modal_class: usize,
    pub modal_fraction: f64,
}

impl PredictionHistogram {
    pub fn from_predictions(predictions: &[usize], num_classes: usize) -> Result<Self> {
        if predictions.is_empty() {
            return Err(input_err!("no predictions"));
        }
        let mut counts = vec![0usize; num_classes];
        for &p in predictions {
            *counts
                .get_mut(p)
                .ok_or_else(|| input_err!("prediction {p} outside {num_classes} classes"))? += 1;
        }
        let mut modal_class = 0;
        for (c, &n) in counts.iter().enumerate() {
            if n > counts[modal_class] {
                modal_class = c;
            }
        }
        Ok(Self {
            modal_fraction: counts[modal_class] as f64 / predictions.len() as f64,
            total: predictions.len(),
            modal_class,
            counts,
        })
    }

    pub fn fraction(&self, class: usize) -> f64 {
        self.counts[class] as f64 / self.total as f64
    }
}

/// Histogram of argmax predictions over `eval`; ties go to the lowest class.
pub fn prediction_histogram(model: &Model, eval: &Dataset) -> Result<PredictionHistogram> {
    let preds = model.predict(&eval.features)?;
    PredictionHistogram::from_predictions(&preds, model.classifier.out_dim)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HammingReport {
    pub raw: usize,
    pub d: usize,
    pub normalized: f64,
}

/// Fraction of positions where two masks make different decisions.
pub fn normalized_hamming(a: &PruneMask, b: &PruneMask) -> Result<HammingReport> {
    if a.len() != b.len() {
        return Err(shape_err!("masks of length {} and {}", a.len(), b.len()));
    }
    let raw = a.keep.iter().zip(&b.keep).filter(|(x, y)| x != y).count();
    let d = a.len();
    Ok(HammingReport {
        raw,
        d,
        normalized: if d == 0 { 0.0 } else { raw as f64 / d as f64 },
    })
}
