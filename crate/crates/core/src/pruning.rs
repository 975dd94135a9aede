//! One-shot pruning: scoring rules, global masks, empirical Fisher
//! estimation and second-order (OBS-style) weight updates.

use std::fmt;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{input_err, shape_err, LabError, Result};
use crate::math::{spd_solve, FisherBlock, RngState, TensorF};
use crate::model::Model;
use crate::training::{accuracy, per_sample_gradients_all};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethod {
    Random,
    Magnitude,
    Obd,
    Obs,
}

impl PruneMethod {
    pub fn needs_fisher(self) -> bool {
        matches!(self, PruneMethod::Obd | PruneMethod::Obs)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PruneMethod::Random => "random",
            PruneMethod::Magnitude => "magnitude",
            PruneMethod::Obd => "obd",
            PruneMethod::Obs => "obs",
        }
    }
}

impl fmt::Display for PruneMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Zero the selected weights and leave every other weight alone.
    SelectionOnly,
    /// Zero the selected weights, then move the kept weights of each layer
    /// to the minimizer of the damped-Fisher quadratic model.
    FisherUpdate,
}

impl UpdateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            UpdateMode::SelectionOnly => "selection_only",
            UpdateMode::FisherUpdate => "fisher_update",
        }
    }
}

impl fmt::Display for UpdateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One score per prunable parameter, in the model's parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub z: Vec<f64>,
    pub method: PruneMethod,
}

/// `keep[i] == false` marks parameter `i` as pruned.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    pub keep: Vec<bool>,
    pub sparsity: f64,
}

impl PruneMask {
    pub fn all_kept(d: usize) -> Self {
        Self {
            keep: vec![true; d],
            sparsity: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    /// Mask as 0/1 values.
    pub fn bits(&self) -> Vec<u8> {
        self.keep.iter().map(|&k| k as u8).collect()
    }
}

/// Number of parameters pruned at sparsity `k` over `d` parameters:
/// `round(k * d)`, halves rounded away from zero.
pub fn prune_count(sparsity: f64, d: usize) -> usize {
    ((sparsity * d as f64).round() as usize).min(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FisherConfig {
    pub n_samples: usize,
    pub damping_rel: f64,
}

impl Default for FisherConfig {
    fn default() -> Self {
        Self {
            n_samples: 512,
            damping_rel: 1e-4,
        }
    }
}

/// Block-diagonal damped empirical Fisher: one block per dense layer.
#[derive(Debug, Clone)]
pub struct FisherEstimate {
    /// Indexed by block id; `None` for blocks that were not requested.
    pub blocks: Vec<Option<FisherBlock>>,
    pub n_samples: usize,
    pub damping_rel: f64,
}

impl FisherEstimate {
    pub fn block(&self, id: usize) -> Result<&FisherBlock> {
        self.blocks
            .get(id)
            .and_then(Option::as_ref)
            .ok_or_else(|| LabError::Precondition(format!("no Fisher block for layer {id}")))
    }
}

/// Per-layer `F = (1/n) sum g g^T` from the first `n_samples` rows of
/// `data`, with per-sample gradients taken at the current parameters under
/// running-statistics BN. Each block is damped by
/// `damping_rel * trace(F) / d_block`.
pub fn estimate_fisher(
    model: &Model,
    data: &Dataset,
    n_samples: usize,
    damping_rel: f64,
    blocks: &[usize],
) -> Result<FisherEstimate> {
    if n_samples == 0 {
        return Err(LabError::Precondition("n_samples must be >= 1".into()));
    }
    if n_samples > data.len() {
        return Err(input_err!("{n_samples} Fisher samples requested from {} rows", data.len()));
    }
    if !(damping_rel > 0.0) {
        return Err(LabError::Precondition(format!("damping_rel must be > 0, got {damping_rel}")));
    }
    if let Some(bad) = blocks.iter().find(|&&b| b >= model.block_count()) {
        return Err(input_err!("unknown block {bad}"));
    }
    let idx: Vec<usize> = (0..n_samples).collect();
    let (x, y) = data.gather(&idx);
    let stacks = per_sample_gradients_all(model, &x, &y)?;
    let built: Vec<(usize, FisherBlock)> = stacks
        .into_par_iter()
        .enumerate()
        .filter(|(b, _)| blocks.contains(b))
        .map(|(b, s)| FisherBlock::from_gradients(s.n, s.dim, s.rows, damping_rel).map(|f| (b, f)))
        .collect::<Result<_>>()?;
    let mut out = vec![None; model.block_count()];
    for (b, f) in built {
        out[b] = Some(f);
    }
    Ok(FisherEstimate {
        blocks: out,
        n_samples,
        damping_rel,
    })
}

/// Scores every prunable parameter; lower scores are pruned first.
///
/// * `Magnitude`: `|theta_i|`
/// * `Obd`: `theta_i^2 / (2 (F + lambda I)_ii)`
/// * `Obs`: `theta_i^2 / (2 [(F + lambda I)^{-1}]_ii)`
/// * `Random`: i.i.d. uniform on `[0, 1)`
pub fn score_weights(
    model: &Model,
    method: PruneMethod,
    fisher: Option<&FisherEstimate>,
    rng: Option<&mut RngState>,
) -> Result<ScoreVector> {
    let theta = model.params();
    let z = match method {
        PruneMethod::Magnitude => theta.iter().map(|t| t.abs()).collect(),
        PruneMethod::Random => {
            let rng = rng.ok_or_else(|| LabError::Precondition("random scoring needs an rng".into()))?;
            (0..theta.len()).map(|_| rng.uniform()).collect()
        }
        PruneMethod::Obd | PruneMethod::Obs => {
            let fisher = fisher.ok_or_else(|| {
                LabError::Precondition(format!("{method} scoring needs a Fisher estimate"))
            })?;
            let offsets = model.block_offsets();
            let per_block: Vec<Vec<f64>> = (0..model.block_count())
                .into_par_iter()
                .map(|b| {
                    let block = fisher.block(b)?;
                    let params = &theta[offsets[b]..offsets[b + 1]];
                    if block.dim() != params.len() {
                        return Err(shape_err!("Fisher block {b} has dim {}, layer has {}", block.dim(), params.len()));
                    }
                    let denom = if method == PruneMethod::Obd {
                        block.damped_diagonal()
                    } else {
                        block.inverse_diagonal()?
                    };
                    Ok(params.iter().zip(&denom).map(|(t, h)| t * t / (2.0 * h)).collect())
                })
                .collect::<Result<_>>()?;
            per_block.concat()
        }
    };
    Ok(ScoreVector { z, method })
}

/// Prunes the `round(k * d)` lowest scores; equal scores prune the lower
/// index first.
pub fn build_mask(scores: &ScoreVector, sparsity: f64) -> Result<PruneMask> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(LabError::Precondition(format!("sparsity must be in [0, 1], got {sparsity}")));
    }
    let d = scores.z.len();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| scores.z[a].total_cmp(&scores.z[b]).then(a.cmp(&b)));
    let mut keep = vec![true; d];
    for &i in &order[..prune_count(sparsity, d)] {
        keep[i] = false;
    }
    Ok(PruneMask { keep, sparsity })
}

/// `theta * m`: pruned parameters become exactly zero, everything else is
/// untouched.
pub fn apply_mask(model: &Model, mask: &PruneMask) -> Result<Model> {
    if mask.len() != model.param_count() {
        return Err(shape_err!("mask of {} for {} parameters", mask.len(), model.param_count()));
    }
    let mut out = model.clone();
    let mut offset = 0;
    for b in 0..out.block_count() {
        let layer = out.block_mut(b).unwrap();
        let nw = layer.weight.len();
        for (j, w) in layer.weight.iter_mut().enumerate() {
            if !mask.keep[offset + j] {
                *w = 0.0;
            }
        }
        for (j, v) in layer.bias.iter_mut().enumerate() {
            if !mask.keep[offset + nw + j] {
                *v = 0.0;
            }
        }
        offset += layer.param_count();
    }
    Ok(out)
}

/// Single-weight OBS step: `delta = -theta_i H^{-1} e_i / [H^{-1}]_ii`, with
/// the pruned coordinate pinned to exactly `-theta_i`.
pub fn obs_single_update(theta: &[f64], h: &TensorF, i: usize) -> Result<Vec<f64>> {
    let d = theta.len();
    if !h.is_square() || h.dims()[0] != d {
        return Err(shape_err!("H {:?} for {d} parameters", h.dims()));
    }
    if i >= d {
        return Err(input_err!("index {i} out of range for {d} parameters"));
    }
    let mut e = vec![0.0; d];
    e[i] = 1.0;
    let col = spd_solve(h, &TensorF::vector(e)?)?.into_data();
    if theta[i] == 0.0 {
        return Ok(vec![0.0; d]);
    }
    let scale = -theta[i] / col[i];
    let mut delta: Vec<f64> = col.iter().map(|c| scale * c).collect();
    delta[i] = -theta[i];
    Ok(delta)
}

/// Joint update for a fixed mask on one layer block: the pruned set `P`
/// goes to exactly zero and the kept set `K` moves by
/// `delta_K = H_KK^{-1} H_KP theta_P`, the minimizer of `1/2 delta^T H delta`
/// subject to `delta_P = -theta_P`.
pub fn joint_obs_update(params: &[f64], fisher: &FisherBlock, keep: &[bool]) -> Result<Vec<f64>> {
    if params.len() != fisher.dim() || keep.len() != params.len() {
        return Err(shape_err!(
            "params {}, mask {}, Fisher block {}",
            params.len(),
            keep.len(),
            fisher.dim()
        ));
    }
    let pruned: Vec<usize> = (0..params.len()).filter(|&i| !keep[i]).collect();
    if pruned.is_empty() {
        return Ok(params.to_vec());
    }
    let kept: Vec<usize> = (0..params.len()).filter(|&i| keep[i]).collect();
    let mut out = params.to_vec();
    if !kept.is_empty() {
        let theta_p: Vec<f64> = pruned.iter().map(|&i| params[i]).collect();
        let rhs = fisher.cross_apply(&kept, &pruned, &theta_p);
        let delta = fisher.solve_restricted(&kept, &rhs)?;
        for (&i, d) in kept.iter().zip(&delta) {
            out[i] += d;
        }
    }
    for &i in &pruned {
        out[i] = 0.0;
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(LabError::Numeric("joint update produced a non-finite weight".into()));
    }
    Ok(out)
}

/// `1/2 delta^T H delta` for a damped Fisher block.
pub fn quadratic_increase(fisher: &FisherBlock, delta: &[f64]) -> f64 {
    let hd = fisher.apply(delta);
    0.5 * delta.iter().zip(&hd).map(|(a, b)| a * b).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneReport {
    pub method: PruneMethod,
    pub update_mode: UpdateMode,
    pub sparsity: f64,
    #[serde(skip)]
    pub mask: PruneMask,
    pub pre_accuracy: f64,
    pub post_accuracy: f64,
    pub wall_ms: u128,
    pub fisher_samples: usize,
    pub damping_rel: f64,
}

/// Score, globally rank, mask and (for `FisherUpdate`) apply the per-layer
/// joint update. The Fisher estimate, when needed and not supplied, is
/// computed from the first `fisher_cfg.n_samples` rows of `fisher_data`.
#[allow(clippy::too_many_arguments)]
pub fn prune_pipeline(
    model: &Model,
    method: PruneMethod,
    sparsity: f64,
    update_mode: UpdateMode,
    fisher_data: &Dataset,
    eval: &Dataset,
    fisher_cfg: &FisherConfig,
    fisher: Option<&FisherEstimate>,
    rng: &RngState,
) -> Result<(Model, PruneReport)> {
    let start = Instant::now();
    let needs_fisher = method.needs_fisher() || update_mode == UpdateMode::FisherUpdate;
    let owned;
    let fisher = match (needs_fisher, fisher) {
        (false, _) => None,
        (true, Some(f)) => Some(f),
        (true, None) => {
            let all: Vec<usize> = (0..model.block_count()).collect();
            owned = estimate_fisher(model, fisher_data, fisher_cfg.n_samples, fisher_cfg.damping_rel, &all)?;
            Some(&owned)
        }
    };
    let mut stream = rng.derive(&format!("pruning/{method}"));
    let scores = score_weights(model, method, fisher, Some(&mut stream))?;
    let mask = build_mask(&scores, sparsity)?;
    let mut pruned = apply_mask(model, &mask)?;
    if update_mode == UpdateMode::FisherUpdate && mask.pruned_count() > 0 {
        let fisher = fisher.expect("fisher present for updates");
        let offsets = model.block_offsets();
        let updated: Vec<Vec<f64>> = (0..model.block_count())
            .into_par_iter()
            .map(|b| {
                let layer = model.block(b).unwrap();
                let keep = &mask.keep[offsets[b]..offsets[b + 1]];
                joint_obs_update(&layer.params(), fisher.block(b)?, keep)
            })
            .collect::<Result<_>>()?;
        for (b, params) in updated.iter().enumerate() {
            pruned.block_mut(b).unwrap().set_params(params);
        }
    }
    let report = PruneReport {
        method,
        update_mode,
        sparsity,
        pre_accuracy: accuracy(model, eval)?,
        post_accuracy: accuracy(&pruned, eval)?,
        mask,
        wall_ms: start.elapsed().as_millis(),
        fisher_samples: fisher.map_or(0, |f| f.n_samples),
        damping_rel: fisher.map_or(0.0, |f| f.damping_rel),
    };
    Ok((pruned, report))
}
