//! End-to-end runs: train, prune, diagnose, recalibrate, ablate, and write
//! every artifact under one output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use collapse_lab::checkpoint::{load_checkpoint, save_checkpoint};
use collapse_lab::datasets::{gen_blobs, gen_spirals, parse_idx, Dataset, FeatureScaler, Split};
use collapse_lab::diagnostics::{normalized_hamming, prediction_histogram, variance_ratio_report, VarianceReport};
use collapse_lab::pruning::{estimate_fisher, prune_pipeline, FisherEstimate, PruneMask, PruneMethod, UpdateMode};
use collapse_lab::reflow::{apply_reflow, collect_bn_stats_from, layerwise_recalibration_sweep, CalibrationSpec};
use collapse_lab::training::{accuracy, train};
use collapse_lab::{LabError, Model, Result, RngState};

use crate::config::{DataConfig, ExperimentConfig};
use crate::records::*;

/// How far a run goes. Each stage includes everything before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    /// Baseline training and its checkpoint.
    Train,
    /// The pruning grid with metrics and pruned checkpoints.
    Prune,
    /// Adds the per-layer variance, prediction and mask-distance reports.
    Diagnose,
    /// Adds REFLOW rows, reflowed checkpoints and layer-wise sweeps.
    Reflow,
    /// Adds the calibration-size ablations.
    Experiment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub run_id: String,
    pub out_dir: PathBuf,
    pub baseline_checkpoint: PathBuf,
    pub pruned_checkpoints: Vec<PathBuf>,
    pub reflowed_checkpoints: Vec<PathBuf>,
    pub reports: Vec<PathBuf>,
    pub config_snapshot: PathBuf,
}

/// Train and eval splits for a config.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataConfig::Blobs(b) => Ok((
            gen_blobs(&b.generator(b.n_per_class_train), Split::Train, cfg.seed)?,
            gen_blobs(&b.generator(b.n_per_class_eval), Split::Eval, cfg.seed)?,
        )),
        DataConfig::Spirals(s) => Ok((
            gen_spirals(&s.generator(s.n_per_class_train), Split::Train, cfg.seed)?,
            gen_spirals(&s.generator(s.n_per_class_eval), Split::Eval, cfg.seed)?,
        )),
        DataConfig::Idx(i) => {
            let read = |img: &Path, lbl: &Path, split| parse_idx(&fs::read(img)?, &fs::read(lbl)?, split);
            let mut train = read(&i.train_images, &i.train_labels, Split::Train)?;
            let mut eval = read(&i.eval_images, &i.eval_labels, Split::Eval)?;
            let classes = train.num_classes.max(eval.num_classes).max(cfg.model.num_classes);
            train.num_classes = classes;
            eval.num_classes = classes;
            if i.normalize {
                let scaler = FeatureScaler::fit(&train)?;
                train = scaler.apply(&train)?;
                eval = scaler.apply(&eval)?;
            }
            if train.input_dim() != cfg.model.input_dim || classes != cfg.model.num_classes {
                return Err(LabError::Config(format!(
                    "IDX data has {} features and {classes} classes; model expects {} and {}",
                    train.input_dim(),
                    cfg.model.input_dim,
                    cfg.model.num_classes
                )));
            }
            Ok((train, eval))
        }
    }
}

/// The fixed held-out diagnostics batch: a seeded subset of the eval split.
pub fn diagnostics_probe(eval: &Dataset, size: usize, seed: u64) -> Dataset {
    let mut idx = RngState::new(seed).derive("diagnostics/probe").permutation(eval.len());
    idx.truncate(size.min(eval.len()));
    eval.subset(&idx)
}

/// Training rows used for the empirical Fisher: the first `n` of a seeded
/// shuffle.
pub fn fisher_sample(train: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > train.len() {
        return Err(LabError::Input(format!("{n} Fisher samples requested from {} training rows", train.len())));
    }
    let mut idx = RngState::new(seed).derive("pruning/fisher-sample").permutation(train.len());
    idx.truncate(n);
    Ok(train.subset(&idx))
}

pub fn mask_label(method: PruneMethod, sparsity: f64) -> String {
    format!("{method}@{sparsity}")
}

fn checkpoint_name(kind: &str, method: PruneMethod, mode: UpdateMode, sparsity: f64) -> String {
    format!("{kind}-{method}-{mode}-k{sparsity}.rflw")
}

/// Runs `stage` and everything before it. Reports are written even when the
/// run fails part-way, alongside a `FAILED` marker holding the error.
pub fn run_stage(cfg: &ExperimentConfig, stage: Stage, baseline: Option<Model>) -> Result<RunArtifacts> {
    let mut run = Run::new(cfg, stage)?;
    let outcome = run.execute(baseline);
    let written = run.write_reports();
    match outcome.and(written) {
        Ok(()) => Ok(run.artifacts),
        Err(e) => {
            let _ = write_text(&run.artifacts.out_dir.join(FAILURE_MARKER), &format!("{e}\n"));
            Err(e)
        }
    }
}

/// The full pipeline: train, prune grid, diagnostics, REFLOW, ablations.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    run_stage(cfg, Stage::Experiment, None)
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    stage: Stage,
    artifacts: RunArtifacts,
    history: Vec<HistoryCsvRow>,
    metrics: Vec<MetricsRow>,
    variance: Vec<VarianceCsvRow>,
    predictions: Vec<PredictionCsvRow>,
    hamming: Vec<HammingCsvRow>,
    sweeps: Vec<SweepCsvRow>,
    ablations: Vec<AblationCsvRow>,
}

/// Context columns shared by several reports.
struct Cell {
    method: String,
    update_mode: String,
    reflow: bool,
    sparsity: f64,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a ExperimentConfig, stage: Stage) -> Result<Self> {
        let out = cfg.output_dir.clone();
        fs::create_dir_all(out.join("checkpoints"))?;
        let _ = fs::remove_file(out.join(FAILURE_MARKER));
        let millis = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis());
        let snapshot = out.join(CONFIG_SNAPSHOT);
        write_text(&snapshot, &cfg.to_json())?;
        Ok(Self {
            cfg,
            stage,
            artifacts: RunArtifacts {
                run_id: format!("{millis}-s{}", cfg.seed),
                baseline_checkpoint: out.join("checkpoints").join("baseline.rflw"),
                out_dir: out,
                pruned_checkpoints: Vec::new(),
                reflowed_checkpoints: Vec::new(),
                reports: Vec::new(),
                config_snapshot: snapshot,
            },
            history: Vec::new(),
            metrics: Vec::new(),
            variance: Vec::new(),
            predictions: Vec::new(),
            hamming: Vec::new(),
            sweeps: Vec::new(),
            ablations: Vec::new(),
        })
    }

    fn execute(&mut self, baseline: Option<Model>) -> Result<()> {
        let cfg = self.cfg;
        let (train_set, eval) = load_data(cfg)?;
        let start = Instant::now();
        let base = match baseline {
            Some(m) => m,
            None => {
                let init = Model::init(&cfg.model, &RngState::new(cfg.seed))?;
                let (m, history) = train(&init, &train_set, &cfg.train.with_seed(cfg.seed))?;
                self.history = history
                    .iter()
                    .map(|h| HistoryCsvRow {
                        epoch: h.epoch,
                        loss: h.loss,
                        accuracy_pct: h.accuracy_pct,
                    })
                    .collect();
                m
            }
        };
        save_checkpoint(&base, &self.artifacts.baseline_checkpoint)?;
        let probe = diagnostics_probe(&eval, cfg.diagnostics.probe_size, cfg.seed);
        let base_cell = Cell {
            method: BASELINE.into(),
            update_mode: NO_UPDATE.into(),
            reflow: false,
            sparsity: 0.0,
        };
        self.record_model(&base_cell, &base, &base, &eval, &probe, start.elapsed().as_millis())?;
        if self.stage == Stage::Train {
            return Ok(());
        }

        let fisher = if cfg.needs_fisher() {
            let sample = fisher_sample(&train_set, cfg.prune.fisher.n_samples, cfg.seed)?;
            let blocks: Vec<usize> = (0..base.block_count()).collect();
            Some(estimate_fisher(
                &base,
                &sample,
                cfg.prune.fisher.n_samples,
                cfg.prune.fisher.damping_rel,
                &blocks,
            )?)
        } else {
            None
        };
        let rng = RngState::new(cfg.seed);
        let calib = cfg.reflow.spec(cfg.seed);
        for &sparsity in &cfg.prune.sparsities {
            let mut masks: Vec<(PruneMethod, PruneMask)> = Vec::new();
            for &method in &cfg.prune.methods {
                for &mode in &cfg.prune.update_modes {
                    let (pruned, report) = prune_pipeline(
                        &base,
                        method,
                        sparsity,
                        mode,
                        &train_set,
                        &eval,
                        &cfg.prune.fisher,
                        fisher.as_ref(),
                        &rng,
                    )?;
                    let path = self.checkpoint(&checkpoint_name("pruned", method, mode, sparsity), &pruned)?;
                    self.artifacts.pruned_checkpoints.push(path);
                    let cell = Cell {
                        method: method.to_string(),
                        update_mode: mode.to_string(),
                        reflow: false,
                        sparsity,
                    };
                    self.record_model(&cell, &base, &pruned, &eval, &probe, report.wall_ms)?;
                    if !masks.iter().any(|(m, _)| *m == method) {
                        masks.push((method, report.mask.clone()));
                    }
                    if self.stage >= Stage::Reflow && cfg.reflow.enabled {
                        self.reflow_cell(cell, &base, &pruned, &report.mask, &train_set, &eval, &probe, &calib)?;
                    }
                }
            }
            if self.stage >= Stage::Diagnose {
                self.record_hamming(sparsity, &masks)?;
            }
        }

        if self.stage >= Stage::Experiment && cfg.reflow.enabled {
            self.run_ablations(&base, &train_set, &eval, fisher.as_ref(), &rng)?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn reflow_cell(
        &mut self,
        mut cell: Cell,
        base: &Model,
        pruned: &Model,
        mask: &PruneMask,
        train_set: &Dataset,
        eval: &Dataset,
        probe: &Dataset,
        calib: &CalibrationSpec,
    ) -> Result<()> {
        let start = Instant::now();
        // Nothing pruned means nothing to recalibrate: the BN statistics
        // already describe this network.
        let stats = if mask.pruned_count() == 0 {
            None
        } else {
            Some(collect_bn_stats_from(pruned, train_set, calib)?)
        };
        let reflowed = match &stats {
            Some(s) => apply_reflow(pruned, s, None)?,
            None => pruned.clone(),
        };
        let wall = start.elapsed().as_millis();
        let method: PruneMethod = parse_label(&cell.method)?;
        let mode: UpdateMode = parse_label(&cell.update_mode)?;
        let path = self.checkpoint(&checkpoint_name("reflowed", method, mode, cell.sparsity), &reflowed)?;
        self.artifacts.reflowed_checkpoints.push(path);
        cell.reflow = true;
        self.record_model(&cell, base, &reflowed, eval, probe, wall)?;

        if let Some(stats) = stats.filter(|_| self.cfg.reflow.sweep_sparsities.contains(&cell.sparsity)) {
            for &direction in &self.cfg.reflow.sweep_directions {
                for p in layerwise_recalibration_sweep(pruned, &stats, eval, direction)? {
                    self.sweeps.push(SweepCsvRow {
                        method: cell.method.clone(),
                        update_mode: cell.update_mode.clone(),
                        sparsity: cell.sparsity,
                        step_k: p.step_k,
                        layer_index: p.layer_index,
                        direction: direction.to_string(),
                        cumulative_accuracy_pct: p.cumulative_accuracy_pct,
                    });
                }
            }
        }
        Ok(())
    }

    fn run_ablations(
        &mut self,
        base: &Model,
        train_set: &Dataset,
        eval: &Dataset,
        fisher: Option<&FisherEstimate>,
        rng: &RngState,
    ) -> Result<()> {
        let cfg = self.cfg;
        let sparsity = cfg.ablations.sparsity;
        let (pruned, _) = prune_pipeline(
            base,
            PruneMethod::Magnitude,
            sparsity,
            UpdateMode::SelectionOnly,
            train_set,
            eval,
            &cfg.prune.fisher,
            fisher,
            rng,
        )?;
        let base_spec = cfg.reflow.spec(cfg.seed);
        let counts = cfg.ablations.batch_counts.iter().map(|&n| ("batch_count", CalibrationSpec { batch_count: n, ..base_spec.clone() }));
        let sizes = cfg.ablations.batch_sizes.iter().map(|&b| ("batch_size", CalibrationSpec { batch_size: b, ..base_spec.clone() }));
        for (varied, spec) in counts.chain(sizes).collect::<Vec<_>>() {
            let stats = collect_bn_stats_from(&pruned, train_set, &spec)?;
            self.ablations.push(AblationCsvRow {
                sparsity,
                varied: varied.into(),
                batch_count: spec.batch_count,
                batch_size: spec.batch_size,
                accuracy_pct: accuracy(&apply_reflow(&pruned, &stats, None)?, eval)?,
            });
        }
        Ok(())
    }

    fn record_model(
        &mut self,
        cell: &Cell,
        base: &Model,
        model: &Model,
        eval: &Dataset,
        probe: &Dataset,
        wall_ms: u128,
    ) -> Result<()> {
        let report = variance_ratio_report(base, model, &probe.features)?;
        let hist = prediction_histogram(model, eval)?;
        let final_ratio = report.final_ratio().unwrap_or(f64::NAN);
        if !final_ratio.is_finite() {
            return Err(LabError::Numeric(format!(
                "{} {} k={}: final variance ratio is {final_ratio}",
                cell.method, cell.update_mode, cell.sparsity
            )));
        }
        self.metrics.push(MetricsRow {
            run_id: self.artifacts.run_id.clone(),
            method: cell.method.clone(),
            update_mode: cell.update_mode.clone(),
            reflow: cell.reflow,
            sparsity: cell.sparsity,
            accuracy_pct: accuracy(model, eval)?,
            modal_fraction: hist.modal_fraction,
            final_variance_ratio: final_ratio,
            wall_ms,
        });
        if self.stage >= Stage::Diagnose {
            self.push_variance(cell, &report);
            for (c, &count) in hist.counts.iter().enumerate() {
                self.predictions.push(PredictionCsvRow {
                    method: cell.method.clone(),
                    update_mode: cell.update_mode.clone(),
                    reflow: cell.reflow,
                    sparsity: cell.sparsity,
                    class_index: c,
                    count,
                    fraction: hist.fraction(c),
                });
            }
        }
        Ok(())
    }

    fn push_variance(&mut self, cell: &Cell, report: &VarianceReport) {
        for r in &report.rows {
            self.variance.push(VarianceCsvRow {
                method: cell.method.clone(),
                update_mode: cell.update_mode.clone(),
                reflow: cell.reflow,
                sparsity: cell.sparsity,
                layer_index: r.layer_index,
                mean_orig: r.mean_orig,
                var_orig: r.var_orig,
                mean_pruned: r.mean_pruned,
                var_pruned: r.var_pruned,
                ratio: r.ratio,
                eta: r.eta,
            });
        }
    }

    fn record_hamming(&mut self, sparsity: f64, masks: &[(PruneMethod, PruneMask)]) -> Result<()> {
        for (i, (ma, a)) in masks.iter().enumerate() {
            for (mb, b) in &masks[i + 1..] {
                let h = normalized_hamming(a, b)?;
                self.hamming.push(HammingCsvRow {
                    mask_a: mask_label(*ma, sparsity),
                    mask_b: mask_label(*mb, sparsity),
                    raw: h.raw,
                    normalized: h.normalized,
                });
            }
        }
        Ok(())
    }

    fn checkpoint(&self, name: &str, model: &Model) -> Result<PathBuf> {
        let path = self.artifacts.out_dir.join("checkpoints").join(name);
        save_checkpoint(model, &path)?;
        Ok(path)
    }

    fn write_reports(&mut self) -> Result<()> {
        let out = self.artifacts.out_dir.clone();
        let mut written = Vec::new();
        let mut emit = |name: &str, ok: bool, f: &dyn Fn(&Path) -> std::io::Result<()>| -> Result<()> {
            if ok {
                let p = out.join(name);
                f(&p)?;
                written.push(p);
            }
            Ok(())
        };
        let stage = self.stage;
        let sweep_on = stage >= Stage::Reflow && self.cfg.reflow.enabled;
        emit(HISTORY_CSV, true, &|p| write_csv(p, HISTORY_HEADER, &self.history))?;
        emit(METRICS_CSV, true, &|p| write_csv(p, METRICS_HEADER, &self.metrics))?;
        emit(VARIANCE_CSV, stage >= Stage::Diagnose, &|p| write_csv(p, VARIANCE_HEADER, &self.variance))?;
        emit(PREDICTIONS_CSV, stage >= Stage::Diagnose, &|p| write_csv(p, PREDICTIONS_HEADER, &self.predictions))?;
        emit(HAMMING_CSV, stage >= Stage::Diagnose, &|p| write_csv(p, HAMMING_HEADER, &self.hamming))?;
        emit(SWEEP_CSV, sweep_on, &|p| write_csv(p, SWEEP_HEADER, &self.sweeps))?;
        emit(ABLATION_CSV, sweep_on && stage >= Stage::Experiment, &|p| {
            write_csv(p, ABLATION_HEADER, &self.ablations)
        })?;
        self.artifacts.reports = written;
        Ok(())
    }
}

fn parse_label<T: serde::de::DeserializeOwned>(label: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(label.to_owned()))
        .map_err(|e| LabError::Input(format!("unknown label {label}: {e}")))
}

/// Loads a baseline checkpoint for stages that skip training.
pub fn load_baseline(path: &Path) -> Result<Model> {
    load_checkpoint(path)
}
