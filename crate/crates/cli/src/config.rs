//! Declarative experiment configuration: one strict JSON document.

use std::fs;
use std::path::{Path, PathBuf};

use collapse_lab::datasets::{BlobsConfig, SpiralsConfig};
use collapse_lab::pruning::{FisherConfig, PruneMethod, UpdateMode};
use collapse_lab::reflow::{CalibrationMode, CalibrationSpec, SweepDirection};
use collapse_lab::training::TrainConfig;
use collapse_lab::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainSection,
    pub prune: PruneSection,
    pub reflow: ReflowSection,
    pub ablations: AblationSection,
    pub diagnostics: DiagnosticsSection,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            model: ModelConfig::default(),
            data: DataConfig::Blobs(BlobsData::default()),
            train: TrainSection::default(),
            prune: PruneSection::default(),
            reflow: ReflowSection::default(),
            ablations: AblationSection::default(),
            diagnostics: DiagnosticsSection::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    Blobs(BlobsData),
    Spirals(SpiralsData),
    Idx(IdxData),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobsData {
    pub n_per_class_train: usize,
    pub n_per_class_eval: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub separation: f64,
    pub noise_sigma: f64,
}

impl Default for BlobsData {
    fn default() -> Self {
        Self {
            n_per_class_train: 500,
            n_per_class_eval: 100,
            num_classes: 10,
            input_dim: 20,
            separation: 6.0,
            noise_sigma: 1.0,
        }
    }
}

impl BlobsData {
    pub fn generator(&self, n_per_class: usize) -> BlobsConfig {
        BlobsConfig {
            n_per_class,
            num_classes: self.num_classes,
            input_dim: self.input_dim,
            separation: self.separation,
            noise_sigma: self.noise_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpiralsData {
    pub n_per_class_train: usize,
    pub n_per_class_eval: usize,
    pub num_classes: usize,
    pub turns: f64,
    pub noise_sigma: f64,
    pub input_dim: usize,
}

impl Default for SpiralsData {
    fn default() -> Self {
        Self {
            n_per_class_train: 500,
            n_per_class_eval: 100,
            num_classes: 3,
            turns: 1.5,
            noise_sigma: 0.05,
            input_dim: 20,
        }
    }
}

impl SpiralsData {
    pub fn generator(&self, n_per_class: usize) -> SpiralsConfig {
        SpiralsConfig {
            n_per_class,
            num_classes: self.num_classes,
            turns: self.turns,
            noise_sigma: self.noise_sigma,
            input_dim: self.input_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxData {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub eval_images: PathBuf,
    pub eval_labels: PathBuf,
    #[serde(default = "yes")]
    pub normalize: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            batch_size: d.batch_size,
        }
    }
}

impl TrainSection {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub methods: Vec<PruneMethod>,
    pub sparsities: Vec<f64>,
    pub update_modes: Vec<UpdateMode>,
    pub fisher: FisherConfig,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self {
            methods: vec![PruneMethod::Random, PruneMethod::Magnitude, PruneMethod::Obd, PruneMethod::Obs],
            sparsities: vec![0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            update_modes: vec![UpdateMode::SelectionOnly, UpdateMode::FisherUpdate],
            fisher: FisherConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReflowSection {
    pub enabled: bool,
    pub batch_count: usize,
    pub batch_size: usize,
    pub mode: CalibrationMode,
    pub sweep_directions: Vec<SweepDirection>,
    /// Sparsities at which layer-wise sweeps are recorded.
    pub sweep_sparsities: Vec<f64>,
}

impl Default for ReflowSection {
    fn default() -> Self {
        let d = CalibrationSpec::default();
        Self {
            enabled: true,
            batch_count: d.batch_count,
            batch_size: d.batch_size,
            mode: d.mode,
            sweep_directions: vec![SweepDirection::Forward, SweepDirection::Backward],
            sweep_sparsities: vec![0.8],
        }
    }
}

impl ReflowSection {
    pub fn spec(&self, seed: u64) -> CalibrationSpec {
        CalibrationSpec {
            batch_count: self.batch_count,
            batch_size: self.batch_size,
            mode: self.mode,
            seed,
        }
    }
}

/// Calibration-size ablations, run on Magnitude selection-only pruning at
/// one sparsity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub sparsity: f64,
    pub batch_counts: Vec<usize>,
    pub batch_sizes: Vec<usize>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            sparsity: 0.8,
            batch_counts: vec![1, 2, 5, 10, 20, 50, 100],
            batch_sizes: vec![16, 32, 64, 128, 256],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    pub probe_size: usize,
    pub collapse_threshold: f64,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            probe_size: 512,
            collapse_threshold: collapse_lab::diagnostics::DEFAULT_COLLAPSE_THRESHOLD,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a JSON document. Syntax and schema errors carry
    /// the line and column reported by the parser.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            CliError::Config(format!("line {}, column {}: {e}", e.line(), e.column()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train
            .with_seed(self.seed)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let (input_dim, classes) = match &self.data {
            DataConfig::Blobs(b) => {
                if b.n_per_class_train == 0 || b.n_per_class_eval == 0 {
                    return bad("data: per-class counts must be positive".into());
                }
                (Some(b.input_dim), Some(b.num_classes))
            }
            DataConfig::Spirals(s) => {
                if s.n_per_class_train == 0 || s.n_per_class_eval == 0 {
                    return bad("data: per-class counts must be positive".into());
                }
                (Some(s.input_dim), Some(s.num_classes))
            }
            DataConfig::Idx(i) => {
                for p in [&i.train_images, &i.train_labels, &i.eval_images, &i.eval_labels] {
                    if !p.is_file() {
                        return bad(format!("data: {} does not exist", p.display()));
                    }
                }
                (None, None)
            }
        };
        if input_dim.is_some_and(|d| d != self.model.input_dim) {
            return bad(format!(
                "data.input_dim {} does not match model.input_dim {}",
                input_dim.unwrap(),
                self.model.input_dim
            ));
        }
        if classes.is_some_and(|c| c != self.model.num_classes) {
            return bad(format!(
                "data.num_classes {} does not match model.num_classes {}",
                classes.unwrap(),
                self.model.num_classes
            ));
        }
        let sparsity_ok = |k: &f64| (0.0..=1.0).contains(k);
        if let Some(k) = self.prune.sparsities.iter().find(|k| !sparsity_ok(k)) {
            return bad(format!("prune.sparsities: {k} is outside [0, 1]"));
        }
        if let Some(k) = self.reflow.sweep_sparsities.iter().find(|k| !sparsity_ok(k)) {
            return bad(format!("reflow.sweep_sparsities: {k} is outside [0, 1]"));
        }
        if !sparsity_ok(&self.ablations.sparsity) {
            return bad(format!("ablations.sparsity: {} is outside [0, 1]", self.ablations.sparsity));
        }
        if self.prune.methods.is_empty() || self.prune.update_modes.is_empty() {
            return bad("prune.methods and prune.update_modes must be non-empty".into());
        }
        if self.prune.fisher.n_samples == 0 || !(self.prune.fisher.damping_rel > 0.0) {
            return bad("prune.fisher: n_samples must be >= 1 and damping_rel > 0".into());
        }
        self.reflow
            .spec(self.seed)
            .validate()
            .map_err(|e| CliError::Config(format!("reflow: {e}")))?;
        if self.ablations.batch_counts.contains(&0) {
            return bad("ablations.batch_counts entries must be >= 1".into());
        }
        if self.ablations.batch_sizes.iter().any(|&b| b < 2) {
            return bad("ablations.batch_sizes entries must be >= 2".into());
        }
        if self.diagnostics.probe_size == 0 || !(self.diagnostics.collapse_threshold > 0.0) {
            return bad("diagnostics: probe_size must be >= 1 and collapse_threshold > 0".into());
        }
        Ok(())
    }

    pub fn needs_fisher(&self) -> bool {
        self.prune.methods.iter().any(|m| m.needs_fisher())
            || self.prune.update_modes.contains(&UpdateMode::FisherUpdate)
    }
}
