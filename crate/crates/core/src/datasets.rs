//! Synthetic task generators and IDX ingestion.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, LabError, Result};
use crate::math::{RngState, StreamingStats, TensorF};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n x input_dim`.
    pub features: TensorF,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: TensorF, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if features.dims().len() != 2 || features.rows() != labels.len() {
            return Err(input_err!(
                "features {:?} do not match {} labels",
                features.dims(),
                labels.len()
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(input_err!("label {bad} out of range for {num_classes} classes"));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows at `indices` as a batch.
    pub fn gather(&self, indices: &[usize]) -> (TensorF, Vec<usize>) {
        let d = self.input_dim();
        let mut x = Vec::with_capacity(indices.len() * d);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(self.features.row(i));
            y.push(self.labels[i]);
        }
        (TensorF::from_parts(vec![indices.len(), d], x), y)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (features, labels) = self.gather(indices);
        Dataset {
            features,
            labels,
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsConfig {
    pub n_per_class: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub separation: f64,
    pub noise_sigma: f64,
}

const MAX_CENTER_DRAWS: usize = 10_000;

/// Isotropic Gaussian blobs around seeded centers that are pairwise at
/// least `separation * noise_sigma` apart. Centers depend only on `seed`,
/// so both splits share them; the samples come from a split-specific
/// stream.
pub fn gen_blobs(cfg: &BlobsConfig, split: Split, seed: u64) -> Result<Dataset> {
    if cfg.n_per_class == 0 || cfg.num_classes == 0 || cfg.input_dim == 0 {
        return Err(LabError::Config("blob counts must be positive".into()));
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.separation >= 0.0) {
        return Err(LabError::Config("noise_sigma and separation must be >= 0".into()));
    }
    let root = RngState::new(seed);
    let min_dist = cfg.separation * cfg.noise_sigma;
    let half_side = min_dist.max(1.0);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_classes);
    let mut stream = root.derive("blobs/centers");
    let mut draws = 0;
    while centers.len() < cfg.num_classes {
        if draws == MAX_CENTER_DRAWS {
            return Err(LabError::Config(format!(
                "could not place {} centers {min_dist} apart after {MAX_CENTER_DRAWS} draws",
                cfg.num_classes
            )));
        }
        draws += 1;
        let c: Vec<f64> = (0..cfg.input_dim)
            .map(|_| half_side * (2.0 * stream.uniform() - 1.0))
            .collect();
        let far_enough = centers.iter().all(|o| {
            o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= min_dist
        });
        if far_enough {
            centers.push(c);
        }
    }
    let mut points = root.derive(&format!("blobs/{}", split.label()));
    let n = cfg.n_per_class * cfg.num_classes;
    let mut x = Vec::with_capacity(n * cfg.input_dim);
    let mut y = Vec::with_capacity(n);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..cfg.n_per_class {
            x.extend(center.iter().map(|c| c + cfg.noise_sigma * points.normal()));
            y.push(label);
        }
    }
    Dataset::new(TensorF::matrix(n, cfg.input_dim, x)?, y, cfg.num_classes, split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpiralsConfig {
    pub n_per_class: usize,
    pub num_classes: usize,
    pub turns: f64,
    pub noise_sigma: f64,
    pub input_dim: usize,
}

/// Interleaved 2-D spirals, zero-padded to `input_dim`. Arm `c` starts at
/// angle `2 pi c / C`; a point at radius `t` sits at angle
/// `2 pi c / C + 2 pi turns t`, with `t` drawn per split and sorted.
pub fn gen_spirals(cfg: &SpiralsConfig, split: Split, seed: u64) -> Result<Dataset> {
    if cfg.num_classes < 2 || cfg.n_per_class == 0 {
        return Err(LabError::Config("spirals need >= 2 classes and >= 1 point per class".into()));
    }
    if !(cfg.turns > 0.0) || !(cfg.noise_sigma >= 0.0) || cfg.input_dim < 2 {
        return Err(LabError::Config("spirals need turns > 0, noise_sigma >= 0, input_dim >= 2".into()));
    }
    let mut stream = RngState::new(seed).derive(&format!("spirals/{}", split.label()));
    let n = cfg.n_per_class * cfg.num_classes;
    let mut x = Vec::with_capacity(n * cfg.input_dim);
    let mut y = Vec::with_capacity(n);
    for c in 0..cfg.num_classes {
        let mut ts: Vec<f64> = (0..cfg.n_per_class).map(|_| stream.uniform()).collect();
        ts.sort_by(f64::total_cmp);
        let phase = 2.0 * PI * c as f64 / cfg.num_classes as f64;
        for t in ts {
            let angle = phase + 2.0 * PI * cfg.turns * t;
            let mut row = vec![0.0; cfg.input_dim];
            row[0] = t * angle.cos() + cfg.noise_sigma * stream.normal();
            row[1] = t * angle.sin() + cfg.noise_sigma * stream.normal();
            x.extend(row);
            y.push(c);
        }
    }
    Dataset::new(TensorF::matrix(n, cfg.input_dim, x)?, y, cfg.num_classes, split)
}

/// Per-feature standardization fitted on one dataset and applied to others.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaler {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit(data: &Dataset) -> Result<Self> {
        let stats = StreamingStats::new(data.input_dim()).accumulate(&data.features)?;
        let std = stats
            .variance()
            .iter()
            .map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        Ok(Self {
            mean: stats.mean().to_vec(),
            std,
        })
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        let d = data.input_dim();
        if d != self.mean.len() {
            return Err(input_err!("scaler fitted on {} features, data has {d}", self.mean.len()));
        }
        let x: Vec<f64> = data
            .features
            .data()
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s))
            .collect();
        Dataset::new(TensorF::matrix(data.len(), d, x)?, data.labels.clone(), data.num_classes, data.split)
    }
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| LabError::Format(format!("{what}: truncated header")))
}

/// Parses IDX image and label buffers. Pixels are scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8], split: Split) -> Result<Dataset> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES {
        return Err(LabError::Format(format!("images: bad magic {magic:#010x}")));
    }
    let count = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let magic = be_u32(labels, 0, "labels")?;
    if magic != IDX_LABELS {
        return Err(LabError::Format(format!("labels: bad magic {magic:#010x}")));
    }
    let label_count = be_u32(labels, 4, "labels")? as usize;
    if label_count != count {
        return Err(LabError::Format(format!("{count} images but {label_count} labels")));
    }
    let pixels = rows * cols;
    if count == 0 || pixels == 0 {
        return Err(LabError::Format("empty IDX payload".into()));
    }
    let body = &images[16..];
    if body.len() != count * pixels {
        return Err(LabError::Format(format!(
            "images: expected {} payload bytes, found {}",
            count * pixels,
            body.len()
        )));
    }
    let lbl = &labels[8..];
    if lbl.len() != count {
        return Err(LabError::Format(format!(
            "labels: expected {count} payload bytes, found {}",
            lbl.len()
        )));
    }
    let x: Vec<f64> = body.iter().map(|&p| p as f64 / 255.0).collect();
    let y: Vec<usize> = lbl.iter().map(|&l| l as usize).collect();
    let classes = y.iter().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(TensorF::matrix(count, pixels, x)?, y, classes, split)
}

/// Loads an IDX image/label pair. Pixels are divided by 255; with
/// `normalize` each feature is further standardized by this file's own
/// statistics (use [`FeatureScaler`] to carry training statistics over to
/// an eval split instead).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, normalize: bool) -> Result<Dataset> {
    let data = parse_idx(&fs::read(images_path)?, &fs::read(labels_path)?, Split::Train)?;
    if normalize {
        FeatureScaler::fit(&data)?.apply(&data)
    } else {
        Ok(data)
    }
}
