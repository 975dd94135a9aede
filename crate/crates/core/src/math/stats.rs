use super::TensorF;
use crate::error::{shape_err, Result};

/// Per-feature count/mean/sum-of-squared-deviations accumulator.
///
/// Chunks are reduced with a two-pass mean/M2 and folded in with the
/// pairwise (Chan et al.) combination rule, so any partition of the same
/// rows yields the same moments up to rounding.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StreamingStats {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl StreamingStats {
    /// Empty accumulator for `dim` features.
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn m2(&self) -> &[f64] {
        &self.m2
    }

    /// Population variance (`m2 / count`); all zeros when empty.
    pub fn variance(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.dim()];
        }
        let n = self.count as f64;
        self.m2.iter().map(|m| m / n).collect()
    }

    fn adopt_dim(&mut self, width: usize) -> Result<()> {
        if self.count == 0 && self.dim() == 0 {
            *self = Self::new(width);
        }
        if self.dim() != width {
            return Err(shape_err!(
                "stats over {} features fed rows of width {width}",
                self.dim()
            ));
        }
        Ok(())
    }

    /// Folds in a row-major block of `rows.len() / width` samples.
    pub fn push_rows(&mut self, rows: &[f64], width: usize) -> Result<()> {
        if width == 0 || rows.len() % width != 0 {
            return Err(shape_err!("{} values do not form rows of width {width}", rows.len()));
        }
        self.adopt_dim(width)?;
        let n = rows.len() / width;
        if n == 0 {
            return Ok(());
        }
        let mut mean = vec![0.0; width];
        for row in rows.chunks_exact(width) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut m2 = vec![0.0; width];
        for row in rows.chunks_exact(width) {
            for ((s, v), m) in m2.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let chunk = StreamingStats {
            count: n as u64,
            mean,
            m2,
        };
        *self = self.merge(&chunk)?;
        Ok(())
    }

    /// Returns a new accumulator that has also seen `values`.
    ///
    /// `values` is read as rows of width `dim()`: a 2-D tensor is `n x dim`,
    /// a 1-D tensor is a single row. An empty dimensionless accumulator takes
    /// its width from the first input.
    pub fn accumulate(&self, values: &TensorF) -> Result<Self> {
        let width = match values.dims() {
            [w] => *w,
            [_, w] => *w,
            other => return Err(shape_err!("stats input must be 1-D or 2-D, got {other:?}")),
        };
        let mut out = self.clone();
        out.push_rows(values.data(), width)?;
        Ok(out)
    }

    /// Combination of two accumulators, equivalent to one accumulator fed
    /// both input streams.
    pub fn merge(&self, other: &StreamingStats) -> Result<Self> {
        if other.count == 0 && (other.dim() == 0 || other.dim() == self.dim()) {
            return Ok(self.clone());
        }
        if self.count == 0 && (self.dim() == 0 || self.dim() == other.dim()) {
            return Ok(other.clone());
        }
        if self.dim() != other.dim() {
            return Err(shape_err!(
                "cannot merge stats of width {} and {}",
                self.dim(),
                other.dim()
            ));
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let mut mean = Vec::with_capacity(self.dim());
        let mut m2 = Vec::with_capacity(self.dim());
        for i in 0..self.dim() {
            let delta = other.mean[i] - self.mean[i];
            mean.push(self.mean[i] + delta * (nb / n));
            m2.push(self.m2[i] + other.m2[i] + delta * delta * (na * nb / n));
        }
        Ok(Self {
            count: self.count + other.count,
            mean,
            m2,
        })
    }
}

pub fn stats_accumulate(acc: &StreamingStats, values: &TensorF) -> Result<StreamingStats> {
    acc.accumulate(values)
}

pub fn stats_merge(a: &StreamingStats, b: &StreamingStats) -> Result<StreamingStats> {
    a.merge(b)
}
