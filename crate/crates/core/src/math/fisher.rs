//! Damped empirical Fisher blocks, `H = lambda I + (1/n) G^T G`.
//!
//! A block keeps its per-sample gradient stack `G` (`n x d`). When `d` is
//! small enough the undamped `F = (1/n) G^T G` is materialized and every
//! product goes through a dense Cholesky factor; otherwise products use the
//! Woodbury identity
//!
//! ```text
//! (lambda I + G^T G / n)^{-1} = (1/lambda) [I - G^T (n lambda I + G G^T)^{-1} G]
//! ```
//!
//! which only ever factorizes an `n x n` capacitance matrix.

use std::sync::OnceLock;

use super::linalg::{gemm, SpdFactor};
use super::TensorF;
use crate::error::{shape_err, LabError, Result};

/// Largest block dimension that is materialized densely by default.
pub const DENSE_LIMIT: usize = 1500;

/// Lower bound on the damping term.
pub const MIN_DAMPING: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FisherStorage {
    Dense,
    LowRank,
}

#[derive(Debug, Clone)]
pub struct FisherBlock {
    dim: usize,
    n: usize,
    grads: Vec<f64>,
    dense: Option<Vec<f64>>,
    damping: f64,
    /// Dense: factor of `F + lambda I`. Low-rank: factor of the capacitance.
    factor: OnceLock<SpdFactor>,
}

impl FisherBlock {
    /// Block from `n` gradient rows of width `dim`, damped by
    /// `damping_rel * trace(F) / dim` (floored at [`MIN_DAMPING`]).
    pub fn from_gradients(n: usize, dim: usize, grads: Vec<f64>, damping_rel: f64) -> Result<Self> {
        let storage = if dim <= DENSE_LIMIT {
            FisherStorage::Dense
        } else {
            FisherStorage::LowRank
        };
        Self::from_gradients_with(n, dim, grads, damping_rel, storage)
    }

    pub fn from_gradients_with(
        n: usize,
        dim: usize,
        grads: Vec<f64>,
        damping_rel: f64,
        storage: FisherStorage,
    ) -> Result<Self> {
        if !(damping_rel > 0.0 && damping_rel.is_finite()) {
            return Err(LabError::Precondition(format!(
                "damping_rel must be positive, got {damping_rel}"
            )));
        }
        let trace = if n == 0 {
            0.0
        } else {
            grads.iter().map(|g| g * g).sum::<f64>() / n as f64
        };
        let damping = (damping_rel * trace / dim.max(1) as f64).max(MIN_DAMPING);
        Self::with_damping(n, dim, grads, damping, storage)
    }

    /// Block with an explicit damping `lambda > 0`.
    pub fn with_damping(
        n: usize,
        dim: usize,
        grads: Vec<f64>,
        damping: f64,
        storage: FisherStorage,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(shape_err!("Fisher block needs a positive dimension"));
        }
        if grads.len() != n * dim {
            return Err(shape_err!(
                "gradient stack of {} values is not {n} x {dim}",
                grads.len()
            ));
        }
        if !(damping > 0.0 && damping.is_finite()) {
            return Err(LabError::Precondition(format!("damping must be positive, got {damping}")));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(LabError::Numeric("non-finite gradient entry".into()));
        }
        let dense = match storage {
            FisherStorage::Dense => Some(outer_mean(n, dim, &grads)),
            FisherStorage::LowRank => None,
        };
        Ok(Self {
            dim,
            n,
            grads,
            dense,
            damping,
            factor: OnceLock::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample_count(&self) -> usize {
        self.n
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn gradients(&self) -> &[f64] {
        &self.grads
    }

    pub fn storage(&self) -> FisherStorage {
        if self.dense.is_some() {
            FisherStorage::Dense
        } else {
            FisherStorage::LowRank
        }
    }

    /// Undamped `F = (1/n) sum g g^T`, row-major `d x d`.
    pub fn undamped(&self) -> Vec<f64> {
        match &self.dense {
            Some(f) => f.clone(),
            None => outer_mean(self.n, self.dim, &self.grads),
        }
    }

    /// `F + lambda I`, row-major.
    pub fn damped(&self) -> Vec<f64> {
        let mut h = self.undamped();
        for i in 0..self.dim {
            h[i * self.dim + i] += self.damping;
        }
        h
    }

    /// Diagonal of `F + lambda I`.
    pub fn damped_diagonal(&self) -> Vec<f64> {
        if let Some(f) = &self.dense {
            return (0..self.dim).map(|i| f[i * self.dim + i] + self.damping).collect();
        }
        let mut diag = vec![0.0; self.dim];
        for row in self.grads.chunks_exact(self.dim) {
            for (d, g) in diag.iter_mut().zip(row) {
                *d += g * g;
            }
        }
        let n = self.n.max(1) as f64;
        diag.iter().map(|d| d / n + self.damping).collect()
    }

    /// `(F + lambda I) v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim);
        if let Some(f) = &self.dense {
            let mut out = vec![0.0; self.dim];
            gemm(self.dim, self.dim, 1, f, false, v, false, &mut out, 0.0);
            for (o, x) in out.iter_mut().zip(v) {
                *o += self.damping * x;
            }
            return out;
        }
        let mut out: Vec<f64> = v.iter().map(|x| self.damping * x).collect();
        if self.n > 0 {
            let mut gv = vec![0.0; self.n];
            gemm(self.n, self.dim, 1, &self.grads, false, v, false, &mut gv, 0.0);
            let inv_n = 1.0 / self.n as f64;
            gv.iter_mut().for_each(|x| *x *= inv_n);
            gemm(self.dim, self.n, 1, &self.grads, true, &gv, false, &mut out, 1.0);
        }
        out
    }

    fn factor(&self) -> Result<&SpdFactor> {
        if let Some(f) = self.factor.get() {
            return Ok(f);
        }
        let f = match &self.dense {
            Some(_) => SpdFactor::new(self.dim, &self.damped())?,
            None => {
                let cap = capacitance(self.n, self.dim, &self.grads, self.damping);
                SpdFactor::new(self.n, &cap)?
            }
        };
        Ok(self.factor.get_or_init(|| f))
    }

    /// `(F + lambda I)^{-1} v` through this block's storage.
    pub fn inverse_vector(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(shape_err!(
                "vector of length {} against Fisher block of dim {}",
                v.len(),
                self.dim
            ));
        }
        if self.n == 0 {
            return Ok(v.iter().map(|x| x / self.damping).collect());
        }
        let factor = self.factor()?;
        if self.dense.is_some() {
            return Ok(factor.solve_vec(v));
        }
        Ok(woodbury_apply(self.n, self.dim, &self.grads, self.damping, factor, v))
    }

    /// Diagonal of `(F + lambda I)^{-1}`.
    pub fn inverse_diagonal(&self) -> Result<Vec<f64>> {
        if self.n == 0 {
            return Ok(vec![1.0 / self.damping; self.dim]);
        }
        let factor = self.factor()?;
        if self.dense.is_some() {
            let inv = factor.inverse();
            return Ok((0..self.dim).map(|i| inv[i * self.dim + i]).collect());
        }
        // diag(G^T C^{-1} G) = column norms of L^{-1} G, with C = L L^T.
        let y = factor.forward_substitute(&self.grads, self.dim);
        let mut diag = vec![0.0; self.dim];
        for row in y.chunks_exact(self.dim) {
            for (d, v) in diag.iter_mut().zip(row) {
                *d += v * v;
            }
        }
        Ok(diag.iter().map(|d| (1.0 - d) / self.damping).collect())
    }

    /// Solves `H_KK x = rhs` on the principal sub-block indexed by `keep`.
    pub fn solve_restricted(&self, keep: &[usize], rhs: &[f64]) -> Result<Vec<f64>> {
        if keep.len() != rhs.len() {
            return Err(shape_err!("keep set of {} vs rhs of {}", keep.len(), rhs.len()));
        }
        if keep.is_empty() {
            return Ok(Vec::new());
        }
        if self.n == 0 {
            return Ok(rhs.iter().map(|x| x / self.damping).collect());
        }
        if let Some(f) = &self.dense {
            let k = keep.len();
            let mut sub = vec![0.0; k * k];
            for (a, &i) in keep.iter().enumerate() {
                for (b, &j) in keep.iter().enumerate() {
                    sub[a * k + b] = f[i * self.dim + j];
                }
                sub[a * k + a] += self.damping;
            }
            return Ok(SpdFactor::new(k, &sub)?.solve_vec(rhs));
        }
        let gk = gather_columns(self.n, self.dim, &self.grads, keep);
        let cap = capacitance(self.n, keep.len(), &gk, self.damping);
        let factor = SpdFactor::new(self.n, &cap)?;
        Ok(woodbury_apply(self.n, keep.len(), &gk, self.damping, &factor, rhs))
    }

    /// `H_KP x_P` for disjoint index sets `keep` and `pruned`.
    pub fn cross_apply(&self, keep: &[usize], pruned: &[usize], x_pruned: &[f64]) -> Vec<f64> {
        assert_eq!(pruned.len(), x_pruned.len());
        if let Some(f) = &self.dense {
            return keep
                .iter()
                .map(|&i| {
                    pruned
                        .iter()
                        .zip(x_pruned)
                        .map(|(&j, x)| f[i * self.dim + j] * x)
                        .sum()
                })
                .collect();
        }
        // The damping term has no off-diagonal part.
        if self.n == 0 {
            return vec![0.0; keep.len()];
        }
        let gp = gather_columns(self.n, self.dim, &self.grads, pruned);
        let mut gx = vec![0.0; self.n];
        gemm(self.n, pruned.len(), 1, &gp, false, x_pruned, false, &mut gx, 0.0);
        let inv_n = 1.0 / self.n as f64;
        gx.iter_mut().for_each(|v| *v *= inv_n);
        let gk = gather_columns(self.n, self.dim, &self.grads, keep);
        let mut out = vec![0.0; keep.len()];
        gemm(keep.len(), self.n, 1, &gk, true, &gx, false, &mut out, 0.0);
        out
    }
}

/// `(lambda I + (1/n) G^T G)^{-1} v` for a Fisher block.
pub fn fisher_inverse_vector(block: &FisherBlock, v: &TensorF) -> Result<TensorF> {
    let out = block.inverse_vector(v.data())?;
    Ok(TensorF::from_parts(v.dims().to_vec(), out))
}

fn outer_mean(n: usize, dim: usize, grads: &[f64]) -> Vec<f64> {
    let mut f = vec![0.0; dim * dim];
    if n == 0 {
        return f;
    }
    gemm(dim, n, dim, grads, true, grads, false, &mut f, 0.0);
    let inv_n = 1.0 / n as f64;
    f.iter_mut().for_each(|v| *v *= inv_n);
    // Exact symmetry regardless of kernel summation order.
    for i in 0..dim {
        for j in (i + 1)..dim {
            f[j * dim + i] = f[i * dim + j];
        }
    }
    f
}

/// `n lambda I + G G^T`.
fn capacitance(n: usize, dim: usize, grads: &[f64], damping: f64) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    gemm(n, dim, n, grads, false, grads, true, &mut c, 0.0);
    for i in 0..n {
        for j in (i + 1)..n {
            c[j * n + i] = c[i * n + j];
        }
        c[i * n + i] += n as f64 * damping;
    }
    c
}

fn woodbury_apply(
    n: usize,
    dim: usize,
    grads: &[f64],
    damping: f64,
    cap: &SpdFactor,
    v: &[f64],
) -> Vec<f64> {
    let mut gv = vec![0.0; n];
    gemm(n, dim, 1, grads, false, v, false, &mut gv, 0.0);
    let w = cap.solve_vec(&gv);
    let mut out = v.to_vec();
    // out = v - G^T w
    let neg_w: Vec<f64> = w.iter().map(|x| -x).collect();
    gemm(dim, n, 1, grads, true, &neg_w, false, &mut out, 1.0);
    out.iter_mut().for_each(|x| *x /= damping);
    out
}

fn gather_columns(n: usize, dim: usize, grads: &[f64], cols: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * cols.len());
    for row in grads.chunks_exact(dim).take(n) {
        out.extend(cols.iter().map(|&c| row[c]));
    }
    out
}
