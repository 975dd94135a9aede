//! Dense kernels: a thin GEMM wrapper and Cholesky-based SPD solves.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::TensorF;
use crate::error::{shape_err, LabError, Result};

/// Relative tolerance for the symmetry precondition of SPD solves.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// `c = op(a) * op(b) + beta * c` for row-major storage, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`. A transposed operand is stored in its
/// untransposed layout (`a` as `k x m`, `b` as `n x k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe exactly the buffers whose lengths were
    // asserted above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    n: usize,
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    /// Factorizes a row-major `n x n` matrix. Only the lower triangle is
    /// read; symmetry is the caller's business (see [`spd_solve`]).
    pub fn new(n: usize, a: &[f64]) -> Result<Self> {
        if a.len() != n * n {
            return Err(shape_err!("expected {n}x{n} matrix, got {} values", a.len()));
        }
        let m = DMatrix::from_row_slice(n, n, a);
        let chol = m
            .cholesky()
            .ok_or_else(|| LabError::Numeric("matrix is not positive definite".into()))?;
        Ok(Self { n, chol })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let rhs = DVector::from_column_slice(b);
        self.chol.solve(&rhs).as_slice().to_vec()
    }

    /// Solves for a row-major `n x m` right-hand side.
    pub fn solve_mat(&self, b: &[f64], m: usize) -> Vec<f64> {
        assert_eq!(b.len(), self.n * m);
        let rhs = DMatrix::from_row_slice(self.n, m, b);
        let x = self.chol.solve(&rhs);
        to_row_major(&x)
    }

    /// Row-major inverse.
    pub fn inverse(&self) -> Vec<f64> {
        to_row_major(&self.chol.inverse())
    }

    /// `L^{-1} b` for a row-major `n x m` block, where `A = L L^T`.
    pub fn forward_substitute(&self, b: &[f64], m: usize) -> Vec<f64> {
        assert_eq!(b.len(), self.n * m);
        let mut rhs = DMatrix::from_row_slice(self.n, m, b);
        self.chol.l_dirty().solve_lower_triangular_mut(&mut rhs);
        to_row_major(&rhs)
    }
}

fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Checks symmetry within [`SYMMETRY_TOL`] relative to the largest entry.
pub fn check_symmetric(n: usize, a: &[f64]) -> Result<()> {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let (x, y) = (a[i * n + j], a[j * n + i]);
            if (x - y).abs() > SYMMETRY_TOL * scale {
                return Err(LabError::Numeric(format!(
                    "matrix not symmetric at ({i},{j}): {x} vs {y}"
                )));
            }
        }
    }
    Ok(())
}

/// Solves `A X = B` for symmetric positive definite `A`.
///
/// `B` may be a vector of length `n` or an `n x m` matrix; the result has
/// the same shape as `B`.
pub fn spd_solve(a: &TensorF, b: &TensorF) -> Result<TensorF> {
    if !a.is_square() {
        return Err(shape_err!("spd_solve: A must be square, got {:?}", a.dims()));
    }
    let n = a.dims()[0];
    let m = match b.dims() {
        [len] if *len == n => 1,
        [rows, cols] if *rows == n => *cols,
        other => return Err(shape_err!("spd_solve: B {other:?} incompatible with n = {n}")),
    };
    check_symmetric(n, a.data())?;
    let factor = SpdFactor::new(n, a.data())?;
    let x = if m == 1 && b.dims().len() == 1 {
        factor.solve_vec(b.data())
    } else {
        factor.solve_mat(b.data(), m)
    };
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(LabError::Numeric(format!("spd_solve produced {bad}")));
    }
    Ok(TensorF::from_parts(b.dims().to_vec(), x))
}
