use crate::error::{shape_err, LabError, Result};

/// Dense row-major `f64` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorF {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl TensorF {
    /// Builds a tensor, rejecting a length mismatch or non-finite entries.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(shape_err!("dimensions must be positive, got {dims:?}"));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(shape_err!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(LabError::Numeric(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![0.0; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Internal constructor for values produced by the crate's own kernels,
    /// where the length is correct by construction.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when the tensor is viewed as a matrix: the leading
    /// dimension, or 1 for a vector.
    pub fn rows(&self) -> usize {
        if self.dims.len() <= 1 {
            1
        } else {
            self.dims[0]
        }
    }

    /// Trailing width when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.dims.len() {
            0 => 0,
            1 => self.dims[0],
            _ => self.data.len() / self.dims[0],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn is_square(&self) -> bool {
        self.dims.len() == 2 && self.dims[0] == self.dims[1]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.dims.len() != 2 {
            return Err(shape_err!("transpose needs a matrix, got {:?}", self.dims));
        }
        let (r, c) = (self.dims[0], self.dims[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    /// Matrix product; a 1-D right operand is treated as a column vector.
    pub fn matmul(&self, rhs: &TensorF) -> Result<Self> {
        if self.dims.len() != 2 {
            return Err(shape_err!("matmul lhs must be a matrix, got {:?}", self.dims));
        }
        let (m, k) = (self.dims[0], self.dims[1]);
        let (k2, n) = match rhs.dims.len() {
            1 => (rhs.dims[0], 1),
            2 => (rhs.dims[0], rhs.dims[1]),
            _ => return Err(shape_err!("matmul rhs must be 1-D or 2-D")),
        };
        if k != k2 {
            return Err(shape_err!("matmul inner dims {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * n];
        super::linalg::gemm(m, k, n, &self.data, false, &rhs.data, false, &mut out, 0.0);
        let dims = if rhs.dims.len() == 1 { vec![m] } else { vec![m, n] };
        Ok(Self::from_parts(dims, out))
    }

    pub fn sub(&self, rhs: &TensorF) -> Result<Self> {
        if self.dims != rhs.dims {
            return Err(shape_err!("sub: {:?} vs {:?}", self.dims, rhs.dims));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        Ok(Self::from_parts(self.dims.clone(), data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length_and_nan() {
        assert!(matches!(TensorF::new(vec![2, 2], vec![0.0; 3]), Err(LabError::Shape(_))));
        assert!(matches!(
            TensorF::new(vec![2], vec![0.0, f64::NAN]),
            Err(LabError::Numeric(_))
        ));
        assert!(TensorF::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = TensorF::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = TensorF::matrix(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        let v = TensorF::vector(vec![1., 0., -1.]).unwrap();
        assert_eq!(a.matmul(&v).unwrap().data(), &[-2., -2.]);
        assert_eq!(a.transpose().unwrap().dims(), &[3, 2]);
    }
}
