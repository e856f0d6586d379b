//! Dense row-major f64 arrays.
//!
//! `Tensor` is deliberately plain: a shape and a flat buffer. All layout
//! logic (strides, grouping, broadcasting of bias rows) lives in the ops
//! that need it, which keeps this type auditable.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    /// Dimension sizes, outermost first. Scalars use `[1]`.
    pub shape: Vec<usize>,
    /// Row-major contents; invariant: `data.len() == shape.iter().product()`.
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor shape {:?} does not describe a buffer of {} values",
                shape,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds an `[n, 3]` tensor from point or normal rows.
    pub fn from_rows3(rows: &[[f64; 3]]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * 3);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor {
            shape: vec![rows.len(), 3],
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Leading dimension of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() requires rank 2, got {:?}", self.shape);
        self.shape[0]
    }

    /// Trailing dimension of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() requires rank 2, got {:?}", self.shape);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            let bad = self
                .data
                .iter()
                .position(|v| !v.is_finite())
                .unwrap_or_default();
            Err(Error::Numeric(format!(
                "{what}: non-finite value at flat index {bad} of shape {:?}",
                self.shape
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_data_disagreement() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn row_access_is_row_major() {
        let t = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(t.row(1), &[4., 5., 6.]);
        assert_eq!(t.get2(0, 2), 3.0);
    }

    #[test]
    fn ensure_finite_names_the_offender() {
        let t = Tensor::new(vec![3], vec![0.0, f64::NAN, 1.0]).unwrap();
        let err = t.ensure_finite("loss").unwrap_err();
        assert!(err.to_string().contains("flat index 1"));
    }
}
