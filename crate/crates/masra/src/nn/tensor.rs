//! Validated dense matrix type used at module boundaries.

use crate::error::{Error, Result};
use ndarray::Array2;

/// Row-major real matrix with at least one row and one column and all
/// entries finite. Rows are sequence positions, columns are feature
/// dimensions throughout the crate.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    data: Array2<f64>,
}

impl Tensor2D {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidArg {
                op: "Tensor2D::new",
                reason: format!("matrix must be non-empty, got {}x{}", data.nrows(), data.ncols()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Tensor2D::new".into()));
        }
        Ok(Self { data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|v| v.len()).unwrap_or(0);
        if rows.iter().any(|v| v.len() != c) {
            return Err(Error::InvalidArg {
                op: "Tensor2D::from_rows",
                reason: "ragged rows".into(),
            });
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let arr = Array2::from_shape_vec((r, c), flat).map_err(|e| Error::InvalidArg {
            op: "Tensor2D::from_rows",
            reason: e.to_string(),
        })?;
        Self::new(arr)
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[(r, c)]
    }

    /// Row as an owned vector.
    pub fn row(&self, r: usize) -> Vec<f64> {
        self.data.row(r).to_vec()
    }
}

impl TryFrom<Array2<f64>> for Tensor2D {
    type Error = Error;
    fn try_from(a: Array2<f64>) -> Result<Self> {
        Tensor2D::new(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_empty() {
        assert!(Tensor2D::new(Array2::zeros((0, 3))).is_err());
        assert!(Tensor2D::new(Array2::zeros((3, 0))).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor2D::new(array![[1.0, f64::NAN]]).is_err());
        assert!(Tensor2D::new(array![[1.0, f64::INFINITY]]).is_err());
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(Tensor2D::from_rows(vec![vec![1.0, 2.0], vec![3.0]]).is_err());
    }
}
