use crate::error::{Error, Result};

/// Dense row-major tensor of double-precision values.
///
/// Scalars are represented as shape `[1]`. Values are immutable once a
/// tensor has been handed to a computation graph; sharing across threads
/// is done through `Arc<Tensor>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidInput(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::InvalidInput(format!(
                "shape {shape:?} implies {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Number of rows when interpreted as a matrix (shape `[r, c]`).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn is_vector(&self) -> bool {
        self.shape.len() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn scalar_roundtrip() {
        let t = Tensor::scalar(2.5);
        assert!(t.is_scalar());
        assert_eq!(t.item(), 2.5);
        assert_eq!(t.shape(), &[1]);
    }
}
