//! Dense row-major tensor, the universal numeric carrier.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![S::ZERO; len] }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "tensor data length {} does not match shape {:?} (needs {})",
                data.len(),
                shape,
                expected
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Interpret as N×C×H×W.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(Error::shape(format!("expected 4-d tensor, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    /// Interpret as C×H×W.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        if self.shape.len() != 3 {
            return Err(Error::shape(format!("expected 3-d tensor, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    /// Fail fast on NaN/Inf; `context` names the producing operation.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.finite() {
                return Err(Error::non_finite(format!(
                    "{context}: element {i} of shape {:?} is {v}",
                    self.shape
                )));
            }
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Tensor<S>) -> bool {
        self.shape == other.shape
    }

    /// View a single item of the leading (batch) axis as a 1×... tensor.
    pub fn batch_item(&self, index: usize) -> Result<Tensor<S>> {
        if self.shape.is_empty() {
            return Err(Error::shape("batch_item on 0-d tensor".to_string()));
        }
        let n = self.shape[0];
        if index >= n {
            return Err(Error::shape(format!("batch index {index} out of {n}")));
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Tensor {
            shape,
            data: self.data[index * stride..(index + 1) * stride].to_vec(),
        })
    }

    /// Stack single-item tensors along the batch axis.
    pub fn stack(items: &[&Tensor<S>]) -> Result<Tensor<S>> {
        let first = items.first().ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let inner = &first.shape[1..];
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            if t.shape[0] != 1 || &t.shape[1..] != inner {
                return Err(Error::shape(format!(
                    "stack expects 1×{inner:?} items, got {:?}",
                    t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = items.len();
        Ok(Tensor { shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn ensure_finite_reports_nan() {
        let t = Tensor::<f32>::from_vec(&[2], vec![1.0, f32::NAN]).unwrap();
        let err = t.ensure_finite("unit").unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn stack_and_batch_item_round_trip() {
        let a = Tensor::<f32>::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap();
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.batch_item(1).unwrap().data(), &[3.0, 4.0]);
    }
}
