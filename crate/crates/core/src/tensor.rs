//! Dense row-major tensor with an optional gradient buffer of the same
//! shape. Invariant: `data.len() == shape.iter().product()` always, and
//! `grad`, when present, has the same length.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch {
                op: "Tensor::from_vec".into(),
                detail: format!("shape {:?} wants {} elements, got {}", shape, n, data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn scalar(v: T) -> Tensor<T> {
        Tensor {
            shape: vec![],
            data: vec![v],
            grad: None,
        }
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

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated zeroed on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        if self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.data.len()]);
        }
        self.grad.as_deref_mut().unwrap()
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let g = self.grad_mut();
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += *di;
        }
    }

    /// Cast every element; drops any gradient buffer.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
            grad: None,
        }
    }
}
