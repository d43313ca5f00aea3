//! Dense N-dimensional arrays in row-major layout (innermost = width).
//!
//! Tensors are immutable once constructed; the element buffer is shared via
//! `Arc`, so clones are cheap and values can move freely across threads.

use std::sync::Arc;

use num_traits::Float;

use crate::error::TensorError;

/// Element type for tensor math. Training runs at `f32`; gradient-check
/// suites instantiate the same ops at `f64`.
pub trait Elem: Float + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static {}

impl Elem for f32 {}
impl Elem for f64 {}

/// Convert a literal into the working element type.
#[inline]
pub fn el<T: Elem>(v: f64) -> T {
    T::from(v).expect("literal representable in element type")
}

/// Dense tensor with shared, immutable storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Elem> Tensor<T> {
    /// Build a tensor from a flat row-major buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(TensorError::ElementCount {
                shape,
                expected: expect,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; n]),
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: Arc::new(vec![v]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// The single element of a scalar (one-element) tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Batch/channel/height/width split of a 4-d shape.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize), TensorError> {
        if self.shape.len() != 4 {
            return Err(TensorError::Rank {
                expected: 4,
                shape: self.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize), TensorError> {
        if self.shape.len() != 3 {
            return Err(TensorError::Rank {
                expected: 3,
                shape: self.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if expect != self.numel() {
            return Err(TensorError::ElementCount {
                shape,
                expected: expect,
                actual: self.numel(),
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// True when the two tensors have identical shape and bit-identical data.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.numel() == other.numel()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64().map(f64::to_bits) == b.to_f64().map(f64::to_bits))
    }
}

impl Tensor<f32> {
    /// Bitwise equality specialized to the training precision.
    pub fn bits_eq_f32(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Stack equally-shaped tensors along a fresh leading batch axis.
pub fn stack<T: Elem>(items: &[Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    let first = items.first().ok_or(TensorError::EmptyStack)?;
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(TensorError::ShapeMismatch {
                context: "stack",
                left: first.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn element_count_checked() {
        let err = Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ElementCount { .. }));
    }

    #[test]
    fn stack_builds_batch_axis() {
        let a = Tensor::from_vec(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 2], vec![5.0f32, 6.0, 7.0, 8.0]).unwrap();
        let s = stack(&[a, b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.data()[4], 5.0);
    }

    #[test]
    fn clones_share_storage() {
        let a = Tensor::from_vec(vec![4], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let b = a.clone();
        assert!(std::ptr::eq(a.data().as_ptr(), b.data().as_ptr()));
    }
}
