use std::sync::Arc;

use crate::error::{GhnError, Result};
use crate::real::Real;

/// Immutable dense tensor value. Cloning is cheap (shared storage).
#[derive(Debug, Clone)]
pub struct TensorData<F: Real> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
}

impl<F: Real> TensorData<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(GhnError::ShapeMismatch {
                context: "TensorData::new",
                message: format!(
                    "shape {:?} implies {} elements, got {}",
                    shape,
                    expected,
                    data.len()
                ),
            });
        }
        Ok(TensorData {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn scalar(v: F) -> Self {
        TensorData {
            shape: vec![],
            data: Arc::new(vec![v]),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        TensorData {
            shape: shape.to_vec(),
            data: Arc::new(vec![F::zero(); len]),
        }
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let len = shape.iter().product();
        TensorData {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; len]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let len = shape.iter().product();
        TensorData {
            shape: shape.to_vec(),
            data: Arc::new((0..len).map(|i| f(i)).collect()),
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
        self.data.len() == 1
    }

    pub fn values(&self) -> &[F] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.data.as_ref().clone()
    }

    /// Reinterpret the same storage under a new shape of equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.len() {
            return Err(GhnError::ShapeMismatch {
                context: "TensorData::reshaped",
                message: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        Ok(TensorData {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Value at a multi-index (test and oracle helper; panics on bad index).
    pub fn at(&self, index: &[usize]) -> F {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &extent)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < extent, "index {ix} out of bounds at axis {i}");
            flat = flat * extent + ix;
        }
        self.data[flat]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, F> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}
