//! Dense row-major tensors over a generic scalar.
//!
//! Deliberately minimal: a flat `Vec` plus a shape. Hot loops in the autodiff
//! layer index the flat buffer directly; this type only has to make that safe
//! and convenient.

use crate::scalar::Real;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Dense n-dimensional array stored row-major in a flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    data: Vec<F>,
    shape: Vec<usize>,
}

/// Wire form for (de)serialization: shape plus flat row-major data.
#[derive(Serialize, Deserialize)]
struct TensorRepr<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real + Serialize> Serialize for Tensor<F> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        TensorRepr {
            shape: self.shape.clone(),
            data: self.data.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de, F: Real + Deserialize<'de>> Deserialize<'de> for Tensor<F> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = TensorRepr::<F>::deserialize(deserializer)?;
        let expect: usize = repr.shape.iter().product();
        if repr.data.len() != expect {
            return Err(D::Error::custom(format!(
                "tensor data length {} does not match shape {:?}",
                repr.data.len(),
                repr.shape
            )));
        }
        Ok(Tensor {
            data: repr.data,
            shape: repr.shape,
        })
    }
}

impl<F: Real> Tensor<F> {
    /// Build a tensor from a flat buffer; `data.len()` must equal the product
    /// of `shape`.
    pub fn from_vec(data: Vec<F>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "buffer length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            data,
            shape: shape.to_vec(),
        }
    }

    /// Tensor filled with zeros.
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            data: vec![F::zero(); shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    /// Tensor filled with a constant.
    pub fn full(shape: &[usize], value: F) -> Self {
        Tensor {
            data: vec![value; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    /// Scalar wrapped as a rank-1 tensor of length 1.
    pub fn scalar(value: F) -> Self {
        Tensor {
            data: vec![value],
            shape: vec![1],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// The single element of a rank-1 length-1 tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same buffer under a new shape with identical element count.
    pub fn reshaped(&self, shape: &[usize]) -> Self {
        Tensor::from_vec(self.data.clone(), shape)
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            data: self.data.iter().map(|&x| f(x)).collect(),
            shape: self.shape.clone(),
        }
    }

    /// Largest absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Self) -> F {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(F::zero(), F::max)
    }

    /// Convert every element to `f64` (reporting, persistence).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    /// Build from `f64` values, converting into the target scalar.
    pub fn from_f64_slice(data: &[f64], shape: &[usize]) -> Self {
        Tensor::from_vec(data.iter().map(|&x| F::of(x)).collect(), shape)
    }
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}
