//! Dense row-major tensors with reverse-mode automatic differentiation over
//! a dynamically recorded tape. The tape is rebuilt on every forward pass;
//! nothing is compiled or cached across steps.

pub mod gvt;
mod ops;
mod tape;

pub use tape::{backward, set_backward_fault, Gradients, Tape};
pub(crate) use tape::NodeRef;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major tensor. Cloning is cheap (the buffer is shared). A tensor is
/// differentiable iff it carries a tape node; `Tape::watch` creates tracked
/// leaves and every op on a tracked input records a node for the output.
#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    node: Option<NodeRef<T>>,
}

pub(crate) fn dims_product(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from explicit contents. Rank-0 (shape `[]`) holds one
    /// value. Rejects zero-sized dimensions and length mismatches.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let n = dims_product(&shape);
        if n != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} implies {n} elements but {} were provided",
                data.len()
            )));
        }
        Ok(Self::from_data(shape, data))
    }

    /// Internal constructor; callers guarantee the invariants hold.
    pub(crate) fn from_data(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(dims_product(&shape), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    /// All-zeros tensor. Panics on zero-sized dimensions (programmer error).
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive, got {shape:?}"
        );
        Self::from_data(shape.to_vec(), vec![T::zero(); dims_product(shape)])
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive, got {shape:?}"
        );
        Self::from_data(shape.to_vec(), vec![value; dims_product(shape)])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: T) -> Self {
        Self::from_data(vec![], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// The single contained value; errors unless `numel() == 1`.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "item() requires exactly one element, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Value at a multi-index. Panics on a bad index; meant for tests and
    /// small readbacks, not hot loops.
    pub fn get(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let st = strides(&self.shape);
        let mut off = 0;
        for (d, (&i, &s)) in index.iter().zip(&st).enumerate() {
            assert!(i < self.shape[d], "index {index:?} out of bounds for {:?}", self.shape);
            off += i * s;
        }
        self.data[off]
    }

    /// Whether gradients flow to or through this tensor.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, no tape participation.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Element-type conversion (untracked).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_data(
            self.shape.clone(),
            self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn node_ref(&self) -> Option<&NodeRef<T>> {
        self.node.as_ref()
    }

    pub(crate) fn with_node(mut self, node: NodeRef<T>) -> Self {
        self.node = Some(node);
        self
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .field(
                "data",
                &if self.numel() <= 16 {
                    format!("{:?}", &self.data[..])
                } else {
                    format!("[{} values]", self.numel())
                },
            )
            .finish()
    }
}
