//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every op produces a fresh immutable [`Tensor`]. When gradient recording
//! is enabled and an input requires gradients, the output keeps a node with
//! its inputs and the data needed for the backward pass. [`Tensor::backward`]
//! walks that graph once in reverse topological order.

mod backward;
mod gradcheck;
mod ops;

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use backward::Gradients;
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use ops::layer_norm;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) use backward::Op;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording autodiff nodes on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) op: Op<T>,
    pub(crate) inputs: Vec<Tensor<T>>,
}

pub(crate) struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    node: Option<Node<T>>,
}

/// An immutable n-dimensional array, optionally attached to an autodiff graph.
///
/// Cloning is cheap (reference counted).
pub struct Tensor<T: Scalar> {
    inner: Arc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.inner.shape)
            .field("dtype", &T::DTYPE)
            .field("requires_grad", &self.inner.requires_grad);
        if self.numel() <= 16 {
            s.field("data", &self.inner.data);
        }
        s.finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::Contract(format!(
            "tensor extents must be positive, got {shape:?}"
        )));
    }
    let expect: usize = shape.iter().product();
    if expect != len {
        return Err(Error::Contract(format!(
            "shape {shape:?} holds {expect} values but {len} were supplied"
        )));
    }
    Ok(())
}

pub(crate) fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<T: Scalar> Tensor<T> {
    fn make(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        Self {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                node,
            }),
        }
    }

    /// A constant (non-differentiable) tensor.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape, data.len())?;
        check_finite("from_vec", &data)?;
        Ok(Self::make(shape.to_vec(), data, false, None))
    }

    /// A leaf that accumulates gradients, i.e. a trainable parameter.
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape, data.len())?;
        check_finite("parameter", &data)?;
        Ok(Self::make(shape.to_vec(), data, true, None))
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![value; n]).expect("full: valid shape")
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec(&[1], vec![value]).expect("scalar")
    }

    /// `n × n` identity.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self::from_vec(&[n, n], data).expect("eye")
    }

    pub(crate) fn from_op(
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        inputs: &[&Tensor<T>],
    ) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        check_finite(op_name, &data)?;
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = track.then(|| Node {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
        });
        Ok(Self::make(shape, data, track, node))
    }

    /// Unique identity of this tensor value, used to key gradients.
    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub(crate) fn node(&self) -> Option<&Node<T>> {
        self.inner.node.as_ref()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() == 1 {
            Ok(self.inner.data[0])
        } else {
            Err(Error::Contract(format!(
                "item() needs a one-element tensor, got shape {:?}",
                self.shape()
            )))
        }
    }

    /// Same values, no graph, no gradient.
    pub fn detach(&self) -> Self {
        Self::make(self.shape().to_vec(), self.to_vec(), false, None)
    }

    /// Same values as a fresh trainable leaf.
    pub fn to_parameter(&self) -> Self {
        Self::make(self.shape().to_vec(), self.to_vec(), true, None)
    }

    /// Bit-level equality of shape and values.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_f64().map(f64::to_bits) == b.to_f64().map(f64::to_bits))
    }

    /// Converts element type, producing a constant.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::<U>::make(
            self.shape().to_vec(),
            self.data().iter().map(|v| U::lit(v.as_f64())).collect(),
            false,
            None,
        )
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)` element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis < shape.len() {
        Ok(())
    } else {
        Err(Error::Param(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )))
    }
}
