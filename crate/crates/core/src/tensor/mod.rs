//! Dense f32 tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted value. Every differentiable
//! operation applied to a tensor that requires gradients records the operation
//! and its inputs on the result, so the graph reachable from a loss forms the
//! [`Tape`] that [`Tensor::backward`] replays in reverse.
//!
//! Backward rules are themselves written with tensor operations. Running them
//! with graph recording enabled ([`Tensor::grad_with_graph`]) yields gradients
//! that can be differentiated again, which is what the gradient penalty needs.

mod backward;
pub mod io;
pub(crate) mod kernels;
mod nn;
mod ops;

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::{Error, Result};

pub use backward::{GradStore, Tape};
pub(crate) use backward::Op;
pub use kernels::ConvAlgo;
pub use nn::{batch_norm, BatchNormMode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use ops::{elementwise, Elementwise};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

impl TensorId {
    fn fresh() -> Self {
        static COUNTER: AtomicU64 = AtomicU64::new(1);
        TensorId(COUNTER.fetch_add(1, Ordering::Relaxed))
    }
}

pub(crate) struct TensorInner {
    id: TensorId,
    shape: Vec<usize>,
    data: Arc<[f32]>,
    op: Option<Op>,
    requires_grad: bool,
}

/// An immutable dense tensor, row-major.
#[derive(Clone)]
pub struct Tensor(Arc<TensorInner>);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static KINK_MONITOR: Cell<Option<u64>> = const { Cell::new(None) };
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with graph recording disabled on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn with_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(true));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

/// Runs `f` while fingerprinting the sign pattern of every ReLU input.
///
/// Finite-difference checks use the fingerprint to detect perturbations that
/// cross a ReLU kink, where the analytic gradient is not comparable.
pub fn with_kink_monitor<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let prev = KINK_MONITOR.with(|k| k.replace(Some(0xcbf2_9ce4_8422_2325)));
    let out = f();
    let fp = KINK_MONITOR.with(|k| k.replace(prev)).unwrap_or(0);
    (out, fp)
}

pub(crate) fn record_kinks(data: &[f32]) {
    KINK_MONITOR.with(|k| {
        if let Some(mut h) = k.get() {
            for chunk in data.chunks(64) {
                let mut bits = 0u64;
                for (i, v) in chunk.iter().enumerate() {
                    if *v > 0.0 {
                        bits |= 1 << i;
                    }
                }
                h ^= bits;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
            k.set(Some(h));
        }
    });
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub(crate) fn build(shape: Vec<usize>, data: Arc<[f32]>, op: Option<Op>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(TensorInner {
            id: TensorId::fresh(),
            shape,
            data,
            op,
            requires_grad,
        }))
    }

    /// Creates a constant tensor; fails when `data` does not fill `shape`.
    pub fn new(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "dimension sizes must be positive, got {shape:?}"
            )));
        }
        if numel(shape) != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor::build(shape.to_vec(), data.into(), None, false))
    }

    /// A leaf that requires gradients (a trainable parameter or gradcheck input).
    pub fn var(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::new(data, shape)?;
        Ok(Tensor::build(t.0.shape.clone(), t.0.data.clone(), None, true))
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::build(Vec::new(), vec![v].into(), None, false)
    }

    pub fn full(shape: &[usize], v: f32) -> Tensor {
        Tensor::build(shape.to_vec(), vec![v; numel(shape)].into(), None, false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub(crate) fn from_parts(data: Vec<f32>, shape: Vec<usize>) -> Tensor {
        Tensor::build(shape, data.into(), None, false)
    }

    pub fn id(&self) -> TensorId {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.0.op.as_ref()
    }

    /// Whether this tensor is a leaf that gradients are accumulated into.
    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Value as a scalar; fails if the tensor holds more than one element.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(Error::shape("item", self.shape(), &[]));
        }
        Ok(self.0.data[0])
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.0.shape.clone(), self.0.data.clone(), None, false)
    }

    /// Same values as a fresh gradient-tracking leaf.
    pub fn detach_var(&self) -> Tensor {
        Tensor::build(self.0.shape.clone(), self.0.data.clone(), None, true)
    }

    pub(crate) fn dim(&self, axis: usize) -> Result<usize> {
        self.0
            .shape
            .get(axis)
            .copied()
            .ok_or(Error::Axis { axis, rank: self.rank() })
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}
