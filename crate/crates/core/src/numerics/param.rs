use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;

use super::tensor::Tensor;
use crate::rng::Rng;
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Identity used by a tape to bind a parameter once per pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution kernels and weight matrices; the only kind the l2 penalty sees.
    Weight,
    Bias,
    /// Batch-normalization scale and shift.
    Norm,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    id: ParamId,
    name: String,
    kind: ParamKind,
    pub tensor: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, kind: ParamKind, tensor: Tensor<T>) -> Self {
        Self {
            id: ParamId::fresh(),
            name: name.into(),
            kind,
            tensor: tensor.with_grad(),
        }
    }

    pub fn zeros(name: impl Into<String>, kind: ParamKind, shape: &[usize]) -> Self {
        Self::new(name, kind, Tensor::zeros(shape))
    }

    pub fn constant(name: impl Into<String>, kind: ParamKind, shape: &[usize], v: f64) -> Self {
        Self::new(name, kind, Tensor::full(shape, T::lit(v)))
    }

    /// Uniform draws on `[-bound, bound]`.
    pub fn uniform(
        name: impl Into<String>,
        kind: ParamKind,
        shape: &[usize],
        bound: f64,
        rng: &mut Rng,
    ) -> Self {
        let t = Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)));
        Self::new(name, kind, t)
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.tensor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensor.is_empty()
    }
}

/// Anything that owns trainable parameters.
pub trait Module<T: Scalar> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.tensor.zero_grad());
    }
}
