use alloc::vec;
use alloc::vec::Vec;
use core::ops::{AddAssign, Index};

use super::Parametric;
use crate::math;
use crate::{Error, Result};

/// Additive gradient accumulator mirroring a parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer(Vec<f64>);

impl GradBuffer {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn for_model<M: Parametric + ?Sized>(model: &M) -> Self {
        Self::zeros(model.n_params())
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        Self(v)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|g| *g *= s);
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &GradBuffer) {
        assert_eq!(self.len(), other.len(), "gradient length mismatch");
        for (g, o) in self.0.iter_mut().zip(&other.0) {
            *g += a * o;
        }
    }

    pub fn norm(&self) -> f64 {
        math::sqrt(self.0.iter().map(|g| g * g).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

impl AddAssign<&GradBuffer> for GradBuffer {
    fn add_assign(&mut self, rhs: &GradBuffer) {
        self.axpy(1.0, rhs);
    }
}

impl Index<usize> for GradBuffer {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// A model whose forward traces can be back-propagated given the adjoint of
/// the traced output.
pub trait Backprop: Parametric {
    type Trace;
    /// Adjoint of one traced output (`f64` for scalar heads, one entry per
    /// logit for the policy).
    type Seed;

    fn backprop_into(&self, trace: &Self::Trace, seed: &Self::Seed, grad: &mut GradBuffer);
}

/// A scalar loss expressed through traced model outputs.
///
/// `terms` pairs each forward trace with `∂loss/∂output`; `direct` holds
/// explicit `∂loss/∂param_i` contributions (e.g. regularizers).
pub struct LossGraph<M: Backprop> {
    value: f64,
    terms: Vec<(M::Trace, M::Seed)>,
    direct: Vec<(usize, f64)>,
}

impl<M: Backprop> LossGraph<M> {
    pub fn new(value: f64) -> Self {
        Self {
            value,
            terms: Vec::new(),
            direct: Vec::new(),
        }
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn push(&mut self, trace: M::Trace, seed: M::Seed) {
        self.terms.push((trace, seed));
    }

    pub fn add_direct(&mut self, param: usize, adjoint: f64) {
        self.direct.push((param, adjoint));
    }

    pub fn set_value(&mut self, value: f64) {
        self.value = value;
    }

    /// Appends `other`'s terms. Values are not combined; see
    /// [`LossGraph::set_value`].
    pub fn merge(&mut self, other: LossGraph<M>) {
        self.terms.extend(other.terms);
        self.direct.extend(other.direct);
    }
}

/// Reverse-mode gradient of `graph` with respect to `model`'s parameters.
pub fn backprop_scalar<M: Backprop>(model: &M, graph: &LossGraph<M>) -> Result<GradBuffer> {
    if !graph.value.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let mut grad = GradBuffer::for_model(model);
    for (trace, seed) in &graph.terms {
        model.backprop_into(trace, seed, &mut grad);
    }
    for &(i, a) in &graph.direct {
        grad.0[i] += a;
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    Ok(grad)
}
