//! Small differentiable reward and policy models.
//!
//! Both models share one architecture ([`Arch`]): token embeddings for the
//! last `window` prefix tokens (zero-padded), a clipped positional embedding,
//! an input-id embedding, one `tanh` hidden layer and a linear head. The
//! reward model additionally embeds the candidate token and squashes a scalar
//! head through the logistic, so `0 < r(s, a) < 1`. The policy head emits one
//! logit per vocabulary entry.
//!
//! Gradients are hand-derived reverse mode: a forward pass returns a trace,
//! and `backward` accumulates `∂loss/∂params` into a [`GradBuffer`] given the
//! upstream adjoint of the model output.

mod grad;
mod net;
mod optim;
mod policy;
mod reward;

pub use grad::{backprop_scalar, Backprop, GradBuffer, LossGraph};
pub use net::{Arch, NetTrace};
pub use optim::{Adam, AdamConfig};
pub use policy::{PolicyModel, PolicyTrace};
pub use reward::{RewardModel, RewardTrace};

/// Access to a model's flat parameter vector.
pub trait Parametric {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    fn n_params(&self) -> usize {
        self.params().len()
    }
}
