//! Preference-grounded token-level guidance for small sequence-generation
//! policies.
//!
//! A per-token reward `r(s_t, a_t)` in `(0, 1)` is learned from total
//! orderings over `K` sampled sequences (listwise Plackett-Luce likelihood
//! over aggregated sequence evaluations). The learned reward then drives
//! policy training, either as a dense REINFORCE signal with an entropy bonus
//! or as self-normalized per-token weights in a weighted maximum-likelihood
//! objective. [`train::alternate_train`] interleaves the two phases and
//! periodically re-estimates the reward during the first half of training.
//!
//! The crate is `no_std` and only needs `alloc`. Everything is sized for
//! instances small enough that [`oracle`] can enumerate them exhaustively and
//! serve as ground truth for the estimators.
//!
//! Module map:
//!
//! | module        | contents                                                    |
//! |---------------|-------------------------------------------------------------|
//! | [`domain`]    | vocabularies, trajectories, preference groups, records      |
//! | [`models`]    | reward / policy networks, gradient buffers, Adam            |
//! | [`aggregate`] | sum / average / soft-max / soft-min sequence evaluations    |
//! | [`rank`]      | pairwise and listwise preference losses, reward training    |
//! | [`train`]     | REINFORCE + entropy, weighted MLE, alternating loop         |
//! | [`tasks`]     | synthetic preference sources, stepwise metric, KL baseline  |
//! | [`oracle`]    | enumeration-based ground truth and finite differences       |

#![no_std]
// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod aggregate;
pub mod domain;
mod error;
pub mod math;
pub mod models;
pub mod oracle;
pub mod rank;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};

/// Deterministic RNG used for every seeded operation in the crate.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Builds a [`SeededRng`] from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}
