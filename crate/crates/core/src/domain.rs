//! Tokens, trajectories, preference groups and supervised records.
//!
//! All tokens are abstract ids in `[0, vocab.size())`. A state `s_t` is the
//! pair `(input_id, a_<t)`; trajectories store only the generated tokens and
//! derive states on demand through [`Trajectory::prefix`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::shape_err;
use crate::{Error, Result};

pub type TokenId = usize;

/// A finite token vocabulary with an optional end-of-sequence token.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    size: usize,
    eos: Option<TokenId>,
    names: Vec<String>,
}

impl Vocab {
    /// Vocabulary with generated display names (`t0`, `t1`, ..., `<eos>`).
    pub fn new(size: usize, eos: Option<TokenId>) -> Result<Self> {
        let names = (0..size)
            .map(|i| {
                if Some(i) == eos {
                    String::from("<eos>")
                } else {
                    format!("t{i}")
                }
            })
            .collect();
        Self::with_names(size, eos, names)
    }

    pub fn with_names(size: usize, eos: Option<TokenId>, names: Vec<String>) -> Result<Self> {
        if size < 2 {
            return Err(Error::Parameter(format!(
                "vocabulary needs at least 2 tokens, got {size}"
            )));
        }
        if let Some(e) = eos {
            if e >= size {
                return Err(Error::TokenOutOfRange { token: e, size });
            }
        }
        if names.len() != size {
            return Err(shape_err!(
                "{} token names for a vocabulary of size {size}",
                names.len()
            ));
        }
        Ok(Self { size, eos, names })
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn eos(&self) -> Option<TokenId> {
        self.eos
    }

    pub fn name(&self, token: TokenId) -> Option<&str> {
        self.names.get(token).map(String::as_str)
    }

    #[inline]
    pub fn contains(&self, token: TokenId) -> bool {
        token < self.size
    }

    pub fn check_token(&self, token: TokenId) -> Result<()> {
        if self.contains(token) {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                token,
                size: self.size,
            })
        }
    }

    /// Tokens other than the end-of-sequence token.
    pub fn content_tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.size).filter(move |&t| Some(t) != self.eos)
    }
}

/// One generated sequence `a_0..a_{T-1}` for input `x`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trajectory {
    input_id: usize,
    tokens: Vec<TokenId>,
}

impl Trajectory {
    /// Wraps tokens without checking them; see [`validate_trajectory`].
    pub fn new(input_id: usize, tokens: Vec<TokenId>) -> Self {
        Self { input_id, tokens }
    }

    #[inline]
    pub fn input_id(&self) -> usize {
        self.input_id
    }

    #[inline]
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// `T`, the number of generated tokens.
    #[inline]
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The generated part of state `s_t`, i.e. `a_<t`.
    #[inline]
    pub fn prefix(&self, t: usize) -> &[TokenId] {
        &self.tokens[..t]
    }

    /// Iterates `(a_<t, a_t)` for `t = 0..T`.
    pub fn steps(&self) -> impl Iterator<Item = (&[TokenId], TokenId)> + '_ {
        self.tokens
            .iter()
            .enumerate()
            .map(move |(t, &a)| (&self.tokens[..t], a))
    }
}

/// Checks the trajectory invariants against `vocab`: non-empty, every token
/// in range, and end-of-sequence only in final position.
pub fn validate_trajectory(traj: &Trajectory, vocab: &Vocab) -> Result<()> {
    validate_tokens(traj.tokens(), vocab)
}

pub(crate) fn validate_tokens(tokens: &[TokenId], vocab: &Vocab) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    for (i, &tok) in tokens.iter().enumerate() {
        vocab.check_token(tok)?;
        if Some(tok) == vocab.eos() && i + 1 != tokens.len() {
            return Err(Error::InteriorEos(i));
        }
    }
    Ok(())
}

/// `K` trajectories for one input together with a total preference
/// ordering. `ordering[0]` indexes the most preferred trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceGroup {
    input_id: usize,
    target_id: Option<usize>,
    trajectories: Vec<Trajectory>,
    ordering: Vec<usize>,
}

impl PreferenceGroup {
    pub fn new(
        input_id: usize,
        target_id: Option<usize>,
        trajectories: Vec<Trajectory>,
        ordering: Vec<usize>,
    ) -> Result<Self> {
        let k = trajectories.len();
        if k < 2 {
            return Err(Error::GroupTooSmall(k));
        }
        if ordering.len() != k {
            return Err(shape_err!("ordering of length {} for {k} trajectories", ordering.len()));
        }
        if !is_permutation(&ordering) {
            return Err(shape_err!("ordering {ordering:?} is not a permutation of 0..{k}"));
        }
        if let Some(t) = trajectories.iter().find(|t| t.input_id() != input_id) {
            return Err(shape_err!(
                "trajectory for input {} in a group for input {input_id}",
                t.input_id()
            ));
        }
        Ok(Self {
            input_id,
            target_id,
            trajectories,
            ordering,
        })
    }

    #[inline]
    pub fn input_id(&self) -> usize {
        self.input_id
    }

    #[inline]
    pub fn target_id(&self) -> Option<usize> {
        self.target_id
    }

    #[inline]
    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    #[inline]
    pub fn ordering(&self) -> &[usize] {
        &self.ordering
    }

    /// Number of trajectories `K`.
    #[inline]
    pub fn k(&self) -> usize {
        self.trajectories.len()
    }

    /// Trajectories from most to least preferred.
    pub fn ranked(&self) -> impl Iterator<Item = &Trajectory> + '_ {
        self.ordering.iter().map(move |&i| &self.trajectories[i])
    }

    pub fn with_target(mut self, target_id: Option<usize>) -> Self {
        self.target_id = target_id;
        self
    }
}

/// Builds a group ordered by descending `scores`; equal scores keep their
/// generation order.
pub fn make_group(
    input_id: usize,
    trajectories: Vec<Trajectory>,
    scores: &[f64],
) -> Result<PreferenceGroup> {
    if trajectories.len() < 2 {
        return Err(Error::GroupTooSmall(trajectories.len()));
    }
    if scores.len() != trajectories.len() {
        return Err(shape_err!(
            "{} scores for {} trajectories",
            scores.len(),
            trajectories.len()
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("preference scores"));
    }
    PreferenceGroup::new(input_id, None, trajectories, descending_order(scores))
}

/// Indices sorted by descending score, ties by ascending index.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // sort_by is stable, so equal scores keep ascending index order.
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

fn is_permutation(ordering: &[usize]) -> bool {
    let mut seen = alloc::vec![false; ordering.len()];
    for &i in ordering {
        if i >= seen.len() || seen[i] {
            return false;
        }
        seen[i] = true;
    }
    true
}

/// One supervised pair `(x, y)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupervisedRecord {
    input_id: usize,
    target: Vec<TokenId>,
}

impl SupervisedRecord {
    pub fn new(input_id: usize, target: Vec<TokenId>, vocab: &Vocab) -> Result<Self> {
        validate_tokens(&target, vocab)?;
        Ok(Self { input_id, target })
    }

    #[inline]
    pub fn input_id(&self) -> usize {
        self.input_id
    }

    #[inline]
    pub fn target(&self) -> &[TokenId] {
        &self.target
    }

    /// `|y|`.
    #[inline]
    pub fn len(&self) -> usize {
        self.target.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    /// The target viewed as a teacher-forced trajectory.
    pub fn as_trajectory(&self) -> Trajectory {
        Trajectory::new(self.input_id, self.target.clone())
    }
}
