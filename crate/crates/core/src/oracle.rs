//! Brute-force ground truth for small instances.
//!
//! Everything here walks the full prefix tree of a policy over a finite
//! vocabulary and horizon. The walk is bounded by an [`EnumerationBudget`]
//! on `|V|^T`.

use alloc::vec;
use alloc::vec::Vec;

use crate::domain::{TokenId, Trajectory, Vocab};
use crate::error::{param_err, shape_err};
use crate::math;
use crate::models::{Backprop, GradBuffer, PolicyModel, RewardModel};
use crate::tasks::PreferenceSource;
use crate::{Error, Result};

/// Cap on `|V|^T` for any enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnumerationBudget {
    pub max_states: u64,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        Self { max_states: 100_000 }
    }
}

impl EnumerationBudget {
    pub fn new(max_states: u64) -> Result<Self> {
        if max_states == 0 {
            return Err(param_err!("enumeration budget must be positive"));
        }
        Ok(Self { max_states })
    }
}

/// Fails with [`Error::BudgetExceeded`] when `vocab_size^depth` exceeds the
/// budget.
pub fn check_budget(vocab_size: usize, depth: usize, budget: EnumerationBudget) -> Result<()> {
    let mut needed: u128 = 1;
    for _ in 0..depth {
        needed = needed.saturating_mul(vocab_size as u128);
    }
    if needed > budget.max_states as u128 {
        return Err(Error::BudgetExceeded {
            needed,
            budget: budget.max_states,
        });
    }
    Ok(())
}

fn check_setup(policy: &PolicyModel, vocab: &Vocab, horizon: usize, budget: EnumerationBudget) -> Result<()> {
    if horizon == 0 {
        return Err(param_err!("horizon must be positive"));
    }
    if policy.vocab_size() != vocab.size() || policy.eos() != vocab.eos() {
        return Err(shape_err!(
            "policy over {} tokens does not match the vocabulary of {}",
            policy.vocab_size(),
            vocab.size()
        ));
    }
    check_budget(vocab.size(), horizon, budget)
}

fn ends_at(vocab: &Vocab, seq: &[TokenId], horizon: usize) -> bool {
    seq.len() >= horizon || seq.last().copied() == vocab.eos() && vocab.eos().is_some()
}

fn visit_sequences(
    vocab: &Vocab,
    horizon: usize,
    seq: &mut Vec<TokenId>,
    f: &mut dyn FnMut(&[TokenId]) -> Result<()>,
) -> Result<()> {
    for a in 0..vocab.size() {
        seq.push(a);
        if ends_at(vocab, seq, horizon) {
            f(seq)?;
        } else {
            visit_sequences(vocab, horizon, seq, f)?;
        }
        seq.pop();
    }
    Ok(())
}

/// Every complete sequence up to `horizon` tokens in lexicographic order.
/// With an eos token, sequences end at their first eos.
pub fn enumerate_sequences(vocab: &Vocab, horizon: usize, budget: EnumerationBudget) -> Result<Vec<Vec<TokenId>>> {
    if horizon == 0 {
        return Err(param_err!("horizon must be positive"));
    }
    check_budget(vocab.size(), horizon, budget)?;
    let mut out = Vec::new();
    visit_sequences(vocab, horizon, &mut Vec::new(), &mut |s| {
        out.push(s.to_vec());
        Ok(())
    })?;
    Ok(out)
}

/// `P_θ(tokens | input)` as the product of per-step probabilities.
pub fn sequence_probability(policy: &PolicyModel, input_id: usize, tokens: &[TokenId]) -> Result<f64> {
    let mut p = 1.0;
    for t in 0..tokens.len() {
        p *= policy.probs(input_id, &tokens[..t])?[tokens[t]];
    }
    Ok(p)
}

/// `Σ_a π(a|s) · (terminal ? leaf(s·a) : V(s·a))`.
fn tree_value(
    policy: &PolicyModel,
    vocab: &Vocab,
    input_id: usize,
    horizon: usize,
    seq: &mut Vec<TokenId>,
    leaf: &mut dyn FnMut(&[TokenId]) -> Result<f64>,
) -> Result<f64> {
    let probs = policy.probs(input_id, seq)?;
    let mut v = 0.0;
    for (a, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        seq.push(a);
        let next = if ends_at(vocab, seq, horizon) {
            leaf(seq)?
        } else {
            tree_value(policy, vocab, input_id, horizon, seq, leaf)?
        };
        seq.pop();
        v += p * next;
    }
    Ok(v)
}

fn context_value(
    policy: &PolicyModel,
    task: &dyn PreferenceSource,
    vocab: &Vocab,
    (input_id, target): (usize, Option<usize>),
    prefix: &[TokenId],
    horizon: usize,
) -> Result<f64> {
    let mut seq = prefix.to_vec();
    let mut leaf = |s: &[TokenId]| task.score(&Trajectory::new(input_id, s.to_vec()), target);
    tree_value(policy, vocab, input_id, horizon, &mut seq, &mut leaf)
}

/// `Σ_τ P_θ(τ) · score(τ)`, averaged uniformly over the task's contexts.
pub fn exact_expected_metric(
    policy: &PolicyModel,
    task: &dyn PreferenceSource,
    vocab: &Vocab,
    horizon: usize,
    budget: EnumerationBudget,
) -> Result<f64> {
    check_setup(policy, vocab, horizon, budget)?;
    let contexts = task.contexts();
    let mut total = 0.0;
    for &ctx in &contexts {
        total += context_value(policy, task, vocab, ctx, &[], horizon)?;
    }
    Ok(total / contexts.len() as f64)
}

/// Expected score of the completions of `prefix`.
#[allow(clippy::too_many_arguments)]
pub fn exact_conditional_metric(
    policy: &PolicyModel,
    task: &dyn PreferenceSource,
    input_id: usize,
    target: Option<usize>,
    prefix: &[TokenId],
    vocab: &Vocab,
    horizon: usize,
    budget: EnumerationBudget,
) -> Result<f64> {
    check_setup(policy, vocab, 1, budget)?;
    if prefix.len() > horizon {
        return Err(shape_err!("prefix of length {} exceeds horizon {horizon}", prefix.len()));
    }
    crate::domain::validate_tokens(prefix, vocab).or_else(|e| if prefix.is_empty() { Ok(()) } else { Err(e) })?;
    if !prefix.is_empty() && ends_at(vocab, prefix, horizon) {
        return task.score(&Trajectory::new(input_id, prefix.to_vec()), target);
    }
    check_budget(vocab.size(), horizon - prefix.len(), budget)?;
    context_value(policy, task, vocab, (input_id, target), prefix, horizon)
}

/// Best achievable score: the per-context maximum over all sequences,
/// averaged over contexts.
pub fn optimal_expected_metric(
    task: &dyn PreferenceSource,
    vocab: &Vocab,
    horizon: usize,
    budget: EnumerationBudget,
) -> Result<f64> {
    if horizon == 0 {
        return Err(param_err!("horizon must be positive"));
    }
    check_budget(vocab.size(), horizon, budget)?;
    let contexts = task.contexts();
    let mut total = 0.0;
    for &(input_id, target) in &contexts {
        let mut best = f64::NEG_INFINITY;
        visit_sequences(vocab, horizon, &mut Vec::new(), &mut |s| {
            best = best.max(task.score(&Trajectory::new(input_id, s.to_vec()), target)?);
            Ok(())
        })?;
        total += best;
    }
    Ok(total / contexts.len() as f64)
}

/// What the enumerated policy objective rewards.
#[derive(Clone, Copy)]
pub enum Guidance<'a> {
    /// Expected per-step reward averaged over the steps of each trajectory,
    /// with the state distribution held fixed (the token-level estimator's
    /// objective).
    Reward { model: &'a RewardModel, input_id: usize },
    /// Expected sequence score, differentiated through the full sequence
    /// distribution.
    Task(&'a dyn PreferenceSource),
}

struct StateRecord {
    prefix: Vec<TokenId>,
    /// Probability of reaching the state.
    reach: f64,
    /// `E[1/T_τ | state]` over completions.
    inv_len: f64,
    /// Action values (task guidance only).
    q: Vec<f64>,
}

struct Walker<'a> {
    policy: &'a PolicyModel,
    vocab: &'a Vocab,
    horizon: usize,
    input_id: usize,
    leaf: Option<(&'a dyn PreferenceSource, Option<usize>)>,
    states: Vec<StateRecord>,
}

impl Walker<'_> {
    /// Returns `(E[1/T | s], V(s))` and records every non-terminal state.
    fn walk(&mut self, seq: &mut Vec<TokenId>, reach: f64) -> Result<(f64, f64)> {
        let probs = self.policy.probs(self.input_id, seq)?;
        let mut inv_len = 0.0;
        let mut value = 0.0;
        let mut q = vec![0.0; probs.len()];
        for (a, &p) in probs.iter().enumerate() {
            seq.push(a);
            let (m, v) = if ends_at(self.vocab, seq, self.horizon) {
                let v = match self.leaf {
                    Some((task, target)) => task.score(&Trajectory::new(self.input_id, seq.clone()), target)?,
                    None => 0.0,
                };
                (1.0 / seq.len() as f64, v)
            } else if p == 0.0 {
                // Unreachable subtree: its value still enters the gradient
                // through q, so walk it with zero reach.
                self.walk(seq, 0.0)?
            } else {
                self.walk(seq, reach * p)?
            };
            seq.pop();
            inv_len += p * m;
            value += p * v;
            q[a] = v;
        }
        self.states.push(StateRecord {
            prefix: seq.clone(),
            reach,
            inv_len,
            q,
        });
        Ok((inv_len, value))
    }
}

/// `diag(p) - p pᵀ`, the Jacobian of softmax with respect to its logits.
fn softmax_jacobian(p: &[f64]) -> Vec<Vec<f64>> {
    (0..p.len())
        .map(|i| {
            (0..p.len())
                .map(|j| if i == j { p[i] - p[i] * p[j] } else { -p[i] * p[j] })
                .collect()
        })
        .collect()
}

/// Pulls `∂J/∂p` back to `∂J/∂logits` through the explicit Jacobian.
fn pull_back(jac: &[Vec<f64>], dp: &[f64]) -> Vec<f64> {
    (0..dp.len())
        .map(|j| (0..dp.len()).map(|i| jac[i][j] * dp[i]).sum())
        .collect()
}

/// `∂H/∂p_a = -(ln p_a + 1)`, with the `p_a = 0` boundary mapped to zero.
fn entropy_dp(p: &[f64]) -> Vec<f64> {
    p.iter()
        .map(|&x| if x > 0.0 { -(math::ln(x) + 1.0) } else { 0.0 })
        .collect()
}

/// Exact gradient of the enumerated policy objective plus `α` times the
/// per-step entropy averaged over each trajectory's steps.
///
/// For [`Guidance::Reward`] the objective is
/// `Σ_τ P(τ) (1/T_τ) Σ_t [Σ_a π(a|s_t) r(s_t, a) + α H(π(·|s_t))]` with
/// `P(τ)` held fixed. For [`Guidance::Task`] it is `Σ_τ P_θ(τ) score(τ)`
/// differentiated through `P_θ`, plus the same entropy term. Ascent
/// direction.
pub fn exact_policy_gradient(
    policy: &PolicyModel,
    guidance: Guidance<'_>,
    alpha: f64,
    vocab: &Vocab,
    horizon: usize,
    budget: EnumerationBudget,
) -> Result<GradBuffer> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(param_err!("alpha must be non-negative, got {alpha}"));
    }
    check_setup(policy, vocab, horizon, budget)?;
    let contexts: Vec<(usize, Option<usize>)> = match guidance {
        Guidance::Reward { input_id, .. } => vec![(input_id, None)],
        Guidance::Task(task) => task.contexts(),
    };
    let weight = 1.0 / contexts.len() as f64;
    let mut grad = GradBuffer::for_model(policy);
    for (input_id, target) in contexts {
        let mut walker = Walker {
            policy,
            vocab,
            horizon,
            input_id,
            leaf: match guidance {
                Guidance::Reward { .. } => None,
                Guidance::Task(task) => Some((task, target)),
            },
            states: Vec::new(),
        };
        walker.walk(&mut Vec::new(), 1.0)?;
        for st in &walker.states {
            let trace = policy.trace(input_id, &st.prefix)?;
            let p = trace.probs();
            let jac = softmax_jacobian(p);
            let state_w = st.reach * st.inv_len;
            let mut dp: Vec<f64> = entropy_dp(p).into_iter().map(|h| alpha * state_w * h).collect();
            match guidance {
                Guidance::Reward { model, .. } => {
                    let r = model.rewards_all_tokens(input_id, &st.prefix)?;
                    for (d, r) in dp.iter_mut().zip(r) {
                        *d += state_w * r;
                    }
                }
                Guidance::Task(_) => {
                    for (d, q) in dp.iter_mut().zip(&st.q) {
                        *d += st.reach * q;
                    }
                }
            }
            let mut dlogits = pull_back(&jac, &dp);
            dlogits.iter_mut().for_each(|d| *d *= weight);
            policy.backprop_into(&trace, &dlogits, &mut grad);
        }
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("oracle gradient"));
    }
    Ok(grad)
}

/// The objective differentiated by [`exact_policy_gradient`] for
/// [`Guidance::Reward`], evaluated at `policy` while the trajectory weights
/// come from `frozen`.
#[allow(clippy::too_many_arguments)]
pub fn frozen_state_objective(
    policy: &PolicyModel,
    frozen: &PolicyModel,
    reward: &RewardModel,
    input_id: usize,
    alpha: f64,
    vocab: &Vocab,
    horizon: usize,
    budget: EnumerationBudget,
) -> Result<f64> {
    check_setup(frozen, vocab, horizon, budget)?;
    let mut total = 0.0;
    let mut err = None;
    visit_sequences(vocab, horizon, &mut Vec::new(), &mut |s| {
        let w = sequence_probability(frozen, input_id, s)?;
        let mut j = 0.0;
        for t in 0..s.len() {
            let p = policy.probs(input_id, &s[..t])?;
            let r = reward.rewards_all_tokens(input_id, &s[..t])?;
            j += math::dot(&p, &r) + alpha * math::entropy(&p);
        }
        total += w * j / s.len() as f64;
        if !total.is_finite() {
            err = Some(Error::NonFinite("objective"));
        }
        Ok(())
    })?;
    match err {
        Some(e) => Err(e),
        None => Ok(total),
    }
}

/// Largest group size accepted by [`enumerate_permutation_probs`].
pub const MAX_PERMUTATION_K: usize = 6;

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

/// Plackett-Luce probability of every ordering of `evals`, in lexicographic
/// order of the orderings. Computed as direct products of normalized
/// weights.
pub fn enumerate_permutation_probs(evals: &[f64]) -> Result<Vec<(Vec<usize>, f64)>> {
    let k = evals.len();
    if k == 0 || k > MAX_PERMUTATION_K {
        return Err(param_err!("permutation enumeration needs 1..={MAX_PERMUTATION_K} items, got {k}"));
    }
    if evals.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("evaluations"));
    }
    let top = evals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = evals.iter().map(|e| math::exp(e - top)).collect();
    Ok(permutations(k)
        .into_iter()
        .map(|perm| {
            let mut p = 1.0;
            for (j, &i) in perm.iter().enumerate() {
                let rest: f64 = perm[j..].iter().map(|&r| w[r]).sum();
                p *= w[i] / rest;
            }
            (perm, p)
        })
        .collect())
}

/// Central-difference gradient `(f(p + h e_i) - f(p - h e_i)) / 2h`.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(mut f: F, params: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(param_err!("step must be positive"));
    }
    let mut p = params.to_vec();
    let mut g = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let x = p[i];
        p[i] = x + h;
        let up = f(&p);
        p[i] = x - h;
        let down = f(&p);
        p[i] = x;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite("finite-difference evaluation"));
        }
        g.push((up - down) / (2.0 * h));
    }
    Ok(g)
}

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Default per-coordinate relative tolerance for gradient checks.
pub const FD_RTOL: f64 = 1e-4;
/// Default absolute floor for gradient checks.
pub const FD_ATOL: f64 = 1e-8;

/// Outcome of a per-coordinate gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradComparison {
    /// Largest `|a - b| / max(|a|, |b|)` among coordinates above the floor.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// First failing coordinate, if any.
    pub first_failure: Option<usize>,
}

impl GradComparison {
    pub fn passed(&self) -> bool {
        self.first_failure.is_none()
    }
}

/// Coordinate `i` passes when `|a_i - b_i| ≤ atol` or
/// `|a_i - b_i| ≤ rtol · max(|a_i|, |b_i|)`.
pub fn compare_gradients(analytic: &[f64], reference: &[f64], rtol: f64, atol: f64) -> Result<GradComparison> {
    if analytic.len() != reference.len() {
        return Err(shape_err!("gradients of length {} and {}", analytic.len(), reference.len()));
    }
    let mut out = GradComparison {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        first_failure: None,
    };
    for (i, (&a, &b)) in analytic.iter().zip(reference).enumerate() {
        let diff = (a - b).abs();
        out.max_abs_err = out.max_abs_err.max(diff);
        if diff <= atol {
            continue;
        }
        let rel = diff / a.abs().max(b.abs());
        out.max_rel_err = out.max_rel_err.max(rel);
        if !(rel <= rtol) && out.first_failure.is_none() {
            out.first_failure = Some(i);
        }
    }
    Ok(out)
}
