//! Preference losses and the online reward-learning routine.
//!
//! For a group ordered `τ^{ord(1)} ≻ … ≻ τ^{ord(K)}`, the Plackett-Luce
//! likelihood of the ordering given evaluations `e_k` is
//!
//! ```text
//! P(ord | e) = Π_k exp(e_{ord(k)}) / Σ_{i ≥ k} exp(e_{ord(i)})
//! ```
//!
//! The listwise loss is `-ln P`. With `K = 2` and summed rewards it is the
//! Bradley-Terry pairwise loss.

use alloc::vec;
use alloc::vec::Vec;

use crate::aggregate::{aggregate, mean_length, Aggregation};
use crate::domain::{make_group, PreferenceGroup, Trajectory};
use crate::error::{param_err, shape_err};
use crate::math;
use crate::models::{
    backprop_scalar, Adam, AdamConfig, GradBuffer, LossGraph, Parametric, PolicyModel, RewardModel,
    RewardTrace,
};
use crate::tasks::PreferenceSource;
use crate::{seeded_rng, Error, Result, SeededRng};

/// Log-likelihood of `ordering` under the Plackett-Luce model with
/// utilities `evals`. Always `≤ 0`.
pub fn pl_log_likelihood(evals: &[f64], ordering: &[usize]) -> Result<f64> {
    Ok(pl_log_likelihood_grad(evals, ordering)?.0)
}

/// Log-likelihood and its gradient with respect to `evals`.
pub fn pl_log_likelihood_grad(evals: &[f64], ordering: &[usize]) -> Result<(f64, Vec<f64>)> {
    let k = evals.len();
    if k < 2 {
        return Err(Error::GroupTooSmall(k));
    }
    if ordering.len() != k {
        return Err(shape_err!("ordering of length {} for {k} evaluations", ordering.len()));
    }
    let mut seen = vec![false; k];
    for &i in ordering {
        if i >= k || core::mem::replace(&mut seen[i], true) {
            return Err(shape_err!("ordering {ordering:?} is not a permutation"));
        }
    }
    if evals.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("sequence evaluations"));
    }
    let ranked: Vec<f64> = ordering.iter().map(|&i| evals[i]).collect();
    let mut ll = 0.0;
    let mut grad = vec![0.0; k];
    for stage in 0..k {
        let rest = &ranked[stage..];
        let lse = math::log_sum_exp(rest);
        ll += ranked[stage] - lse;
        grad[ordering[stage]] += 1.0;
        for (off, e) in rest.iter().enumerate() {
            grad[ordering[stage + off]] -= math::exp(e - lse);
        }
    }
    Ok((ll, grad))
}

/// How a trajectory is turned into one sequence evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GuidanceLevel {
    /// Per-token rewards combined by an aggregation function.
    Token(Aggregation),
    /// A single reward read at the final state, scaled by the group's mean
    /// length `C`.
    Sequence,
}

struct GroupEval {
    evals: Vec<f64>,
    /// Per trajectory: traced reward evaluations and `∂e/∂r` for each.
    traces: Vec<Vec<(RewardTrace, f64)>>,
}

fn evaluate_group(reward: &RewardModel, group: &PreferenceGroup, level: GuidanceLevel) -> Result<GroupEval> {
    let c = mean_length(group)?;
    let mut evals = Vec::with_capacity(group.k());
    let mut traces = Vec::with_capacity(group.k());
    for traj in group.trajectories() {
        if traj.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        match level {
            GuidanceLevel::Token(agg) => {
                let steps = reward.trace_trajectory(traj)?;
                let rewards: Vec<f64> = steps.iter().map(RewardTrace::value).collect();
                let agg = aggregate(&rewards, c, agg)?;
                evals.push(agg.value);
                traces.push(steps.into_iter().zip(agg.grad).collect());
            }
            GuidanceLevel::Sequence => {
                let last = traj.len() - 1;
                let tr = reward.trace_step(traj.input_id(), traj.prefix(last), traj.tokens()[last])?;
                evals.push(c * tr.value());
                traces.push(vec![(tr, c)]);
            }
        }
    }
    Ok(GroupEval { evals, traces })
}

/// Sequence evaluations `e(τ^k)` of every trajectory in the group.
pub fn group_evaluations(
    reward: &RewardModel,
    group: &PreferenceGroup,
    level: GuidanceLevel,
) -> Result<Vec<f64>> {
    Ok(evaluate_group(reward, group, level)?.evals)
}

/// Builds the listwise loss as a graph over traced reward evaluations.
pub fn listwise_graph(
    reward: &RewardModel,
    group: &PreferenceGroup,
    level: GuidanceLevel,
) -> Result<LossGraph<RewardModel>> {
    let GroupEval { evals, traces } = evaluate_group(reward, group, level)?;
    let (ll, d_evals) = pl_log_likelihood_grad(&evals, group.ordering())?;
    let mut graph = LossGraph::new(-ll);
    for (steps, de) in traces.into_iter().zip(d_evals) {
        for (trace, de_dr) in steps {
            graph.push(trace, -de * de_dr);
        }
    }
    Ok(graph)
}

/// `-ln P(ord | {e(τ^k)})` and its gradient with respect to the reward
/// parameters.
pub fn listwise_loss(
    reward: &RewardModel,
    group: &PreferenceGroup,
    agg: Aggregation,
) -> Result<(f64, GradBuffer)> {
    listwise_loss_at(reward, group, GuidanceLevel::Token(agg))
}

pub fn listwise_loss_at(
    reward: &RewardModel,
    group: &PreferenceGroup,
    level: GuidanceLevel,
) -> Result<(f64, GradBuffer)> {
    let graph = listwise_graph(reward, group, level)?;
    let grad = backprop_scalar(reward, &graph)?;
    Ok((graph.value(), grad))
}

/// Bradley-Terry loss with `preferred ≻ other` on summed rewards:
/// `-ln σ(Σ r(preferred) - Σ r(other))`.
pub fn pairwise_loss(
    reward: &RewardModel,
    preferred: &Trajectory,
    other: &Trajectory,
) -> Result<(f64, GradBuffer)> {
    let graph = pairwise_graph(reward, preferred, other)?;
    let grad = backprop_scalar(reward, &graph)?;
    Ok((graph.value(), grad))
}

fn pairwise_graph(
    reward: &RewardModel,
    preferred: &Trajectory,
    other: &Trajectory,
) -> Result<LossGraph<RewardModel>> {
    if preferred.is_empty() || other.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let win = reward.trace_trajectory(preferred)?;
    let lose = reward.trace_trajectory(other)?;
    let s_win: f64 = win.iter().map(RewardTrace::value).sum();
    let s_lose: f64 = lose.iter().map(RewardTrace::value).sum();
    let margin = s_lose - s_win;
    let loss = math::softplus(margin);
    let p_lose = math::sigmoid(margin);
    let mut graph = LossGraph::new(loss);
    for tr in win {
        graph.push(tr, -p_lose);
    }
    for tr in lose {
        graph.push(tr, p_lose);
    }
    Ok(graph)
}

/// Bradley-Terry loss summed over every ordered pair in the group.
fn all_pairs_graph(reward: &RewardModel, group: &PreferenceGroup) -> Result<LossGraph<RewardModel>> {
    let ranked: Vec<&Trajectory> = group.ranked().collect();
    let mut total = LossGraph::new(0.0);
    let mut value = 0.0;
    for i in 0..ranked.len() {
        for j in i + 1..ranked.len() {
            let g = pairwise_graph(reward, ranked[i], ranked[j])?;
            value += g.value();
            total.merge(g);
        }
    }
    total.set_value(value);
    Ok(total)
}

/// Fraction of within-group ordered pairs whose evaluations agree with the
/// ordering; ties count one half.
pub fn rank_accuracy(reward: &RewardModel, groups: &[PreferenceGroup], agg: Aggregation) -> Result<f64> {
    rank_accuracy_at(reward, groups, GuidanceLevel::Token(agg))
}

pub fn rank_accuracy_at(
    reward: &RewardModel,
    groups: &[PreferenceGroup],
    level: GuidanceLevel,
) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::Shape("rank accuracy over no groups".into()));
    }
    let mut agree = 0.0;
    let mut pairs = 0usize;
    for g in groups {
        let evals = group_evaluations(reward, g, level)?;
        agree += ordering_agreement(&evals, g.ordering());
        pairs += g.k() * (g.k() - 1) / 2;
    }
    Ok(agree / pairs as f64)
}

/// Number of pairs (with ties as one half) ranked consistently by `evals`.
pub fn ordering_agreement(evals: &[f64], ordering: &[usize]) -> f64 {
    let mut agree = 0.0;
    for i in 0..ordering.len() {
        for j in i + 1..ordering.len() {
            let (a, b) = (evals[ordering[i]], evals[ordering[j]]);
            if a > b {
                agree += 1.0;
            } else if a == b {
                agree += 0.5;
            }
        }
    }
    agree
}

/// Which preference likelihood drives reward training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PreferenceLoss {
    /// Plackett-Luce over the whole ordering.
    #[default]
    Listwise,
    /// Bradley-Terry over every ordered pair (summed rewards).
    Pairwise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardTrainConfig {
    /// Maximum number of optimizer steps `M_rew`.
    pub m_rew: usize,
    /// Sequences per preference group.
    pub k: usize,
    pub level: GuidanceLevel,
    pub loss: PreferenceLoss,
    pub optimizer: AdamConfig,
    /// Held-out evaluations without improvement before stopping; `0` stops
    /// before the first step.
    pub early_stop_patience: usize,
    pub holdout_fraction: f64,
    /// Steps between held-out evaluations.
    pub eval_every: usize,
    /// Groups per optimizer step.
    pub group_batch: usize,
    /// Generation horizon `T_max` for sampled trajectories.
    pub horizon: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            m_rew: 200,
            k: 5,
            level: GuidanceLevel::Token(Aggregation::SoftMax { beta: 2.0 }),
            loss: PreferenceLoss::Listwise,
            optimizer: AdamConfig::default(),
            early_stop_patience: 5,
            holdout_fraction: 0.2,
            eval_every: 10,
            group_batch: 1,
            horizon: 5,
            temperature: 1.0,
            seed: 0,
        }
    }
}

/// Upper bound on held-out groups per training call.
pub const MAX_HOLDOUT_GROUPS: usize = 256;

impl RewardTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::GroupTooSmall(self.k));
        }
        if self.m_rew == 0 {
            return Err(param_err!("m_rew must be at least 1"));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(param_err!(
                "holdout_fraction must lie in (0, 1), got {}",
                self.holdout_fraction
            ));
        }
        if self.eval_every == 0 || self.group_batch == 0 || self.horizon == 0 {
            return Err(param_err!("eval_every, group_batch and horizon must be positive"));
        }
        if let GuidanceLevel::Token(agg) = self.level {
            agg.validate()?;
        }
        Ok(())
    }

    /// Held-out groups generated per training call: the holdout share of all
    /// groups generated, capped at [`MAX_HOLDOUT_GROUPS`].
    pub fn holdout_groups(&self) -> usize {
        let train = (self.m_rew * self.group_batch) as f64;
        let n = libm::ceil(self.holdout_fraction / (1.0 - self.holdout_fraction) * train) as usize;
        n.clamp(1, MAX_HOLDOUT_GROUPS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardHistoryRow {
    pub step: usize,
    pub train_loss: f64,
    pub holdout_loss: Option<f64>,
    pub rank_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RewardHistory {
    pub rows: Vec<RewardHistoryRow>,
    pub stopped_early: bool,
}

/// Samples `k` trajectories from `policy` for one context drawn from
/// `source` and orders them by the source's scores.
pub fn sample_group(
    policy: &PolicyModel,
    source: &dyn PreferenceSource,
    k: usize,
    horizon: usize,
    temperature: f64,
    rng: &mut SeededRng,
) -> Result<PreferenceGroup> {
    let (input_id, target) = source.draw_context(rng);
    let mut trajs = Vec::with_capacity(k);
    let mut scores = Vec::with_capacity(k);
    for _ in 0..k {
        let t = policy.sample_with(rng, input_id, horizon, temperature)?;
        scores.push(source.score(&t, target)?);
        trajs.push(t);
    }
    Ok(make_group(input_id, trajs, &scores)?.with_target(target))
}

/// A reward model together with its optimizer state, so retraining can
/// continue without re-initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardLearner {
    model: RewardModel,
    optimizer: Adam,
}

impl RewardLearner {
    pub fn new(model: RewardModel, optimizer: AdamConfig) -> Self {
        let optimizer = Adam::new(optimizer, model.n_params());
        Self { model, optimizer }
    }

    pub fn model(&self) -> &RewardModel {
        &self.model
    }

    pub fn into_model(self) -> RewardModel {
        self.model
    }

    pub fn optimizer(&self) -> &Adam {
        &self.optimizer
    }

    fn graph(&self, group: &PreferenceGroup, cfg: &RewardTrainConfig) -> Result<LossGraph<RewardModel>> {
        match cfg.loss {
            PreferenceLoss::Listwise => listwise_graph(&self.model, group, cfg.level),
            PreferenceLoss::Pairwise => all_pairs_graph(&self.model, group),
        }
    }

    fn mean_loss(&self, groups: &[PreferenceGroup], cfg: &RewardTrainConfig) -> Result<f64> {
        let mut total = 0.0;
        for g in groups {
            total += self.graph(g, cfg)?.value();
        }
        Ok(total / groups.len() as f64)
    }

    /// One optimizer step on the mean loss over `groups`. Returns the loss
    /// before the update.
    pub fn step(&mut self, groups: &[PreferenceGroup], cfg: &RewardTrainConfig) -> Result<f64> {
        if groups.is_empty() {
            return Err(Error::Shape("reward step on an empty batch".into()));
        }
        let mut grad = GradBuffer::for_model(&self.model);
        let mut loss = 0.0;
        for g in groups {
            let graph = self.graph(g, cfg)?;
            loss += graph.value();
            grad += &backprop_scalar(&self.model, &graph)?;
        }
        let scale = 1.0 / groups.len() as f64;
        grad.scale(scale);
        loss *= scale;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::NonFinite("reward loss"));
        }
        self.optimizer.step(self.model.params_mut(), &grad);
        Ok(loss)
    }

    /// Online reward learning: each step samples fresh groups from `policy`,
    /// orders them by `source`, and takes one optimizer step. A held-out set
    /// drawn at the start of the call drives early stopping.
    pub fn train(
        &mut self,
        policy: &PolicyModel,
        source: &dyn PreferenceSource,
        cfg: &RewardTrainConfig,
    ) -> Result<RewardHistory> {
        cfg.validate()?;
        let mut history = RewardHistory::default();
        if cfg.early_stop_patience == 0 {
            history.stopped_early = true;
            return Ok(history);
        }
        let mut rng = seeded_rng(cfg.seed);
        let holdout = (0..cfg.holdout_groups())
            .map(|_| sample_group(policy, source, cfg.k, cfg.horizon, cfg.temperature, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut best = self.mean_loss(&holdout, cfg)?;
        let mut stale = 0;
        for step in 1..=cfg.m_rew {
            let batch = (0..cfg.group_batch)
                .map(|_| sample_group(policy, source, cfg.k, cfg.horizon, cfg.temperature, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let train_loss = self.step(&batch, cfg)?;
            let mut row = RewardHistoryRow {
                step,
                train_loss,
                holdout_loss: None,
                rank_accuracy: None,
            };
            let mut stop = false;
            if step % cfg.eval_every == 0 {
                let h = self.mean_loss(&holdout, cfg)?;
                row.holdout_loss = Some(h);
                row.rank_accuracy = Some(rank_accuracy_at(&self.model, &holdout, cfg.level)?);
                if h < best {
                    best = h;
                    stale = 0;
                } else {
                    stale += 1;
                    stop = stale >= cfg.early_stop_patience;
                }
            }
            history.rows.push(row);
            if stop {
                history.stopped_early = true;
                break;
            }
        }
        Ok(history)
    }
}

/// Trains `reward` with fresh optimizer state. See [`RewardLearner::train`].
pub fn train_reward(
    reward: RewardModel,
    policy: &PolicyModel,
    source: &dyn PreferenceSource,
    cfg: &RewardTrainConfig,
) -> Result<(RewardModel, RewardHistory)> {
    let mut learner = RewardLearner::new(reward, cfg.optimizer);
    let history = learner.train(policy, source, cfg)?;
    Ok((learner.into_model(), history))
}
