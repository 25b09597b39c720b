//! Policy training with a learned token-level reward.
//!
//! Two ways of using the reward:
//!
//! * REINFORCE with an entropy bonus. At every visited state the gradient is
//!   the exact expectation over the vocabulary of `r(s, a) ∇ ln π(a|s)`,
//!   plus `α ∇H(π(·|s))`, averaged over the trajectory's steps.
//! * Self-normalized weighted MLE on supervised records, where token `t` of a
//!   target is weighted by `r_t / Σ_t' r_t'`.
//!
//! [`alternate_train`] interleaves reward estimation and policy steps.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::domain::{SupervisedRecord, Trajectory, Vocab};
use crate::error::param_err;
use crate::math;
use crate::models::{Adam, AdamConfig, Backprop, GradBuffer, Parametric, PolicyModel, RewardModel};
use crate::oracle::{exact_expected_metric, EnumerationBudget};
use crate::rank::{GuidanceLevel, RewardHistory, RewardLearner, RewardTrainConfig};
use crate::tasks::PreferenceSource;
use crate::{seeded_rng, Error, Result, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PolicyMode {
    #[default]
    Reinforce,
    WeightedMle,
    VanillaMle,
    SeqReinforce,
    SeqWeightedMle,
}

impl PolicyMode {
    pub const ALL: [PolicyMode; 5] = [
        PolicyMode::Reinforce,
        PolicyMode::WeightedMle,
        PolicyMode::VanillaMle,
        PolicyMode::SeqReinforce,
        PolicyMode::SeqWeightedMle,
    ];

    pub fn flag(self) -> &'static str {
        match self {
            PolicyMode::Reinforce => "reinforce",
            PolicyMode::WeightedMle => "weighted_mle",
            PolicyMode::VanillaMle => "vanilla_mle",
            PolicyMode::SeqReinforce => "seq_reinforce",
            PolicyMode::SeqWeightedMle => "seq_weighted_mle",
        }
    }

    /// Whether the mode learns from supervised records.
    pub fn needs_records(self) -> bool {
        matches!(self, PolicyMode::WeightedMle | PolicyMode::VanillaMle | PolicyMode::SeqWeightedMle)
    }

    /// Whether the reward is read only at the final state.
    pub fn is_sequence_level(self) -> bool {
        matches!(self, PolicyMode::SeqReinforce | PolicyMode::SeqWeightedMle)
    }

    pub fn uses_reward(self) -> bool {
        self != PolicyMode::VanillaMle
    }
}

impl fmt::Display for PolicyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.flag())
    }
}

impl FromStr for PolicyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyMode::ALL
            .into_iter()
            .find(|m| m.flag() == s)
            .ok_or_else(|| param_err!("unknown policy mode `{s}`"))
    }
}

/// How the inner expectation over actions is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Estimator {
    /// Exact sum over the vocabulary at each visited state.
    #[default]
    Exact,
    /// The sampled action only: `r(s_t, a_t) ∇ ln π(a_t|s_t)`.
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyTrainConfig {
    /// Total policy steps `M_LM`.
    pub m_lm: usize,
    /// Reward retrain period `M_re`.
    pub m_re: usize,
    /// Reward steps for the initial fit; `None` uses the reward config.
    pub m_rew_init: Option<usize>,
    /// Entropy coefficient.
    pub alpha: f64,
    pub mode: PolicyMode,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Generation horizon `T_max`.
    pub horizon: usize,
    pub seed: u64,
    /// Periodic reward re-estimation on or off.
    pub retrain: bool,
    /// Fit the reward before the first policy step; off keeps a supplied
    /// reward as is until the first retrain.
    pub init_reward: bool,
    pub estimator: Estimator,
    /// Decay of a moving-average reward baseline for the sampled estimator;
    /// `None` disables it.
    pub baseline_decay: Option<f64>,
    /// Iterations between metric evaluations (the last iteration is always
    /// evaluated).
    pub eval_every: usize,
    /// Budget for the exact metric; larger instances report no exact metric.
    pub budget: EnumerationBudget,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        Self {
            m_lm: 300,
            m_re: 50,
            m_rew_init: None,
            alpha: 0.125,
            mode: PolicyMode::Reinforce,
            batch_size: 8,
            optimizer: AdamConfig::default(),
            horizon: 5,
            seed: 0,
            retrain: true,
            init_reward: true,
            estimator: Estimator::Exact,
            baseline_decay: None,
            eval_every: 50,
            budget: EnumerationBudget::default(),
        }
    }
}

impl PolicyTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_lm == 0 || self.m_re == 0 {
            return Err(param_err!("m_lm and m_re must be at least 1"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(param_err!("alpha must be non-negative, got {}", self.alpha));
        }
        if self.batch_size == 0 || self.horizon == 0 || self.eval_every == 0 {
            return Err(param_err!("batch_size, horizon and eval_every must be positive"));
        }
        if let Some(d) = self.baseline_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(param_err!("baseline decay must lie in [0, 1), got {d}"));
            }
        }
        if self.m_rew_init == Some(0) {
            return Err(param_err!("m_rew_init must be at least 1"));
        }
        Ok(())
    }
}

/// Objective value together with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyObjective {
    pub value: f64,
    pub grad: GradBuffer,
}

/// `-p ⊙ (ln p + H)`, the logit gradient of the entropy. Returns `H` too.
fn entropy_logit_grad(p: &[f64]) -> (f64, Vec<f64>) {
    let h = math::entropy(p);
    let g = p
        .iter()
        .map(|&x| if x > 0.0 { -x * (math::ln(x) + h) } else { 0.0 })
        .collect();
    (h, g)
}

/// Exact per-state objective `Σ_a p_a r_a + α H(p)` and its gradient with
/// respect to the logits, `p ⊙ (r - r̄) - α p ⊙ (ln p + H)`.
pub fn state_gradient(probs: &[f64], rewards: &[f64], alpha: f64) -> Result<(f64, Vec<f64>)> {
    if probs.len() != rewards.len() {
        return Err(Error::Shape(alloc::format!(
            "{} probabilities for {} rewards",
            probs.len(),
            rewards.len()
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("reward"));
    }
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let rbar = math::dot(probs, rewards);
    let (h, mut g) = entropy_logit_grad(probs);
    for ((g, &p), &r) in g.iter_mut().zip(probs).zip(rewards) {
        *g = p * (r - rbar) + alpha * *g;
    }
    Ok((rbar + alpha * h, g))
}

/// Sampled-action variant: `(r_a - b)(e_a - p) - α p ⊙ (ln p + H)`.
fn sampled_state_gradient(probs: &[f64], action: usize, r: f64, baseline: f64, alpha: f64) -> Result<(f64, Vec<f64>)> {
    if !r.is_finite() {
        return Err(Error::NonFinite("reward"));
    }
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let (h, mut g) = entropy_logit_grad(probs);
    let adv = r - baseline;
    for (i, (g, &p)) in g.iter_mut().zip(probs).enumerate() {
        let score = if i == action { 1.0 - p } else { -p };
        *g = adv * score + alpha * *g;
    }
    Ok((r + alpha * h, g))
}

/// Options of the REINFORCE estimator.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ReinforceOpts {
    pub estimator: Estimator,
    /// Subtracted from sampled rewards; has no effect in exact mode.
    pub baseline: f64,
}

fn batch_weights(n: usize, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(param_err!("empty batch"));
    }
    match weights {
        None => Ok(vec![1.0 / n as f64; n]),
        Some(w) if w.len() == n && w.iter().all(|x| x.is_finite()) => Ok(w.to_vec()),
        Some(w) => Err(Error::Shape(alloc::format!("{} weights for {n} trajectories", w.len()))),
    }
}

/// REINFORCE + entropy gradient over `batch` with uniform trajectory
/// weights and the exact inner expectation. Ascent direction.
pub fn reinforce_entropy_grad(
    policy: &PolicyModel,
    reward: &RewardModel,
    batch: &[Trajectory],
    alpha: f64,
) -> Result<GradBuffer> {
    Ok(reinforce_entropy_step(policy, reward, batch, None, alpha, ReinforceOpts::default())?.grad)
}

/// General form of [`reinforce_entropy_grad`]: trajectory `i` contributes
/// with weight `weights[i]` (default `1/B`), each of its steps with an extra
/// `1/T_i`.
pub fn reinforce_entropy_step(
    policy: &PolicyModel,
    reward: &RewardModel,
    batch: &[Trajectory],
    weights: Option<&[f64]>,
    alpha: f64,
    opts: ReinforceOpts,
) -> Result<PolicyObjective> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(param_err!("alpha must be non-negative, got {alpha}"));
    }
    let weights = batch_weights(batch.len(), weights)?;
    let mut grad = GradBuffer::for_model(policy);
    let mut value = 0.0;
    for (traj, &w) in batch.iter().zip(&weights) {
        if traj.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        let step_w = w / traj.len() as f64;
        for (prefix, a) in traj.steps() {
            let trace = policy.trace(traj.input_id(), prefix)?;
            let (obj, mut d) = match opts.estimator {
                Estimator::Exact => {
                    let r = reward.rewards_all_tokens(traj.input_id(), prefix)?;
                    state_gradient(trace.probs(), &r, alpha)?
                }
                Estimator::Sampled => {
                    let r = reward.reward_step(traj.input_id(), prefix, a)?;
                    sampled_state_gradient(trace.probs(), a, r, opts.baseline, alpha)?
                }
            };
            value += step_w * obj;
            d.iter_mut().for_each(|x| *x *= step_w);
            policy.backprop_into(&trace, &d, &mut grad);
        }
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("policy gradient"));
    }
    Ok(PolicyObjective { value, grad })
}

/// `r / Σ r`; every entry must be positive and finite.
pub fn normalize_weights(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(param_err!("cannot normalize an empty reward vector"));
    }
    if rewards.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(param_err!("token rewards must be positive and finite: {rewards:?}"));
    }
    let s: f64 = rewards.iter().sum();
    Ok(rewards.iter().map(|r| r / s).collect())
}

/// Self-normalized token weights `w_t = r(s_t, y_t) / Σ_t' r(s_t', y_t')`.
pub fn token_weights(reward: &RewardModel, record: &SupervisedRecord) -> Result<Vec<f64>> {
    normalize_weights(&reward.reward_trajectory(&record.as_trajectory())?)
}

/// `-(1/B) Σ_records Σ_t w_t ln π(y_t | s_t)` and its gradient (descent
/// direction).
fn mle_loss_with(
    policy: &PolicyModel,
    records: &[SupervisedRecord],
    mut weights: impl FnMut(&SupervisedRecord) -> Result<Vec<f64>>,
) -> Result<(f64, GradBuffer)> {
    if records.is_empty() {
        return Err(param_err!("empty record batch"));
    }
    let scale = 1.0 / records.len() as f64;
    let mut grad = GradBuffer::for_model(policy);
    let mut loss = 0.0;
    for rec in records {
        if rec.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        let w = weights(rec)?;
        if w.len() != rec.len() {
            return Err(Error::Shape(alloc::format!("{} weights for {} tokens", w.len(), rec.len())));
        }
        let traj = rec.as_trajectory();
        for ((prefix, y), &wt) in traj.steps().zip(&w) {
            let trace = policy.trace(rec.input_id(), prefix)?;
            let logits = trace.logits();
            let log_p = logits[y] - math::log_sum_exp(logits);
            let c = wt * scale;
            loss -= c * log_p;
            let mut d: Vec<f64> = trace.probs().iter().map(|p| c * p).collect();
            d[y] -= c;
            policy.backprop_into(&trace, &d, &mut grad);
        }
    }
    if !loss.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite("likelihood loss"));
    }
    Ok((loss, grad))
}

/// Reward-weighted MLE loss with self-normalized token weights. The reward
/// is a constant here; no gradient reaches its parameters.
pub fn weighted_mle_loss(
    policy: &PolicyModel,
    reward: &RewardModel,
    records: &[SupervisedRecord],
) -> Result<(f64, GradBuffer)> {
    mle_loss_with(policy, records, |r| token_weights(reward, r))
}

/// Length-normalized MLE loss, `w_t = 1/|y|`.
pub fn vanilla_mle_loss(policy: &PolicyModel, records: &[SupervisedRecord]) -> Result<(f64, GradBuffer)> {
    mle_loss_with(policy, records, |r| Ok(vec![1.0 / r.len() as f64; r.len()]))
}

/// Reward read at the final state of `traj`.
pub fn sequence_reward(reward: &RewardModel, traj: &Trajectory) -> Result<f64> {
    if traj.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let last = traj.len() - 1;
    reward.reward_step(traj.input_id(), traj.prefix(last), traj.tokens()[last])
}

/// A reward model read only at the final state, viewed as a sequence score.
pub struct FinalStateReward<'a>(pub &'a RewardModel);

impl PreferenceSource for FinalStateReward<'_> {
    fn score(&self, traj: &Trajectory, _target: Option<usize>) -> Result<f64> {
        sequence_reward(self.0, traj)
    }
}

/// Sequence-level variants. `seq_reinforce` scales `∇ ln π` at every step
/// by the scalar sequence reward and adds the step-averaged entropy bonus;
/// `seq_weighted_mle` weights every target token by the unnormalized
/// sequence reward. Ascent direction in both cases.
pub fn seq_variant_grad(
    policy: &PolicyModel,
    seq_reward: &RewardModel,
    batch: &[Trajectory],
    mode: PolicyMode,
    alpha: f64,
) -> Result<GradBuffer> {
    let score = |t: &Trajectory| sequence_reward(seq_reward, t);
    Ok(seq_variant_step(policy, &score, batch, None, mode, alpha, ReinforceOpts::default())?.grad)
}

/// General form of [`seq_variant_grad`] over any sequence score.
pub fn seq_variant_step(
    policy: &PolicyModel,
    seq_score: &dyn Fn(&Trajectory) -> Result<f64>,
    batch: &[Trajectory],
    weights: Option<&[f64]>,
    mode: PolicyMode,
    alpha: f64,
    opts: ReinforceOpts,
) -> Result<PolicyObjective> {
    if !mode.is_sequence_level() {
        return Err(param_err!("mode `{mode}` is not a sequence-level variant"));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(param_err!("alpha must be non-negative, got {alpha}"));
    }
    let weights = batch_weights(batch.len(), weights)?;
    let mut grad = GradBuffer::for_model(policy);
    let mut value = 0.0;
    for (traj, &w) in batch.iter().zip(&weights) {
        if traj.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        let r = seq_score(traj)?;
        if !r.is_finite() {
            return Err(Error::NonFinite("reward"));
        }
        let adv = match (mode, opts.estimator) {
            (PolicyMode::SeqReinforce, Estimator::Sampled) => r - opts.baseline,
            _ => r,
        };
        let ent_w = if mode == PolicyMode::SeqReinforce {
            alpha / traj.len() as f64
        } else {
            0.0
        };
        if mode == PolicyMode::SeqReinforce {
            value += w * r;
        }
        for (prefix, a) in traj.steps() {
            let trace = policy.trace(traj.input_id(), prefix)?;
            let p = trace.probs();
            let (h, eg) = entropy_logit_grad(p);
            let mut d: Vec<f64> = p
                .iter()
                .zip(&eg)
                .map(|(&pi, &e)| w * (-adv * pi + ent_w * e))
                .collect();
            d[a] += w * adv;
            if mode == PolicyMode::SeqReinforce {
                value += w * ent_w * h;
            } else {
                let logits = trace.logits();
                value += w * r * (logits[a] - math::log_sum_exp(logits));
            }
            policy.backprop_into(&trace, &d, &mut grad);
        }
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("policy gradient"));
    }
    Ok(PolicyObjective { value, grad })
}

/// Reward re-estimation fires at `iter` when `iter ≤ M_LM / 2` and
/// `iter mod M_re = 0`.
pub fn retrain_due(iter: usize, m_lm: usize, m_re: usize) -> bool {
    m_re > 0 && iter > 0 && iter % m_re == 0 && 2 * iter <= m_lm
}

/// The three phases interleaved by [`run_alternation`].
pub trait AlternationPhases {
    fn init_reward(&mut self) -> Result<()>;
    fn retrain_reward(&mut self, iter: usize) -> Result<()>;
    fn policy_step(&mut self, iter: usize, retrained: bool) -> Result<()>;
}

/// Drives `phases` through `M_LM` policy iterations, re-estimating the
/// reward on schedule. Returns the iterations at which retraining ran.
pub fn run_alternation<P: AlternationPhases + ?Sized>(
    m_lm: usize,
    m_re: usize,
    retrain: bool,
    phases: &mut P,
) -> Result<Vec<usize>> {
    if m_lm == 0 || m_re == 0 {
        return Err(param_err!("m_lm and m_re must be at least 1"));
    }
    phases.init_reward()?;
    let mut fired = Vec::new();
    for iter in 1..=m_lm {
        let due = retrain && retrain_due(iter, m_lm, m_re);
        if due {
            phases.retrain_reward(iter)?;
            fired.push(iter);
        }
        phases.policy_step(iter, due)?;
    }
    Ok(fired)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyHistoryRow {
    pub iter: usize,
    pub mode: PolicyMode,
    pub policy_loss: f64,
    pub exact_metric: Option<f64>,
    pub sampled_metric: Option<f64>,
    pub retrain: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlternationHistory {
    pub rows: Vec<PolicyHistoryRow>,
    /// Reward-training histories keyed by iteration (`0` is the initial fit).
    pub reward: Vec<(usize, RewardHistory)>,
    pub retrain_iters: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlternationOutput {
    pub policy: PolicyModel,
    pub reward: RewardModel,
    pub history: AlternationHistory,
}

struct Alternation<'a> {
    policy: PolicyModel,
    adam: Adam,
    learner: RewardLearner,
    source: &'a dyn PreferenceSource,
    records: &'a [SupervisedRecord],
    rew_cfg: RewardTrainConfig,
    pol_cfg: PolicyTrainConfig,
    vocab: Vocab,
    rng: SeededRng,
    eval_rng: SeededRng,
    baseline: f64,
    history: AlternationHistory,
    observer: &'a mut dyn FnMut(usize, &PolicyModel, &RewardModel) -> Result<()>,
}

impl Alternation<'_> {
    fn sample_batch(&mut self) -> Result<Vec<(Trajectory, Option<usize>)>> {
        (0..self.pol_cfg.batch_size)
            .map(|_| {
                let (input, target) = self.source.draw_context(&mut self.rng);
                let t = self.policy.sample_with(&mut self.rng, input, self.pol_cfg.horizon, 1.0)?;
                Ok((t, target))
            })
            .collect()
    }

    fn record_batch(&mut self) -> Vec<SupervisedRecord> {
        (0..self.pol_cfg.batch_size)
            .map(|_| self.records[self.rng.random_range(0..self.records.len())].clone())
            .collect()
    }

    fn opts(&self) -> ReinforceOpts {
        ReinforceOpts {
            estimator: self.pol_cfg.estimator,
            baseline: self.baseline,
        }
    }

    fn update_baseline(&mut self, mean_reward: f64) {
        if let Some(d) = self.pol_cfg.baseline_decay {
            self.baseline = d * self.baseline + (1.0 - d) * mean_reward;
        }
    }

    /// Returns the policy loss of the step.
    fn step(&mut self) -> Result<f64> {
        let cfg = self.pol_cfg;
        match cfg.mode {
            PolicyMode::Reinforce => {
                let batch: Vec<Trajectory> = self.sample_batch()?.into_iter().map(|(t, _)| t).collect();
                let obj = reinforce_entropy_step(&self.policy, self.learner.model(), &batch, None, cfg.alpha, self.opts())?;
                if cfg.baseline_decay.is_some() {
                    let mut mean = 0.0;
                    for t in &batch {
                        let r = self.learner.model().reward_trajectory(t)?;
                        mean += r.iter().sum::<f64>() / r.len() as f64;
                    }
                    self.update_baseline(mean / batch.len() as f64);
                }
                self.adam.ascend(self.policy.params_mut(), &obj.grad);
                Ok(-obj.value)
            }
            PolicyMode::SeqReinforce => {
                let batch: Vec<Trajectory> = self.sample_batch()?.into_iter().map(|(t, _)| t).collect();
                let reward = self.learner.model();
                let score = |t: &Trajectory| sequence_reward(reward, t);
                let obj = seq_variant_step(&self.policy, &score, &batch, None, cfg.mode, cfg.alpha, self.opts())?;
                if cfg.baseline_decay.is_some() {
                    let mut mean = 0.0;
                    for t in &batch {
                        mean += score(t)?;
                    }
                    self.update_baseline(mean / batch.len() as f64);
                }
                self.adam.ascend(self.policy.params_mut(), &obj.grad);
                Ok(-obj.value)
            }
            PolicyMode::WeightedMle | PolicyMode::VanillaMle => {
                let batch = self.record_batch();
                let (loss, grad) = if cfg.mode == PolicyMode::WeightedMle {
                    weighted_mle_loss(&self.policy, self.learner.model(), &batch)?
                } else {
                    vanilla_mle_loss(&self.policy, &batch)?
                };
                self.adam.step(self.policy.params_mut(), &grad);
                Ok(loss)
            }
            PolicyMode::SeqWeightedMle => {
                let batch: Vec<Trajectory> = self.record_batch().iter().map(SupervisedRecord::as_trajectory).collect();
                let reward = self.learner.model();
                let score = |t: &Trajectory| sequence_reward(reward, t);
                let obj = seq_variant_step(&self.policy, &score, &batch, None, cfg.mode, 0.0, self.opts())?;
                self.adam.ascend(self.policy.params_mut(), &obj.grad);
                Ok(-obj.value)
            }
        }
    }

    fn evaluate(&mut self) -> Result<(Option<f64>, f64)> {
        let exact = match exact_expected_metric(&self.policy, self.source, &self.vocab, self.pol_cfg.horizon, self.pol_cfg.budget) {
            Ok(m) => Some(m),
            Err(Error::BudgetExceeded { .. }) => None,
            Err(e) => return Err(e),
        };
        let mut total = 0.0;
        for _ in 0..self.pol_cfg.batch_size {
            let (input, target) = self.source.draw_context(&mut self.eval_rng);
            let t = self.policy.sample_with(&mut self.eval_rng, input, self.pol_cfg.horizon, 1.0)?;
            total += self.source.score(&t, target)?;
        }
        Ok((exact, total / self.pol_cfg.batch_size as f64))
    }

    fn reward_cfg(&self, iter: usize) -> RewardTrainConfig {
        let mut cfg = self.rew_cfg.clone();
        cfg.seed = cfg.seed.wrapping_add(iter as u64);
        if iter == 0 {
            if let Some(m) = self.pol_cfg.m_rew_init {
                cfg.m_rew = m;
            }
        }
        cfg
    }

    fn fit_reward(&mut self, iter: usize) -> Result<()> {
        if !self.pol_cfg.mode.uses_reward() {
            return Ok(());
        }
        let cfg = self.reward_cfg(iter);
        let hist = self.learner.train(&self.policy, self.source, &cfg)?;
        self.history.reward.push((iter, hist));
        Ok(())
    }
}

impl AlternationPhases for Alternation<'_> {
    fn init_reward(&mut self) -> Result<()> {
        if self.pol_cfg.init_reward {
            self.fit_reward(0)?;
        }
        Ok(())
    }

    fn retrain_reward(&mut self, iter: usize) -> Result<()> {
        self.fit_reward(iter)
    }

    fn policy_step(&mut self, iter: usize, retrained: bool) -> Result<()> {
        let policy_loss = self.step()?;
        let (exact_metric, sampled_metric) = if iter % self.pol_cfg.eval_every == 0 || iter == self.pol_cfg.m_lm {
            let (e, s) = self.evaluate()?;
            (e, Some(s))
        } else {
            (None, None)
        };
        self.history.rows.push(PolicyHistoryRow {
            iter,
            mode: self.pol_cfg.mode,
            policy_loss,
            exact_metric,
            sampled_metric,
            retrain: retrained && self.pol_cfg.mode.uses_reward(),
        });
        (self.observer)(iter, &self.policy, self.learner.model())
    }
}

/// Alternating reward estimation and policy training.
///
/// The reward is first fit on groups sampled from the initial policy, then
/// re-fit from its current parameters and optimizer state at every
/// [`retrain_due`] iteration. Sequence-level modes fit the reward at the
/// final state only; `vanilla_mle` never touches the reward.
pub fn alternate_train(
    policy: PolicyModel,
    reward: RewardModel,
    source: &dyn PreferenceSource,
    rew_cfg: &RewardTrainConfig,
    pol_cfg: &PolicyTrainConfig,
    records: Option<&[SupervisedRecord]>,
) -> Result<AlternationOutput> {
    alternate_train_observed(policy, reward, source, rew_cfg, pol_cfg, records, &mut |_, _, _| Ok(()))
}

/// [`alternate_train`] calling `observer(iter, policy, reward)` after every
/// policy step. An observer error aborts training.
pub fn alternate_train_observed(
    policy: PolicyModel,
    reward: RewardModel,
    source: &dyn PreferenceSource,
    rew_cfg: &RewardTrainConfig,
    pol_cfg: &PolicyTrainConfig,
    records: Option<&[SupervisedRecord]>,
    observer: &mut dyn FnMut(usize, &PolicyModel, &RewardModel) -> Result<()>,
) -> Result<AlternationOutput> {
    pol_cfg.validate()?;
    let mut rew_cfg = rew_cfg.clone();
    if pol_cfg.mode.is_sequence_level() {
        rew_cfg.level = GuidanceLevel::Sequence;
    }
    if pol_cfg.mode.uses_reward() {
        rew_cfg.validate()?;
    }
    let records = match (pol_cfg.mode.needs_records(), records) {
        (true, Some(r)) if !r.is_empty() => r,
        (true, _) => return Err(param_err!("mode `{}` needs supervised records", pol_cfg.mode)),
        (false, _) => &[],
    };
    let vocab = Vocab::new(policy.vocab_size(), policy.eos())?;
    let n = policy.n_params();
    let mut run = Alternation {
        policy,
        adam: Adam::new(pol_cfg.optimizer, n),
        learner: RewardLearner::new(reward, rew_cfg.optimizer),
        source,
        records,
        rew_cfg,
        pol_cfg: *pol_cfg,
        vocab,
        rng: seeded_rng(pol_cfg.seed),
        eval_rng: seeded_rng(pol_cfg.seed ^ 0x9e37_79b9_7f4a_7c15),
        baseline: 0.0,
        history: AlternationHistory::default(),
        observer,
    };
    let fired = run_alternation(pol_cfg.m_lm, pol_cfg.m_re, pol_cfg.retrain, &mut run)?;
    let Alternation {
        policy,
        learner,
        mut history,
        ..
    } = run;
    history.retrain_iters = if pol_cfg.mode.uses_reward() { fired } else { Vec::new() };
    Ok(AlternationOutput {
        policy,
        reward: learner.into_model(),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Arch;
    use crate::oracle::{
        compare_gradients, enumerate_sequences, exact_policy_gradient, finite_diff_grad, sequence_probability,
        Guidance, FD_ATOL, FD_RTOL, FD_STEP,
    };
    use crate::tasks::{FnSource, KeywordTask, NoisySupervisedTask};

    fn arch() -> Arch {
        Arch {
            embed: 4,
            hidden: 6,
            window: 2,
            max_pos: 4,
            n_inputs: 2,
        }
    }

    fn constant_reward(v: &Vocab, value: f64) -> RewardModel {
        let mut r = RewardModel::zeros(v, arch());
        let n = r.n_params();
        r.params_mut()[n - 1] = math::ln(value / (1.0 - value));
        r
    }

    #[test]
    fn uniform_policy_constant_reward_has_zero_gradient() {
        let v = Vocab::new(4, None).unwrap();
        let p = PolicyModel::zeros(&v, arch());
        let r = constant_reward(&v, 0.3);
        let batch = [Trajectory::new(0, vec![1, 2, 3]), Trajectory::new(1, vec![0])];
        for alpha in [0.0, 0.5, 3.0] {
            let g = reinforce_entropy_grad(&p, &r, &batch, alpha).unwrap();
            assert!(g.as_slice().iter().all(|x| x.abs() < 1e-15));
        }
    }

    #[test]
    fn better_token_gains_logit() {
        let (_, g) = state_gradient(&[0.5, 0.5], &[0.9, 0.1], 0.0).unwrap();
        assert!(g[0] > 0.0 && g[1] < 0.0);
        let (_, g) = state_gradient(&[0.2, 0.8], &[0.9, 0.1], 0.0).unwrap();
        assert!(g[0] - g[1] > 0.0);
    }

    fn enumerated(policy: &PolicyModel, v: &Vocab, horizon: usize, input: usize) -> (Vec<Trajectory>, Vec<f64>) {
        let seqs = enumerate_sequences(v, horizon, EnumerationBudget::default()).unwrap();
        let w = seqs.iter().map(|s| sequence_probability(policy, input, s).unwrap()).collect();
        (seqs.into_iter().map(|s| Trajectory::new(input, s)).collect(), w)
    }

    #[test]
    fn exact_reinforce_matches_oracle() {
        for (eos, horizon) in [(None, 2), (Some(2), 3)] {
            let v = Vocab::new(3, eos).unwrap();
            let p = PolicyModel::new(&v, arch(), 21);
            let r = RewardModel::new(&v, arch(), 22);
            let (batch, w) = enumerated(&p, &v, horizon, 1);
            for alpha in [0.0, 0.125, 2.0] {
                let est = reinforce_entropy_step(&p, &r, &batch, Some(&w), alpha, ReinforceOpts::default()).unwrap();
                let oracle = exact_policy_gradient(
                    &p,
                    Guidance::Reward { model: &r, input_id: 1 },
                    alpha,
                    &v,
                    horizon,
                    EnumerationBudget::default(),
                )
                .unwrap();
                let cmp = compare_gradients(est.grad.as_slice(), oracle.as_slice(), 1e-6, 1e-12).unwrap();
                assert!(cmp.passed(), "{cmp:?}");
            }
        }
    }

    #[test]
    fn seq_reinforce_matches_oracle() {
        let v = Vocab::new(3, None).unwrap();
        let p = PolicyModel::new(&v, arch(), 31);
        let r = RewardModel::new(&v, arch(), 32);
        let (batch, w) = enumerated(&p, &v, 2, 0);
        let score = |t: &Trajectory| sequence_reward(&r, t);
        for alpha in [0.0, 0.5] {
            let est = seq_variant_step(&p, &score, &batch, Some(&w), PolicyMode::SeqReinforce, alpha, ReinforceOpts::default())
                .unwrap();
            let src = FinalStateReward(&r);
            let oracle =
                exact_policy_gradient(&p, Guidance::Task(&src), alpha, &v, 2, EnumerationBudget::default()).unwrap();
            let cmp = compare_gradients(est.grad.as_slice(), oracle.as_slice(), 1e-6, 1e-12).unwrap();
            assert!(cmp.passed(), "{cmp:?}");
        }
    }

    #[test]
    fn seq_variants_trivial_cases() {
        let v = Vocab::new(3, None).unwrap();
        let uniform = PolicyModel::zeros(&v, arch());
        let r = constant_reward(&v, 0.6);
        let batch = [Trajectory::new(0, vec![0, 2]), Trajectory::new(0, vec![1, 1])];
        let (batch_w, w) = enumerated(&uniform, &v, 2, 0);
        let score = |t: &Trajectory| sequence_reward(&r, t);
        let g = seq_variant_step(&uniform, &score, &batch_w, Some(&w), PolicyMode::SeqReinforce, 0.0, ReinforceOpts::default())
            .unwrap();
        assert!(g.grad.as_slice().iter().all(|x| x.abs() < 1e-15));

        let p = PolicyModel::new(&v, arch(), 3);
        let one = |_: &Trajectory| Ok(1.0);
        let seq = seq_variant_step(&p, &one, &batch, None, PolicyMode::SeqWeightedMle, 0.0, ReinforceOpts::default()).unwrap();
        let recs: Vec<SupervisedRecord> =
            batch.iter().map(|t| SupervisedRecord::new(0, t.tokens().to_vec(), &v).unwrap()).collect();
        let (loss, mut grad) = vanilla_mle_loss(&p, &recs).unwrap();
        // Equal lengths: unnormalized likelihood is |y| times the normalized one.
        grad.scale(-2.0);
        assert!((seq.value + 2.0 * loss).abs() < 1e-12);
        let cmp = compare_gradients(seq.grad.as_slice(), grad.as_slice(), 1e-12, 1e-15).unwrap();
        assert!(cmp.passed(), "{cmp:?}");
        assert!(seq_variant_grad(&p, &r, &batch, PolicyMode::Reinforce, 0.0).is_err());
    }

    #[test]
    fn weight_examples() {
        let w = normalize_weights(&[0.2, 0.3, 0.5]).unwrap();
        for (a, b) in w.iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        let w = normalize_weights(&[0.1, 0.3]).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15);
        assert!(normalize_weights(&[0.1, 0.0]).is_err());
        assert!(normalize_weights(&[]).is_err());
    }

    fn records(v: &Vocab) -> Vec<SupervisedRecord> {
        vec![
            SupervisedRecord::new(0, vec![1, 2, 0], v).unwrap(),
            SupervisedRecord::new(1, vec![3], v).unwrap(),
            SupervisedRecord::new(0, vec![2, 2, 3, 1], v).unwrap(),
        ]
    }

    #[test]
    fn weights_are_normalized_and_positive() {
        let v = Vocab::new(4, None).unwrap();
        let r = RewardModel::new(&v, arch(), 4);
        for rec in records(&v) {
            let w = token_weights(&r, &rec).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn constant_reward_weighted_equals_vanilla() {
        let v = Vocab::new(4, None).unwrap();
        let p = PolicyModel::new(&v, arch(), 8);
        let r = constant_reward(&v, 0.7);
        let (a, ga) = weighted_mle_loss(&p, &r, &records(&v)).unwrap();
        let (b, gb) = vanilla_mle_loss(&p, &records(&v)).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(ga.as_slice().iter().zip(gb.as_slice()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn vanilla_loss_limits() {
        let v = Vocab::new(4, None).unwrap();
        let uniform = PolicyModel::zeros(&v, arch());
        let (loss, _) = vanilla_mle_loss(&uniform, &records(&v)).unwrap();
        assert!((loss - math::ln(4.0)).abs() < 1e-12);

        let mut det = PolicyModel::zeros(&v, arch());
        let n = det.n_params();
        det.params_mut()[n - 4 + 2] = 60.0;
        let recs = vec![SupervisedRecord::new(0, vec![2, 2, 2], &v).unwrap()];
        let (loss, _) = vanilla_mle_loss(&det, &recs).unwrap();
        assert!((0.0..1e-20).contains(&loss));
        assert!(vanilla_mle_loss(&det, &[]).is_err());
    }

    #[test]
    fn weighted_mle_gradient_ignores_reward_parameters() {
        let v = Vocab::new(4, None).unwrap();
        let p = PolicyModel::new(&v, arch(), 12);
        let mut r = RewardModel::new(&v, arch(), 13);
        let recs = records(&v);
        for round in 0..2 {
            if round == 1 {
                r.params_mut().iter_mut().for_each(|x| *x += 0.05);
            }
            let (_, g) = weighted_mle_loss(&p, &r, &recs).unwrap();
            let mut probe = p.clone();
            let fd = finite_diff_grad(
                |x| {
                    probe.params_mut().copy_from_slice(x);
                    weighted_mle_loss(&probe, &r, &recs).unwrap().0
                },
                p.params(),
                FD_STEP,
            )
            .unwrap();
            let cmp = compare_gradients(g.as_slice(), &fd, FD_RTOL, FD_ATOL).unwrap();
            assert!(cmp.passed(), "{cmp:?}");
        }
    }

    #[test]
    fn retrain_schedule() {
        let fired: Vec<usize> = (1..=12000).filter(|&i| retrain_due(i, 12000, 1000)).collect();
        assert_eq!(fired, (1..=6).map(|k| k * 1000).collect::<Vec<_>>());
        assert!((1..=100).all(|i| !retrain_due(i, 100, 51)));
        assert!(retrain_due(50, 100, 50));
        assert!(!retrain_due(0, 100, 50));
    }

    struct Stub {
        log: Vec<(char, usize)>,
    }

    impl AlternationPhases for Stub {
        fn init_reward(&mut self) -> Result<()> {
            self.log.push(('i', 0));
            Ok(())
        }
        fn retrain_reward(&mut self, iter: usize) -> Result<()> {
            self.log.push(('r', iter));
            Ok(())
        }
        fn policy_step(&mut self, iter: usize, _: bool) -> Result<()> {
            self.log.push(('p', iter));
            Ok(())
        }
    }

    #[test]
    fn alternation_order() {
        let mut stub = Stub { log: Vec::new() };
        let fired = run_alternation(6, 2, true, &mut stub).unwrap();
        assert_eq!(fired, vec![2]);
        assert_eq!(stub.log, vec![('i', 0), ('p', 1), ('r', 2), ('p', 2), ('p', 3), ('p', 4), ('p', 5), ('p', 6)]);
        let mut stub = Stub { log: Vec::new() };
        assert!(run_alternation(6, 2, false, &mut stub).unwrap().is_empty());
    }

    #[test]
    fn high_entropy_coefficient_keeps_policy_spread() {
        let v = Vocab::new(5, None).unwrap();
        let task = KeywordTask::generate(v.clone(), 2, 1.0, 1).unwrap();
        let rew_cfg = RewardTrainConfig { m_rew: 20, horizon: 1, ..Default::default() };
        let pol_cfg = PolicyTrainConfig { m_lm: 150, alpha: 10.0, horizon: 1, m_re: 50, ..Default::default() };
        let out = alternate_train(
            PolicyModel::new(&v, arch(), 1),
            RewardModel::new(&v, arch(), 2),
            &task,
            &rew_cfg,
            &pol_cfg,
            None,
        )
        .unwrap();
        let h = math::entropy(&out.policy.probs(0, &[]).unwrap());
        assert!(h >= 0.99 * math::ln(5.0), "{h}");
    }

    #[test]
    fn alternate_train_history_shape() {
        let v = Vocab::new(4, None).unwrap();
        let task = KeywordTask::generate(v.clone(), 1, 1.0, 1).unwrap();
        let rew_cfg = RewardTrainConfig { m_rew: 10, k: 3, horizon: 3, ..Default::default() };
        let pol_cfg = PolicyTrainConfig { m_lm: 20, m_re: 5, horizon: 3, eval_every: 10, ..Default::default() };
        let run = || {
            alternate_train(PolicyModel::new(&v, arch(), 1), RewardModel::new(&v, arch(), 2), &task, &rew_cfg, &pol_cfg, None)
                .unwrap()
        };
        let out = run();
        assert_eq!(out, run());
        assert_eq!(out.history.rows.len(), 20);
        assert_eq!(out.history.retrain_iters, vec![5, 10]);
        let flagged: Vec<usize> = out.history.rows.iter().filter(|r| r.retrain).map(|r| r.iter).collect();
        assert_eq!(flagged, vec![5, 10]);
        assert_eq!(out.history.reward.len(), 3);
        assert!(out.history.rows[9].exact_metric.is_some());
        assert!(out.history.rows[8].exact_metric.is_none());
    }

    #[test]
    fn supervised_modes_need_records() {
        let v = Vocab::new(6, None).unwrap();
        let task = NoisySupervisedTask::generate(v.clone(), 3, 2, 3, 0.5, 4).unwrap();
        let recs = task.records(20, 1).unwrap();
        let rew_cfg = RewardTrainConfig { m_rew: 5, k: 3, horizon: 3, ..Default::default() };
        for mode in [PolicyMode::WeightedMle, PolicyMode::VanillaMle, PolicyMode::SeqWeightedMle] {
            let pol_cfg = PolicyTrainConfig { m_lm: 6, m_re: 2, horizon: 3, mode, ..Default::default() };
            let p = PolicyModel::new(&v, arch(), 1);
            let r = RewardModel::new(&v, arch(), 2);
            assert!(alternate_train(p.clone(), r.clone(), &task, &rew_cfg, &pol_cfg, None).is_err());
            let out = alternate_train(p, r.clone(), &task, &rew_cfg, &pol_cfg, Some(&recs)).unwrap();
            if mode == PolicyMode::VanillaMle {
                assert_eq!(out.reward, r);
                assert!(out.history.retrain_iters.is_empty());
            } else {
                assert_eq!(out.history.retrain_iters, vec![2]);
            }
        }
    }

    #[test]
    fn observer_and_frozen_reward() {
        let v = Vocab::new(4, None).unwrap();
        let task = KeywordTask::generate(v.clone(), 1, 1.0, 2).unwrap();
        let rew_cfg = RewardTrainConfig { m_rew: 5, k: 3, horizon: 3, ..Default::default() };
        let pol_cfg = PolicyTrainConfig { m_lm: 6, m_re: 2, horizon: 3, init_reward: false, retrain: false, ..Default::default() };
        let r = RewardModel::new(&v, arch(), 2);
        let mut seen = Vec::new();
        let out = alternate_train_observed(
            PolicyModel::new(&v, arch(), 1),
            r.clone(),
            &task,
            &rew_cfg,
            &pol_cfg,
            None,
            &mut |iter, _, reward| {
                assert_eq!(reward.params(), r.params());
                seen.push(iter);
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(seen, (1..=6).collect::<Vec<_>>());
        assert_eq!(out.reward, r);
        assert!(out.history.reward.is_empty());

        let err = alternate_train_observed(
            PolicyModel::new(&v, arch(), 1),
            r,
            &task,
            &rew_cfg,
            &pol_cfg,
            None,
            &mut |iter, _, _| if iter == 3 { Err(Error::Observer("stop".into())) } else { Ok(()) },
        );
        assert_eq!(err.unwrap_err(), Error::Observer("stop".into()));
    }

    #[test]
    fn mode_flags_round_trip() {
        for m in PolicyMode::ALL {
            assert_eq!(m.flag().parse::<PolicyMode>().unwrap(), m);
        }
        assert!("ppo".parse::<PolicyMode>().is_err());
        let _ = FnSource(|_: &Trajectory| 0.0);
    }
}
