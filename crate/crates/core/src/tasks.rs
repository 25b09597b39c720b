//! Synthetic preference sources and baseline quantities.
//!
//! Every source scores complete trajectories; a preference ordering is the
//! descending order of those scores. The sources are deterministic given
//! their construction seed.

use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, RngCore};

use crate::domain::{SupervisedRecord, TokenId, Trajectory, Vocab};
use crate::error::{param_err, shape_err};
use crate::math;
use crate::models::{Adam, AdamConfig, GradBuffer, Parametric, PolicyModel};
use crate::oracle::{check_budget, EnumerationBudget};
use crate::{seeded_rng, Error, Result};

/// Anything that can score a complete trajectory for a target.
pub trait PreferenceSource {
    fn score(&self, traj: &Trajectory, target: Option<usize>) -> Result<f64>;

    /// The `(input_id, target)` pairs this source is defined over.
    fn contexts(&self) -> Vec<(usize, Option<usize>)> {
        vec![(0, None)]
    }

    /// Draws one context uniformly from [`PreferenceSource::contexts`].
    fn draw_context(&self, rng: &mut dyn RngCore) -> (usize, Option<usize>) {
        let ctx = self.contexts();
        if ctx.len() == 1 {
            ctx[0]
        } else {
            ctx[rng.random_range(0..ctx.len())]
        }
    }
}

/// Adapts a closure `Fn(&Trajectory) -> f64` into a single-context source.
pub struct FnSource<F>(pub F);

impl<F: Fn(&Trajectory) -> f64> PreferenceSource for FnSource<F> {
    fn score(&self, traj: &Trajectory, _target: Option<usize>) -> Result<f64> {
        Ok((self.0)(traj))
    }
}

/// Upper end of the [`KeywordTask`] quality range.
pub const KEYWORD_QUALITY_MAX: f64 = 0.1;

/// Sequences containing one key token score a bonus on top of the mean
/// per-token quality: `bonus·1{k* ∈ τ} + mean_t q(a_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeywordTask {
    vocab: Vocab,
    keyword: TokenId,
    bonus: f64,
    quality: Vec<f64>,
}

impl KeywordTask {
    pub fn new(vocab: Vocab, keyword: TokenId, bonus: f64, quality: Vec<f64>) -> Result<Self> {
        vocab.check_token(keyword)?;
        if quality.len() != vocab.size() {
            return Err(shape_err!("{} quality entries for {} tokens", quality.len(), vocab.size()));
        }
        if quality.iter().any(|&q| !(0.0..=KEYWORD_QUALITY_MAX).contains(&q)) {
            return Err(param_err!("keyword-task qualities must lie in [0, {KEYWORD_QUALITY_MAX}]"));
        }
        if !(bonus >= KEYWORD_QUALITY_MAX) {
            return Err(param_err!(
                "bonus {bonus} must dominate the quality range {KEYWORD_QUALITY_MAX}"
            ));
        }
        Ok(Self {
            vocab,
            keyword,
            bonus,
            quality,
        })
    }

    /// Random qualities in `[0, 0.1)`; the keyword itself gets the top
    /// quality so that repeating it is optimal.
    pub fn generate(vocab: Vocab, keyword: TokenId, bonus: f64, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let mut quality: Vec<f64> = (0..vocab.size())
            .map(|_| rng.random_range(0.0..KEYWORD_QUALITY_MAX))
            .collect();
        if keyword < quality.len() {
            quality[keyword] = KEYWORD_QUALITY_MAX;
        }
        Self::new(vocab, keyword, bonus, quality)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn keyword(&self) -> TokenId {
        self.keyword
    }

    pub fn bonus(&self) -> f64 {
        self.bonus
    }

    pub fn quality(&self) -> &[f64] {
        &self.quality
    }
}

fn mean_content_quality(tokens: &[TokenId], quality: &[f64], eos: Option<TokenId>) -> f64 {
    let (n, s) = tokens
        .iter()
        .filter(|&&t| Some(t) != eos)
        .fold((0usize, 0.0), |(n, s), &t| (n + 1, s + quality[t]));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn check_tokens(traj: &Trajectory, vocab: &Vocab) -> Result<()> {
    crate::domain::validate_trajectory(traj, vocab)
}

impl PreferenceSource for KeywordTask {
    fn score(&self, traj: &Trajectory, _target: Option<usize>) -> Result<f64> {
        check_tokens(traj, &self.vocab)?;
        let hit = traj.tokens().contains(&self.keyword);
        let q = mean_content_quality(traj.tokens(), &self.quality, self.vocab.eos());
        Ok(if hit { self.bonus } else { 0.0 } + q)
    }
}

/// Mean per-token quality over non-eos tokens; lengths vary through eos.
#[derive(Debug, Clone, PartialEq)]
pub struct AvgQualityTask {
    vocab: Vocab,
    quality: Vec<f64>,
}

impl AvgQualityTask {
    pub fn new(vocab: Vocab, quality: Vec<f64>) -> Result<Self> {
        if vocab.eos().is_none() {
            return Err(param_err!("average-quality task needs an end-of-sequence token"));
        }
        if quality.len() != vocab.size() {
            return Err(shape_err!("{} quality entries for {} tokens", quality.len(), vocab.size()));
        }
        if quality.iter().any(|&q| !(0.0..=1.0).contains(&q)) {
            return Err(param_err!("qualities must lie in [0, 1]"));
        }
        Ok(Self { vocab, quality })
    }

    /// Uniform random qualities in `[0, 1)` (the eos entry is unused).
    pub fn generate(vocab: Vocab, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let quality = (0..vocab.size())
            .map(|t| {
                if Some(t) == vocab.eos() {
                    0.0
                } else {
                    rng.random_range(0.0..1.0)
                }
            })
            .collect();
        Self::new(vocab, quality)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn quality(&self) -> &[f64] {
        &self.quality
    }
}

impl PreferenceSource for AvgQualityTask {
    fn score(&self, traj: &Trajectory, _target: Option<usize>) -> Result<f64> {
        check_tokens(traj, &self.vocab)?;
        Ok(mean_content_quality(traj.tokens(), &self.quality, self.vocab.eos()))
    }
}

/// Supervised data whose targets are clean informative sequences with a
/// fraction of positions replaced by noise tokens.
///
/// Tokens `0..n_informative` are informative, the rest are noise. The task
/// metric is the longest common subsequence between the generated tokens
/// and the clean target, divided by the target length.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySupervisedTask {
    vocab: Vocab,
    n_informative: usize,
    clean: Vec<Vec<TokenId>>,
    noise_rate: f64,
}

impl NoisySupervisedTask {
    pub fn new(vocab: Vocab, n_informative: usize, clean: Vec<Vec<TokenId>>, noise_rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&noise_rate) {
            return Err(param_err!("noise_rate must lie in [0, 1], got {noise_rate}"));
        }
        if n_informative == 0 || n_informative >= vocab.content_tokens().count() {
            return Err(param_err!("need at least one informative and one noise token"));
        }
        if clean.is_empty() {
            return Err(param_err!("need at least one clean target"));
        }
        for target in &clean {
            crate::domain::validate_tokens(target, &vocab)?;
            if target.iter().any(|&t| t >= n_informative) {
                return Err(param_err!("clean targets may only use informative tokens"));
            }
        }
        Ok(Self {
            vocab,
            n_informative,
            clean,
            noise_rate,
        })
    }

    /// `n_inputs` random clean targets of length `target_len`.
    pub fn generate(
        vocab: Vocab,
        n_informative: usize,
        n_inputs: usize,
        target_len: usize,
        noise_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let clean = (0..n_inputs)
            .map(|_| (0..target_len).map(|_| rng.random_range(0..n_informative.max(1))).collect())
            .collect();
        Self::new(vocab, n_informative, clean, noise_rate)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn noise_rate(&self) -> f64 {
        self.noise_rate
    }

    pub fn n_inputs(&self) -> usize {
        self.clean.len()
    }

    pub fn clean_target(&self, input_id: usize) -> Option<&[TokenId]> {
        self.clean.get(input_id).map(Vec::as_slice)
    }

    pub fn is_informative(&self, token: TokenId) -> bool {
        token < self.n_informative
    }

    fn noise_tokens(&self) -> Vec<TokenId> {
        self.vocab
            .content_tokens()
            .filter(|&t| t >= self.n_informative)
            .collect()
    }

    /// `n` noisy records, inputs cycling over the clean targets.
    pub fn records(&self, n: usize, seed: u64) -> Result<Vec<SupervisedRecord>> {
        let mut rng = seeded_rng(seed);
        let noise = self.noise_tokens();
        (0..n)
            .map(|i| {
                let input = i % self.clean.len();
                let target = self.clean[input]
                    .iter()
                    .map(|&tok| {
                        if rng.random::<f64>() < self.noise_rate {
                            noise[rng.random_range(0..noise.len())]
                        } else {
                            tok
                        }
                    })
                    .collect();
                SupervisedRecord::new(input, target, &self.vocab)
            })
            .collect()
    }
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

impl PreferenceSource for NoisySupervisedTask {
    fn score(&self, traj: &Trajectory, target: Option<usize>) -> Result<f64> {
        check_tokens(traj, &self.vocab)?;
        let input = target.unwrap_or(traj.input_id());
        let clean = self
            .clean
            .get(input)
            .ok_or_else(|| shape_err!("no clean target for input {input}"))?;
        Ok(lcs_len(traj.tokens(), clean) as f64 / clean.len() as f64)
    }

    fn contexts(&self) -> Vec<(usize, Option<usize>)> {
        (0..self.clean.len()).map(|i| (i, Some(i))).collect()
    }
}

/// Multipliers of the stepwise prompt metric for incorrect / correct
/// predictions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetricScale {
    pub lambda_wrong: f64,
    pub lambda_right: f64,
}

impl Default for StepMetricScale {
    fn default() -> Self {
        Self {
            lambda_wrong: 180.0,
            lambda_right: 200.0,
        }
    }
}

/// Stepwise prompt metric with the default multipliers (180 / 200).
pub fn step_metric(class_probs: &[f64], true_class: usize) -> Result<f64> {
    step_metric_with(class_probs, true_class, StepMetricScale::default())
}

/// `λ_wrong^{1-Corr} λ_right^{Corr} · Gap` with
/// `Gap = p_true - max_{other} p_other` and `Corr = 1{Gap > 0}`.
pub fn step_metric_with(class_probs: &[f64], true_class: usize, scale: StepMetricScale) -> Result<f64> {
    if class_probs.len() < 2 {
        return Err(param_err!("need at least two classes"));
    }
    if true_class >= class_probs.len() {
        return Err(shape_err!("class {true_class} out of range for {} classes", class_probs.len()));
    }
    if class_probs.iter().any(|p| !(p.is_finite() && *p >= 0.0))
        || (class_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(param_err!("malformed probability vector {class_probs:?}"));
    }
    let p_true = class_probs[true_class];
    let p_other = class_probs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != true_class)
        .map(|(_, &p)| p)
        .fold(f64::NEG_INFINITY, f64::max);
    let lambda = if p_true > p_other {
        scale.lambda_right
    } else {
        scale.lambda_wrong
    };
    Ok(lambda * (p_true - p_other))
}

/// A fixed linear classifier over prompt-token counts standing in for a
/// downstream model: `p(y | prompt, o) = softmax(o + W · counts / T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CountClassifier {
    n_classes: usize,
    vocab_size: usize,
    /// Row-major `[n_classes × vocab_size]`.
    weights: Vec<f64>,
}

impl CountClassifier {
    pub fn new(n_classes: usize, vocab_size: usize, weights: Vec<f64>) -> Result<Self> {
        if n_classes < 2 || weights.len() != n_classes * vocab_size {
            return Err(shape_err!(
                "classifier needs >= 2 classes and {n_classes}×{vocab_size} weights"
            ));
        }
        Ok(Self {
            n_classes,
            vocab_size,
            weights,
        })
    }

    pub fn class_probs(&self, prompt: &[TokenId], observation: &[f64]) -> Result<Vec<f64>> {
        if observation.len() != self.n_classes {
            return Err(shape_err!("observation of length {} for {} classes", observation.len(), self.n_classes));
        }
        let mut logits = observation.to_vec();
        let scale = 1.0 / prompt.len().max(1) as f64;
        for &tok in prompt {
            if tok >= self.vocab_size {
                return Err(Error::TokenOutOfRange {
                    token: tok,
                    size: self.vocab_size,
                });
            }
            for (c, l) in logits.iter_mut().enumerate() {
                *l += scale * self.weights[c * self.vocab_size + tok];
            }
        }
        Ok(math::softmax(&logits))
    }
}

/// Prompt-generation stand-in: a prompt is scored by the mean stepwise
/// metric of a [`CountClassifier`] over labelled observations.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTask {
    vocab: Vocab,
    classifier: CountClassifier,
    observations: Vec<(Vec<f64>, usize)>,
    scale: StepMetricScale,
}

impl PromptTask {
    pub fn new(
        vocab: Vocab,
        classifier: CountClassifier,
        observations: Vec<(Vec<f64>, usize)>,
        scale: StepMetricScale,
    ) -> Result<Self> {
        if observations.is_empty() {
            return Err(param_err!("prompt task needs observations"));
        }
        Ok(Self {
            vocab,
            classifier,
            observations,
            scale,
        })
    }

    /// Random classifier weights in `[-4, 4]` and observations whose logits
    /// lean weakly toward their label.
    pub fn generate(vocab: Vocab, n_classes: usize, n_observations: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let weights = (0..n_classes * vocab.size())
            .map(|_| rng.random_range(-4.0..4.0))
            .collect();
        let classifier = CountClassifier::new(n_classes, vocab.size(), weights)?;
        let observations = (0..n_observations)
            .map(|i| {
                let label = i % n_classes;
                let logits = (0..n_classes)
                    .map(|c| rng.random_range(-1.0..1.0) + if c == label { 0.5 } else { 0.0 })
                    .collect();
                (logits, label)
            })
            .collect();
        Self::new(vocab, classifier, observations, StepMetricScale::default())
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Fraction of observations classified correctly under `prompt`.
    pub fn accuracy(&self, prompt: &[TokenId]) -> Result<f64> {
        let mut right = 0usize;
        for (obs, label) in &self.observations {
            let p = self.classifier.class_probs(prompt, obs)?;
            right += usize::from(math::argmax(&p) == *label);
        }
        Ok(right as f64 / self.observations.len() as f64)
    }
}

impl PreferenceSource for PromptTask {
    fn score(&self, traj: &Trajectory, _target: Option<usize>) -> Result<f64> {
        check_tokens(traj, &self.vocab)?;
        let mut total = 0.0;
        for (obs, label) in &self.observations {
            let p = self.classifier.class_probs(traj.tokens(), obs)?;
            total += step_metric_with(&p, *label, self.scale)?;
        }
        Ok(total / self.observations.len() as f64)
    }
}

/// Reference distribution for the KL penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PriorKind {
    #[default]
    Uniform,
    /// A frozen copy of the policy taken before training.
    InitialPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KLBaselineConfig {
    pub gamma: f64,
    pub c: f64,
    pub prior: PriorKind,
}

impl Default for KLBaselineConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            c: 0.1,
            prior: PriorKind::Uniform,
        }
    }
}

impl KLBaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(param_err!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return Err(param_err!("KL coefficient must be non-negative, got {}", self.c));
        }
        Ok(())
    }
}

/// A concrete prior `π_0(· | s)`.
#[derive(Debug, Clone, Copy)]
pub enum Prior<'a> {
    Uniform,
    Policy(&'a PolicyModel),
    /// The same distribution at every state.
    Table(&'a [f64]),
}

impl Prior<'_> {
    pub fn probs(&self, vocab_size: usize, input_id: usize, prefix: &[TokenId]) -> Result<Vec<f64>> {
        match self {
            Prior::Uniform => Ok(vec![1.0 / vocab_size as f64; vocab_size]),
            Prior::Policy(p) => p.probs(input_id, prefix),
            Prior::Table(t) if t.len() == vocab_size => Ok(t.to_vec()),
            Prior::Table(t) => Err(shape_err!("prior table of length {} for {vocab_size} tokens", t.len())),
        }
    }
}

/// `KL(p ‖ q)` over a finite support.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(shape_err!("KL between distributions of sizes {} and {}", p.len(), q.len()));
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::InfiniteKl(i));
            }
            kl += pi * math::ln(pi / qi);
        }
    }
    Ok(kl)
}

fn kl_at(policy: &PolicyModel, prior: &Prior<'_>, input_id: usize, prefix: &[TokenId]) -> Result<f64> {
    let p = policy.probs(input_id, prefix)?;
    let q = prior.probs(policy.vocab_size(), input_id, prefix)?;
    kl_divergence(&p, &q)
}

/// Per-step reward of the sparse-reward baseline:
/// `-c·KL(π(·|s) ‖ π_0(·|s))`, plus the task reward at the terminal step.
pub fn kl_penalized_reward(
    policy: &PolicyModel,
    prior: &Prior<'_>,
    input_id: usize,
    prefix: &[TokenId],
    token: TokenId,
    terminal_reward: Option<f64>,
    c: f64,
) -> Result<f64> {
    if !(c >= 0.0) {
        return Err(param_err!("KL coefficient must be non-negative, got {c}"));
    }
    if token >= policy.vocab_size() {
        return Err(Error::TokenOutOfRange {
            token,
            size: policy.vocab_size(),
        });
    }
    let penalty = if c == 0.0 { 0.0 } else { c * kl_at(policy, prior, input_id, prefix)? };
    Ok(terminal_reward.unwrap_or(0.0) - penalty)
}

fn is_terminal(policy: &PolicyModel, len: usize, last: TokenId, horizon: usize) -> bool {
    len >= horizon || Some(last) == policy.eos()
}

/// Exact action value of `(s_t, a_t)` under the KL-penalized sparse reward,
/// by enumerating every continuation:
/// `E[γ^{T-1-t} R(s_T) - c Σ_{t'≥t} γ^{t'-t} KL_{t'}]`.
#[allow(clippy::too_many_arguments)]
pub fn kl_q_value(
    policy: &PolicyModel,
    prior: &Prior<'_>,
    input_id: usize,
    prefix: &[TokenId],
    token: TokenId,
    task: &dyn PreferenceSource,
    target: Option<usize>,
    cfg: &KLBaselineConfig,
    horizon: usize,
    budget: EnumerationBudget,
) -> Result<f64> {
    cfg.validate()?;
    if prefix.len() >= horizon {
        return Err(shape_err!("state at step {} beyond horizon {horizon}", prefix.len()));
    }
    let remaining = horizon - 1 - prefix.len();
    check_budget(policy.vocab_size(), remaining, budget)?;
    let mut seq = prefix.to_vec();
    seq.push(token);
    q_recursive(policy, prior, input_id, &mut seq, task, target, cfg, horizon)
}

#[allow(clippy::too_many_arguments)]
fn q_recursive(
    policy: &PolicyModel,
    prior: &Prior<'_>,
    input_id: usize,
    seq: &mut Vec<TokenId>,
    task: &dyn PreferenceSource,
    target: Option<usize>,
    cfg: &KLBaselineConfig,
    horizon: usize,
) -> Result<f64> {
    let t = seq.len() - 1;
    let last = seq[t];
    let reward = kl_penalized_reward(policy, prior, input_id, &seq[..t], last, None, cfg.c)?;
    if is_terminal(policy, seq.len(), last, horizon) {
        let traj = Trajectory::new(input_id, seq.clone());
        return Ok(reward + task.score(&traj, target)?);
    }
    let probs = policy.probs(input_id, seq)?;
    let mut next = 0.0;
    for (a, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        seq.push(a);
        next += p * q_recursive(policy, prior, input_id, seq, task, target, cfg, horizon)?;
        seq.pop();
    }
    Ok(reward + cfg.gamma * next)
}

/// Score-function gradient for one trajectory under the KL-penalized sparse
/// reward: `Σ_t G_t ∇ ln π(a_t|s_t)` with `G_t` the discounted return from
/// `t`. Ascent direction.
pub fn sparse_kl_trajectory_grad(
    policy: &PolicyModel,
    task: &dyn PreferenceSource,
    prior: &Prior<'_>,
    cfg: &KLBaselineConfig,
    traj: &Trajectory,
    target: Option<usize>,
) -> Result<GradBuffer> {
    cfg.validate()?;
    let n = traj.len();
    if n == 0 {
        return Err(Error::EmptyTrajectory);
    }
    let terminal = task.score(traj, target)?;
    let mut rewards = Vec::with_capacity(n);
    for (t, (prefix, a)) in traj.steps().enumerate() {
        let term = (t + 1 == n).then_some(terminal);
        rewards.push(kl_penalized_reward(policy, prior, traj.input_id(), prefix, a, term, cfg.c)?);
    }
    let mut ret = 0.0;
    let mut returns = vec![0.0; n];
    for t in (0..n).rev() {
        ret = rewards[t] + cfg.gamma * ret;
        returns[t] = ret;
    }
    let mut grad = GradBuffer::for_model(policy);
    for (t, (prefix, a)) in traj.steps().enumerate() {
        let trace = policy.trace(traj.input_id(), prefix)?;
        let mut d: Vec<f64> = trace.probs().iter().map(|p| -returns[t] * p).collect();
        d[a] += returns[t];
        use crate::models::Backprop;
        policy.backprop_into(&trace, &d, &mut grad);
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("sparse-reward gradient"));
    }
    Ok(grad)
}

/// Monte-Carlo REINFORCE gradient of the KL-penalized sparse-reward
/// baseline over `batch` sampled trajectories. Ascent direction.
#[allow(clippy::too_many_arguments)]
pub fn sparse_kl_reinforce_step(
    policy: &PolicyModel,
    task: &dyn PreferenceSource,
    prior: &Prior<'_>,
    cfg: &KLBaselineConfig,
    batch: usize,
    horizon: usize,
    rng: &mut crate::SeededRng,
) -> Result<GradBuffer> {
    if batch == 0 {
        return Err(param_err!("batch must be positive"));
    }
    let mut grad = GradBuffer::for_model(policy);
    for _ in 0..batch {
        let (input, target) = task.draw_context(rng);
        let traj = policy.sample_with(rng, input, horizon, 1.0)?;
        grad += &sparse_kl_trajectory_grad(policy, task, prior, cfg, &traj, target)?;
    }
    grad.scale(1.0 / batch as f64);
    Ok(grad)
}

/// Trains `policy` with the sparse-reward + KL-penalty baseline for `steps`
/// Adam ascent steps. Returns the mean task score of each step's batch.
#[allow(clippy::too_many_arguments)]
pub fn train_sparse_kl(
    policy: &mut PolicyModel,
    task: &dyn PreferenceSource,
    cfg: &KLBaselineConfig,
    steps: usize,
    batch: usize,
    horizon: usize,
    optimizer: AdamConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let snapshot = policy.clone();
    let mut adam = Adam::new(optimizer, policy.n_params());
    let mut rng = seeded_rng(seed);
    let mut scores = Vec::with_capacity(steps);
    for _ in 0..steps {
        let prior = match cfg.prior {
            PriorKind::Uniform => Prior::Uniform,
            PriorKind::InitialPolicy => Prior::Policy(&snapshot),
        };
        let mut grad = GradBuffer::for_model(policy);
        let mut mean = 0.0;
        for _ in 0..batch.max(1) {
            let (input, target) = task.draw_context(&mut rng);
            let traj = policy.sample_with(&mut rng, input, horizon, 1.0)?;
            mean += task.score(&traj, target)?;
            grad += &sparse_kl_trajectory_grad(policy, task, &prior, cfg, &traj, target)?;
        }
        let b = batch.max(1) as f64;
        grad.scale(1.0 / b);
        scores.push(mean / b);
        adam.ascend(policy.params_mut(), &grad);
    }
    Ok(scores)
}
