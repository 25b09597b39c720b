//! Experiment configuration (TOML, schema version 1).
//!
//! Every section except `[task]` is optional and falls back to the defaults
//! below. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use prefguide_core::aggregate::Aggregation;
use prefguide_core::domain::{SupervisedRecord, Vocab};
use prefguide_core::models::{AdamConfig, Arch};
use prefguide_core::oracle::EnumerationBudget;
use prefguide_core::rank::{GuidanceLevel, PreferenceLoss, RewardTrainConfig};
use prefguide_core::tasks::{
    AvgQualityTask, KLBaselineConfig, KeywordTask, NoisySupervisedTask, PreferenceSource, PriorKind, PromptTask,
};
use prefguide_core::train::{Estimator, PolicyMode, PolicyTrainConfig};
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub version: u32,
    pub task: TaskSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub reward: RewardSpec,
    #[serde(default)]
    pub policy: PolicySpec,
    #[serde(default)]
    pub run: RunSpec,
    #[serde(default)]
    pub ablate: AblateSpec,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

/// Synthetic task. `seed` is offset by the run seed, so every seed sees its
/// own task instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Keyword {
        vocab_size: usize,
        keyword: usize,
        #[serde(default = "one")]
        bonus: f64,
        #[serde(default)]
        eos: Option<usize>,
        #[serde(default)]
        seed: u64,
    },
    AvgQuality {
        vocab_size: usize,
        eos: usize,
        #[serde(default)]
        seed: u64,
    },
    NoisySupervised {
        vocab_size: usize,
        n_informative: usize,
        n_inputs: usize,
        target_len: usize,
        noise_rate: f64,
        #[serde(default = "default_records")]
        n_records: usize,
        #[serde(default)]
        seed: u64,
    },
    Prompt {
        vocab_size: usize,
        n_classes: usize,
        n_observations: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn one() -> f64 {
    1.0
}

fn default_records() -> usize {
    200
}

/// A task instance built for one seed.
pub enum Task {
    Keyword(KeywordTask),
    AvgQuality(AvgQualityTask),
    NoisySupervised(NoisySupervisedTask, Vec<SupervisedRecord>),
    Prompt(PromptTask),
}

impl Task {
    pub fn source(&self) -> &dyn PreferenceSource {
        match self {
            Task::Keyword(t) => t,
            Task::AvgQuality(t) => t,
            Task::NoisySupervised(t, _) => t,
            Task::Prompt(t) => t,
        }
    }

    pub fn records(&self) -> Option<&[SupervisedRecord]> {
        match self {
            Task::NoisySupervised(_, r) => Some(r),
            _ => None,
        }
    }
}

impl TaskSpec {
    pub fn vocab(&self) -> Result<Vocab> {
        let (size, eos) = match *self {
            TaskSpec::Keyword { vocab_size, eos, .. } => (vocab_size, eos),
            TaskSpec::AvgQuality { vocab_size, eos, .. } => (vocab_size, Some(eos)),
            TaskSpec::NoisySupervised { vocab_size, .. } | TaskSpec::Prompt { vocab_size, .. } => (vocab_size, None),
        };
        Ok(Vocab::new(size, eos)?)
    }

    /// Distinct input ids the task can present.
    pub fn n_inputs(&self) -> usize {
        match *self {
            TaskSpec::NoisySupervised { n_inputs, .. } => n_inputs,
            _ => 1,
        }
    }

    pub fn build(&self, run_seed: u64) -> Result<Task> {
        let vocab = self.vocab()?;
        Ok(match *self {
            TaskSpec::Keyword {
                keyword, bonus, seed, ..
            } => Task::Keyword(KeywordTask::generate(vocab, keyword, bonus, seed.wrapping_add(run_seed))?),
            TaskSpec::AvgQuality { seed, .. } => Task::AvgQuality(AvgQualityTask::generate(vocab, seed.wrapping_add(run_seed))?),
            TaskSpec::NoisySupervised {
                n_informative,
                n_inputs,
                target_len,
                noise_rate,
                n_records,
                seed,
                ..
            } => {
                let task = NoisySupervisedTask::generate(
                    vocab,
                    n_informative,
                    n_inputs,
                    target_len,
                    noise_rate,
                    seed.wrapping_add(run_seed),
                )?;
                let records = task.records(n_records, run_seed)?;
                Task::NoisySupervised(task, records)
            }
            TaskSpec::Prompt {
                n_classes,
                n_observations,
                seed,
                ..
            } => Task::Prompt(PromptTask::generate(vocab, n_classes, n_observations, seed.wrapping_add(run_seed))?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub embed: usize,
    pub hidden: usize,
    pub window: usize,
    pub max_pos: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let a = Arch::default();
        Self {
            embed: a.embed,
            hidden: a.hidden,
            window: a.window,
            max_pos: a.max_pos,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpec {
    Listwise,
    Pairwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSpec {
    pub k: usize,
    /// `sum`, `avg`, `max` or `min` (long names accepted).
    pub agg: String,
    pub beta: f64,
    pub loss: LossSpec,
    pub m_rew: usize,
    pub m_rew_init: Option<usize>,
    pub lr: f64,
    pub group_batch: usize,
    pub early_stop_patience: usize,
    pub holdout_fraction: f64,
    pub eval_every: usize,
    pub temperature: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        let r = RewardTrainConfig::default();
        Self {
            k: r.k,
            agg: "max".into(),
            beta: 2.0,
            loss: LossSpec::Listwise,
            m_rew: r.m_rew,
            m_rew_init: None,
            lr: r.optimizer.lr,
            group_batch: r.group_batch,
            early_stop_patience: r.early_stop_patience,
            holdout_fraction: r.holdout_fraction,
            eval_every: r.eval_every,
            temperature: r.temperature,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorSpec {
    Exact,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSpec {
    Uniform,
    InitialPolicy,
}

/// Policy modes accepted by the runner: every core mode plus the
/// KL-penalized sparse-reward baseline.
pub const SPARSE_KL: &str = "sparse_kl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySpec {
    pub mode: String,
    pub alpha: f64,
    pub m_lm: usize,
    pub m_re: usize,
    pub retrain: bool,
    pub batch_size: usize,
    pub horizon: usize,
    pub lr: f64,
    pub estimator: EstimatorSpec,
    pub baseline_decay: Option<f64>,
    pub eval_every: usize,
    /// State budget for exact metrics.
    pub budget: u64,
    pub kl_gamma: f64,
    pub kl_c: f64,
    pub kl_prior: PriorSpec,
}

impl Default for PolicySpec {
    fn default() -> Self {
        let p = PolicyTrainConfig::default();
        let kl = KLBaselineConfig::default();
        Self {
            mode: p.mode.flag().into(),
            alpha: p.alpha,
            m_lm: p.m_lm,
            m_re: p.m_re,
            retrain: p.retrain,
            batch_size: p.batch_size,
            horizon: p.horizon,
            lr: p.optimizer.lr,
            estimator: EstimatorSpec::Exact,
            baseline_decay: None,
            eval_every: p.eval_every,
            budget: p.budget.max_states,
            kl_gamma: kl.gamma,
            kl_c: kl.c,
            kl_prior: PriorSpec::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    /// Policy iterations between parameter checkpoints; `0` saves only the
    /// final parameters.
    pub checkpoint_every: usize,
    /// Held-out groups for reward rank accuracy in `train-reward`.
    pub eval_groups: usize,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            out: None,
            checkpoint_every: 0,
            eval_groups: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSpec {
    pub k: Vec<usize>,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub agg: Vec<String>,
}

impl Default for AblateSpec {
    fn default() -> Self {
        Self {
            k: vec![2, 3, 5, 7, 9],
            beta: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            alpha: vec![0.03125, 0.0625, 0.125, 0.25, 0.5],
            agg: vec!["sum".into(), "avg".into(), "max".into(), "min".into()],
        }
    }
}

/// Policy trainer selected by `policy.mode`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trainer {
    Guided(PolicyMode),
    SparseKl,
}

impl Trainer {
    pub fn parse(s: &str) -> Result<Self> {
        if s == SPARSE_KL {
            return Ok(Trainer::SparseKl);
        }
        s.parse()
            .map(Trainer::Guided)
            .map_err(|_| CliError::Config(format!("policy.mode: unknown mode `{s}`")))
    }

    pub fn flag(&self) -> &'static str {
        match self {
            Trainer::Guided(m) => m.flag(),
            Trainer::SparseKl => SPARSE_KL,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Checks every cross-field constraint by resolving the core configs.
    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "version: unsupported schema version {} (expected {SCHEMA_VERSION})",
                self.version
            )));
        }
        if self.run.seeds.is_empty() {
            return Err(CliError::Config("run.seeds: seed list is empty".into()));
        }
        self.task.vocab()?;
        self.arch().validate()?;
        let trainer = self.trainer()?;
        let seed = self.run.seeds[0];
        if let Trainer::Guided(mode) = trainer {
            self.reward_config(seed)?.validate()?;
            self.policy_config(seed, mode)?.validate()?;
            if mode.needs_records() && !matches!(self.task, TaskSpec::NoisySupervised { .. }) {
                return Err(CliError::Config(format!(
                    "policy.mode: `{mode}` needs a task with supervised records (kind = \"noisy_supervised\")"
                )));
            }
        } else {
            self.kl_config().validate()?;
        }
        for a in &self.ablate.agg {
            Aggregation::from_flag(a, self.reward.beta)?;
        }
        Ok(())
    }

    pub fn arch(&self) -> Arch {
        Arch {
            embed: self.model.embed,
            hidden: self.model.hidden,
            window: self.model.window,
            max_pos: self.model.max_pos,
            n_inputs: self.task.n_inputs(),
        }
    }

    pub fn trainer(&self) -> Result<Trainer> {
        Trainer::parse(&self.policy.mode)
    }

    pub fn aggregation(&self) -> Result<Aggregation> {
        Aggregation::from_flag(&self.reward.agg, self.reward.beta)
            .map_err(|e| CliError::Config(format!("reward.agg: {e}")))
    }

    pub fn reward_config(&self, seed: u64) -> Result<RewardTrainConfig> {
        let r = &self.reward;
        Ok(RewardTrainConfig {
            m_rew: r.m_rew,
            k: r.k,
            level: GuidanceLevel::Token(self.aggregation()?),
            loss: match r.loss {
                LossSpec::Listwise => PreferenceLoss::Listwise,
                LossSpec::Pairwise => PreferenceLoss::Pairwise,
            },
            optimizer: AdamConfig {
                lr: r.lr,
                ..AdamConfig::default()
            },
            early_stop_patience: r.early_stop_patience,
            holdout_fraction: r.holdout_fraction,
            eval_every: r.eval_every,
            group_batch: r.group_batch,
            horizon: self.policy.horizon,
            temperature: r.temperature,
            seed,
        })
    }

    pub fn policy_config(&self, seed: u64, mode: PolicyMode) -> Result<PolicyTrainConfig> {
        let p = &self.policy;
        Ok(PolicyTrainConfig {
            m_lm: p.m_lm,
            m_re: p.m_re,
            m_rew_init: self.reward.m_rew_init,
            alpha: p.alpha,
            mode,
            batch_size: p.batch_size,
            optimizer: AdamConfig {
                lr: p.lr,
                ..AdamConfig::default()
            },
            horizon: p.horizon,
            seed,
            retrain: p.retrain,
            init_reward: true,
            estimator: match p.estimator {
                EstimatorSpec::Exact => Estimator::Exact,
                EstimatorSpec::Sampled => Estimator::Sampled,
            },
            baseline_decay: p.baseline_decay,
            eval_every: p.eval_every,
            budget: self.budget()?,
        })
    }

    pub fn budget(&self) -> Result<EnumerationBudget> {
        Ok(EnumerationBudget::new(self.policy.budget)?)
    }

    pub fn kl_config(&self) -> KLBaselineConfig {
        KLBaselineConfig {
            gamma: self.policy.kl_gamma,
            c: self.policy.kl_c,
            prior: match self.policy.kl_prior {
                PriorSpec::Uniform => PriorKind::Uniform,
                PriorSpec::InitialPolicy => PriorKind::InitialPolicy,
            },
        }
    }
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub agg: Option<String>,
    pub beta: Option<f64>,
    pub alpha: Option<f64>,
    pub k: Option<usize>,
    pub mode: Option<String>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.run.seeds = vec![s];
        }
        if let Some(o) = &self.out {
            cfg.run.out = Some(o.clone());
        }
        if let Some(a) = &self.agg {
            cfg.reward.agg = a.clone();
        }
        if let Some(b) = self.beta {
            cfg.reward.beta = b;
        }
        if let Some(a) = self.alpha {
            cfg.policy.alpha = a;
        }
        if let Some(k) = self.k {
            cfg.reward.k = k;
        }
        if let Some(m) = &self.mode {
            cfg.policy.mode = m.clone();
        }
        cfg.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [task]
        kind = "keyword"
        vocab_size = 6
        keyword = 2
    "#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.version, SCHEMA_VERSION);
        assert_eq!(cfg.reward.k, 5);
        assert_eq!(cfg.policy.alpha, 0.125);
        assert_eq!(cfg.run.seeds, vec![0]);
        assert_eq!(cfg.aggregation().unwrap(), Aggregation::SoftMax { beta: 2.0 });
        assert_eq!(cfg.trainer().unwrap(), Trainer::Guided(PolicyMode::Reinforce));
    }

    #[test]
    fn missing_task_key_is_named() {
        let err = ExperimentConfig::from_toml("[task]\nkind = \"keyword\"\nvocab_size = 6\n").unwrap_err();
        assert!(err.to_string().contains("keyword"), "{err}");
        let err = ExperimentConfig::from_toml("[policy]\nalpha = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("task"), "{err}");
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let bad = format!("{MINIMAL}\n[policy]\nalpah = 0.1\n");
        assert!(ExperimentConfig::from_toml(&bad).unwrap_err().to_string().contains("alpah"));
        let bad = format!("{MINIMAL}\n[run]\nseeds = []\n");
        assert!(ExperimentConfig::from_toml(&bad).unwrap_err().to_string().contains("seeds"));
        let bad = format!("{MINIMAL}\n[policy]\nmode = \"weighted_mle\"\n");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = format!("{MINIMAL}\n[reward]\nagg = \"median\"\n");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.run.out = Some("x".into());
        cfg.reward.m_rew_init = Some(7);
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn overrides_apply() {
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let o = Overrides {
            seed: Some(9),
            agg: Some("avg".into()),
            k: Some(3),
            mode: Some("seq_reinforce".into()),
            ..Default::default()
        };
        o.apply(&mut cfg).unwrap();
        assert_eq!(cfg.run.seeds, vec![9]);
        assert_eq!(cfg.aggregation().unwrap(), Aggregation::Average);
        assert_eq!(cfg.reward.k, 3);
        assert_eq!(cfg.trainer().unwrap(), Trainer::Guided(PolicyMode::SeqReinforce));
        let bad = Overrides {
            alpha: Some(-1.0),
            ..Default::default()
        };
        assert!(bad.apply(&mut cfg).is_err());
    }
}
