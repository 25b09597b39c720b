//! Subcommand implementations. Every seed is an independent job; per-seed
//! artifacts are written by the job itself and the summary after all jobs
//! finish, so outputs do not depend on scheduling.

use std::path::{Path, PathBuf};

use prefguide_core::domain::Vocab;
use prefguide_core::models::{Adam, AdamConfig, Arch, Parametric, PolicyModel, RewardModel};
use prefguide_core::oracle::{
    compare_gradients, enumerate_sequences, exact_expected_metric, exact_policy_gradient, finite_diff_grad,
    optimal_expected_metric, sequence_probability, EnumerationBudget, Guidance, FD_ATOL, FD_RTOL, FD_STEP,
};
use prefguide_core::rank::{listwise_loss_at, rank_accuracy_at, sample_group, train_reward, RewardHistory};
use prefguide_core::tasks::{sparse_kl_reinforce_step, Prior, PriorKind};
use prefguide_core::train::{alternate_train_observed, reinforce_entropy_step, PolicyMode, ReinforceOpts};
use prefguide_core::{seeded_rng, Error as CoreError};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Trainer};
use crate::output::{write_history, write_reward_history, HistoryRow, SeedResult, Summary};
use crate::{CliError, Result};

/// Offset between a run seed and the reward model's initialization seed.
pub const REWARD_SEED_OFFSET: u64 = 1000;
const EVAL_SEED_MIX: u64 = 0x5851_f42d_4c95_7f2d;

pub const POLICY_METRICS: [&str; 5] = [
    "final_exact_metric",
    "optimal_metric",
    "final_sampled_metric",
    "final_policy_loss",
    "final_reward_rank_accuracy",
];
pub const REWARD_METRICS: [&str; 4] = ["steps", "final_train_loss", "heldout_loss", "heldout_rank_accuracy"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    K,
    Beta,
    Alpha,
    Agg,
    Retrain,
    SeqVsToken,
}

impl Sweep {
    pub fn name(self) -> &'static str {
        match self {
            Sweep::K => "k",
            Sweep::Beta => "beta",
            Sweep::Alpha => "alpha",
            Sweep::Agg => "agg",
            Sweep::Retrain => "retrain",
            Sweep::SeqVsToken => "seq_vs_token",
        }
    }
}

/// Writes the resolved config next to the other artifacts.
pub fn write_resolved(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let path = out.join("config.resolved.toml");
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| CliError::io(&path, e))
}

fn exact_or_none(r: prefguide_core::Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(CoreError::BudgetExceeded { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Runs `job` for every seed on scoped threads and returns results in seed
/// order.
fn per_seed<T: Send>(seeds: &[u64], job: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    let job = &job;
    std::thread::scope(|s| {
        let handles: Vec<_> = seeds.iter().map(|&seed| s.spawn(move || job(seed))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Runtime("seed job panicked".into()))))
            .collect()
    })
}

struct PolicyRun {
    rows: Vec<HistoryRow>,
    reward_phases: Vec<(usize, RewardHistory)>,
    policy: PolicyModel,
    reward: Option<RewardModel>,
}

fn checkpoint_observer<'a>(
    every: usize,
    out: &'a Path,
    prefix: &'a str,
    seed: u64,
    vocab: &'a Vocab,
) -> impl FnMut(usize, &PolicyModel, &RewardModel) -> prefguide_core::Result<()> + 'a {
    move |iter, policy, reward| {
        if every == 0 || iter % every != 0 {
            return Ok(());
        }
        let save = |c: Checkpoint, name: String| {
            c.save(&out.join(name)).map_err(|e| CoreError::Observer(e.to_string()))
        };
        save(Checkpoint::of_policy(policy, vocab), format!("{prefix}policy_seed{seed}_iter{iter}.params"))?;
        save(Checkpoint::of_reward(reward, vocab), format!("{prefix}reward_seed{seed}_iter{iter}.params"))
    }
}

fn guided_run(
    cfg: &ExperimentConfig,
    seed: u64,
    mode: PolicyMode,
    frozen: Option<&RewardModel>,
    out: &Path,
    prefix: &str,
) -> Result<PolicyRun> {
    let task = cfg.task.build(seed)?;
    let vocab = cfg.task.vocab()?;
    let arch = cfg.arch();
    let policy = PolicyModel::new(&vocab, arch, seed);
    let reward = match frozen {
        Some(r) => r.clone(),
        None => RewardModel::new(&vocab, arch, seed.wrapping_add(REWARD_SEED_OFFSET)),
    };
    let mut pol_cfg = cfg.policy_config(seed, mode)?;
    if frozen.is_some() {
        pol_cfg.init_reward = false;
        pol_cfg.retrain = false;
    }
    let rew_cfg = cfg.reward_config(seed)?;
    let mut observer = checkpoint_observer(cfg.run.checkpoint_every, out, prefix, seed, &vocab);
    let o = alternate_train_observed(policy, reward, task.source(), &rew_cfg, &pol_cfg, task.records(), &mut observer)?;
    Ok(PolicyRun {
        rows: o.history.rows.iter().map(HistoryRow::from).collect(),
        reward_phases: o.history.reward,
        policy: o.policy,
        reward: mode.uses_reward().then_some(o.reward),
    })
}

fn sparse_kl_run(cfg: &ExperimentConfig, seed: u64, out: &Path, prefix: &str) -> Result<PolicyRun> {
    let task = cfg.task.build(seed)?;
    let source = task.source();
    let vocab = cfg.task.vocab()?;
    let p = &cfg.policy;
    let kl = cfg.kl_config();
    kl.validate()?;
    let budget = cfg.budget()?;
    let mut policy = PolicyModel::new(&vocab, cfg.arch(), seed);
    let snapshot = policy.clone();
    let mut adam = Adam::new(
        AdamConfig {
            lr: p.lr,
            ..AdamConfig::default()
        },
        policy.n_params(),
    );
    let mut rng = seeded_rng(seed);
    let mut eval_rng = seeded_rng(seed ^ EVAL_SEED_MIX);
    let mut rows = Vec::with_capacity(p.m_lm);
    for iter in 1..=p.m_lm {
        let prior = match kl.prior {
            PriorKind::Uniform => Prior::Uniform,
            PriorKind::InitialPolicy => Prior::Policy(&snapshot),
        };
        let grad = sparse_kl_reinforce_step(&policy, source, &prior, &kl, p.batch_size, p.horizon, &mut rng)?;
        adam.ascend(policy.params_mut(), &grad);
        let (exact, sampled) = if iter % p.eval_every == 0 || iter == p.m_lm {
            let exact = exact_or_none(exact_expected_metric(&policy, source, &vocab, p.horizon, budget))?;
            let mut total = 0.0;
            for _ in 0..p.batch_size {
                let (input, target) = source.draw_context(&mut eval_rng);
                let t = policy.sample_with(&mut eval_rng, input, p.horizon, 1.0)?;
                total += source.score(&t, target)?;
            }
            (exact, Some(total / p.batch_size as f64))
        } else {
            (None, None)
        };
        rows.push(HistoryRow {
            iter,
            mode: Trainer::SparseKl.flag().into(),
            policy_loss: None,
            exact_metric: exact,
            sampled_metric: sampled,
            retrain: false,
        });
        let every = cfg.run.checkpoint_every;
        if every > 0 && iter % every == 0 {
            Checkpoint::of_policy(&policy, &vocab).save(&out.join(format!("{prefix}policy_seed{seed}_iter{iter}.params")))?;
        }
    }
    Ok(PolicyRun {
        rows,
        reward_phases: Vec::new(),
        policy,
        reward: None,
    })
}

/// One policy-training job: trains, writes per-seed artifacts and returns
/// the final metrics.
fn policy_job(
    cfg: &ExperimentConfig,
    seed: u64,
    frozen: Option<&RewardModel>,
    out: &Path,
    prefix: &str,
) -> Result<Vec<Option<f64>>> {
    let run = match cfg.trainer()? {
        Trainer::Guided(mode) => guided_run(cfg, seed, mode, frozen, out, prefix)?,
        Trainer::SparseKl => sparse_kl_run(cfg, seed, out, prefix)?,
    };
    let vocab = cfg.task.vocab()?;
    write_history(&out.join(format!("{prefix}history_seed{seed}.csv")), &run.rows)?;
    if !run.reward_phases.is_empty() {
        write_reward_history(&out.join(format!("{prefix}reward_history_seed{seed}.csv")), &run.reward_phases)?;
    }
    Checkpoint::of_policy(&run.policy, &vocab).save(&out.join(format!("{prefix}policy_seed{seed}.params")))?;
    if let Some(r) = &run.reward {
        Checkpoint::of_reward(r, &vocab).save(&out.join(format!("{prefix}reward_seed{seed}.params")))?;
    }
    let task = cfg.task.build(seed)?;
    let budget = cfg.budget()?;
    let h = cfg.policy.horizon;
    let last = run.rows.last();
    let final_rank = run
        .reward_phases
        .last()
        .and_then(|(_, hist)| hist.rows.iter().rev().find_map(|r| r.rank_accuracy));
    Ok(vec![
        exact_or_none(exact_expected_metric(&run.policy, task.source(), &vocab, h, budget))?,
        exact_or_none(optimal_expected_metric(task.source(), &vocab, h, budget))?,
        last.and_then(|r| r.sampled_metric),
        last.and_then(|r| r.policy_loss),
        final_rank,
    ])
}

fn policy_summary(
    cfg: &ExperimentConfig,
    frozen: Option<&RewardModel>,
    out: &Path,
    sweep: &str,
    setting: &str,
    prefix: &str,
    summary: &mut Summary,
) -> Result<()> {
    let seeds = &cfg.run.seeds;
    let results = per_seed(seeds, |seed| policy_job(cfg, seed, frozen, out, prefix))?;
    for (&seed, metrics) in seeds.iter().zip(results) {
        summary.push(SeedResult {
            sweep: sweep.into(),
            setting: setting.into(),
            seed,
            metrics,
        });
    }
    Ok(())
}

fn finish(summary: Summary, out: &Path) -> Result<Summary> {
    summary.write(&out.join("summary.csv"))?;
    Ok(summary)
}

/// `alternate`: reward fit, policy training
/// and periodic reward re-estimation.
pub fn alternate(cfg: &ExperimentConfig, out: &Path) -> Result<Summary> {
    write_resolved(cfg, out)?;
    let mut summary = Summary::new(POLICY_METRICS.to_vec());
    policy_summary(cfg, None, out, "none", "base", "", &mut summary)?;
    finish(summary, out)
}

/// Policy training against one reward fit (or a frozen checkpoint) without
/// re-estimation.
pub fn train_lm(cfg: &ExperimentConfig, reward: Option<&Path>, out: &Path) -> Result<Summary> {
    let mut cfg = cfg.clone();
    cfg.policy.retrain = false;
    write_resolved(&cfg, out)?;
    let frozen = match reward {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let vocab = cfg.task.vocab()?;
            if ck.vocab != vocab {
                return Err(CliError::Checkpoint(format!(
                    "{}: vocabulary ({} tokens, eos {:?}) does not match the task ({} tokens, eos {:?})",
                    path.display(),
                    ck.vocab.size(),
                    ck.vocab.eos(),
                    vocab.size(),
                    vocab.eos()
                )));
            }
            if ck.arch.n_inputs != cfg.arch().n_inputs {
                return Err(CliError::Checkpoint(format!(
                    "{}: reward expects {} inputs, task has {}",
                    path.display(),
                    ck.arch.n_inputs,
                    cfg.arch().n_inputs
                )));
            }
            Some(ck.into_reward()?)
        }
        None => None,
    };
    let mut summary = Summary::new(POLICY_METRICS.to_vec());
    policy_summary(&cfg, frozen.as_ref(), out, "none", "base", "", &mut summary)?;
    finish(summary, out)
}

/// Reward fit on groups sampled from the initial policy, scored on fresh
/// held-out groups.
pub fn train_reward_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<Summary> {
    write_resolved(cfg, out)?;
    let vocab = cfg.task.vocab()?;
    let arch = cfg.arch();
    let results = per_seed(&cfg.run.seeds, |seed| {
        let task = cfg.task.build(seed)?;
        let policy = PolicyModel::new(&vocab, arch, seed);
        let rew_cfg = cfg.reward_config(seed)?;
        let init = RewardModel::new(&vocab, arch, seed.wrapping_add(REWARD_SEED_OFFSET));
        let (reward, hist) = train_reward(init, &policy, task.source(), &rew_cfg)?;
        let mut rng = seeded_rng(seed ^ EVAL_SEED_MIX);
        let groups = (0..cfg.run.eval_groups.max(1))
            .map(|_| sample_group(&policy, task.source(), rew_cfg.k, rew_cfg.horizon, rew_cfg.temperature, &mut rng))
            .collect::<prefguide_core::Result<Vec<_>>>()?;
        let mut loss = 0.0;
        for g in &groups {
            loss += listwise_loss_at(&reward, g, rew_cfg.level)?.0;
        }
        let acc = rank_accuracy_at(&reward, &groups, rew_cfg.level)?;
        write_reward_history(&out.join(format!("reward_history_seed{seed}.csv")), &[(0, hist.clone())])?;
        Checkpoint::of_reward(&reward, &vocab).save(&out.join(format!("reward_seed{seed}.params")))?;
        Ok(vec![
            Some(hist.rows.len() as f64),
            hist.rows.last().map(|r| r.train_loss),
            Some(loss / groups.len() as f64),
            Some(acc),
        ])
    })?;
    let mut summary = Summary::new(REWARD_METRICS.to_vec());
    for (&seed, metrics) in cfg.run.seeds.iter().zip(results) {
        summary.push(SeedResult {
            sweep: "none".into(),
            setting: "base".into(),
            seed,
            metrics,
        });
    }
    finish(summary, out)
}

fn label(x: f64) -> String {
    format!("{x}")
}

/// Config variants of a sweep, labelled by setting.
pub fn sweep_variants(cfg: &ExperimentConfig, sweep: Sweep) -> Result<Vec<(String, ExperimentConfig)>> {
    let mut out = Vec::new();
    let mut push = |setting: String, edit: &dyn Fn(&mut ExperimentConfig)| -> Result<()> {
        let mut c = cfg.clone();
        edit(&mut c);
        c.validate()
            .map_err(|e| CliError::Config(format!("sweep {} = {setting}: {e}", sweep.name())))?;
        out.push((setting, c));
        Ok(())
    };
    let empty = |name: &str| CliError::Config(format!("ablate.{name}: sweep values are empty"));
    match sweep {
        Sweep::K => {
            if cfg.ablate.k.is_empty() {
                return Err(empty("k"));
            }
            for &k in &cfg.ablate.k {
                push(k.to_string(), &|c| c.reward.k = k)?;
            }
        }
        Sweep::Beta => {
            if cfg.ablate.beta.is_empty() {
                return Err(empty("beta"));
            }
            if cfg.aggregation()?.beta().is_none() {
                return Err(CliError::Config(format!(
                    "reward.agg: beta sweep needs a soft aggregation (max or min), got `{}`",
                    cfg.reward.agg
                )));
            }
            for &b in &cfg.ablate.beta {
                push(label(b), &|c| c.reward.beta = b)?;
            }
        }
        Sweep::Alpha => {
            if cfg.ablate.alpha.is_empty() {
                return Err(empty("alpha"));
            }
            for &a in &cfg.ablate.alpha {
                push(label(a), &|c| c.policy.alpha = a)?;
            }
        }
        Sweep::Agg => {
            if cfg.ablate.agg.is_empty() {
                return Err(empty("agg"));
            }
            for a in &cfg.ablate.agg {
                push(a.clone(), &|c| c.reward.agg = a.clone())?;
            }
        }
        Sweep::Retrain => {
            push("on".into(), &|c| c.policy.retrain = true)?;
            push("off".into(), &|c| c.policy.retrain = false)?;
        }
        Sweep::SeqVsToken => {
            let (token, seq) = match cfg.trainer()? {
                Trainer::Guided(PolicyMode::Reinforce | PolicyMode::SeqReinforce) => {
                    (PolicyMode::Reinforce, PolicyMode::SeqReinforce)
                }
                Trainer::Guided(PolicyMode::WeightedMle | PolicyMode::SeqWeightedMle) => {
                    (PolicyMode::WeightedMle, PolicyMode::SeqWeightedMle)
                }
                other => {
                    return Err(CliError::Config(format!(
                        "policy.mode: `{}` has no sequence-level counterpart",
                        other.flag()
                    )))
                }
            };
            push("token".into(), &|c| c.policy.mode = token.flag().into())?;
            push("sequence".into(), &|c| c.policy.mode = seq.flag().into())?;
        }
    }
    Ok(out)
}

pub fn ablate(cfg: &ExperimentConfig, sweep: Sweep, out: &Path) -> Result<Summary> {
    let variants = sweep_variants(cfg, sweep)?;
    write_resolved(cfg, out)?;
    let mut summary = Summary::new(POLICY_METRICS.to_vec());
    for (setting, c) in &variants {
        let prefix = format!("{}-{}_", sweep.name(), setting);
        policy_summary(c, None, out, sweep.name(), setting, &prefix, &mut summary)?;
    }
    finish(summary, out)
}

/// One line of the oracle check table.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub seed: u64,
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Enumeration-based self-checks on the configured task and models.
pub fn oracle_check(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<Check>> {
    write_resolved(cfg, out)?;
    let vocab = cfg.task.vocab()?;
    let arch: Arch = cfg.arch();
    let budget: EnumerationBudget = cfg.budget()?;
    let h = cfg.policy.horizon;
    let alpha = cfg.policy.alpha;
    let level = cfg.reward_config(0)?.level;
    let results = per_seed(&cfg.run.seeds, |seed| {
        let task = cfg.task.build(seed)?;
        let source = task.source();
        let policy = PolicyModel::new(&vocab, arch, seed);
        let reward = RewardModel::new(&vocab, arch, seed.wrapping_add(REWARD_SEED_OFFSET));
        let mut checks = Vec::new();
        let mut add = |name, value: f64, tolerance: f64| {
            checks.push(Check {
                seed,
                name,
                value,
                tolerance,
                passed: value <= tolerance,
            })
        };

        let seqs = enumerate_sequences(&vocab, h, budget)?;
        let probs = seqs
            .iter()
            .map(|s| sequence_probability(&policy, 0, s))
            .collect::<prefguide_core::Result<Vec<_>>>()?;
        add("probability_mass_error", (probs.iter().sum::<f64>() - 1.0).abs(), 1e-9);

        let exact = exact_expected_metric(&policy, source, &vocab, h, budget)?;
        let best = optimal_expected_metric(source, &vocab, h, budget)?;
        add("exact_minus_optimal", (exact - best).max(0.0), 1e-12);

        let batch: Vec<_> = seqs
            .into_iter()
            .map(|s| prefguide_core::domain::Trajectory::new(0, s))
            .collect();
        let est = reinforce_entropy_step(&policy, &reward, &batch, Some(&probs), alpha, ReinforceOpts::default())?;
        let oracle = exact_policy_gradient(
            &policy,
            Guidance::Reward {
                model: &reward,
                input_id: 0,
            },
            alpha,
            &vocab,
            h,
            budget,
        )?;
        let cmp = compare_gradients(est.grad.as_slice(), oracle.as_slice(), 1e-6, 1e-12)?;
        add(
            "estimator_vs_oracle_failures",
            cmp.first_failure.map_or(0.0, |_| 1.0),
            0.0,
        );

        let mut rng = seeded_rng(seed ^ EVAL_SEED_MIX);
        let group = sample_group(&policy, source, cfg.reward.k, h, 1.0, &mut rng)?;
        let (_, g) = listwise_loss_at(&reward, &group, level)?;
        let mut probe = reward.clone();
        let fd = finite_diff_grad(
            |p| {
                probe.params_mut().copy_from_slice(p);
                listwise_loss_at(&probe, &group, level).map_or(f64::NAN, |l| l.0)
            },
            reward.params(),
            FD_STEP,
        )?;
        let cmp = compare_gradients(g.as_slice(), &fd, FD_RTOL, FD_ATOL)?;
        add("listwise_fd_failures", cmp.first_failure.map_or(0.0, |_| 1.0), 0.0);
        Ok(checks)
    })?;
    let checks: Vec<Check> = results.into_iter().flatten().collect();
    let path = out.join("oracle_check.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Csv(path.display().to_string(), e))?;
    let err = |e| CliError::Csv(path.display().to_string(), e);
    w.write_record(["seed", "check", "value", "tolerance", "passed"]).map_err(err)?;
    for c in &checks {
        w.write_record([
            c.seed.to_string(),
            c.name.to_string(),
            c.value.to_string(),
            c.tolerance.to_string(),
            u8::from(c.passed).to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(checks)
}

/// Output directory: explicit `--out` / `run.out`, else
/// `$PREFGUIDE_OUT/<config stem>/<subcommand>`, else
/// `runs/<config stem>/<subcommand>`.
pub fn resolve_out(cfg: &ExperimentConfig, config_path: &Path, subcommand: &str, env_root: Option<PathBuf>) -> PathBuf {
    if let Some(o) = &cfg.run.out {
        return o.clone();
    }
    let stem = config_path
        .file_stem()
        .map_or_else(|| "experiment".into(), |s| s.to_string_lossy().into_owned());
    env_root.unwrap_or_else(|| PathBuf::from("runs")).join(stem).join(subcommand)
}
