//! Acceptance suite. Each test prints one `criterion N ... PASS|FAIL` line
//! and fails when the criterion, including its runtime bound, is not met.
//!
//! Tests hold a shared lock so the measured runtime of one criterion is not
//! inflated by another running concurrently.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use prefguide_core::aggregate::{aggregate, Aggregation};
use prefguide_core::domain::{PreferenceGroup, SupervisedRecord, Trajectory, Vocab};
use prefguide_core::math;
use prefguide_core::models::{Arch, Parametric, PolicyModel, RewardModel};
use prefguide_core::oracle::{
    compare_gradients, enumerate_permutation_probs, enumerate_sequences, exact_conditional_metric,
    exact_expected_metric, exact_policy_gradient, finite_diff_grad, optimal_expected_metric, sequence_probability,
    EnumerationBudget, Guidance, FD_ATOL, FD_RTOL, FD_STEP,
};
use prefguide_core::rank::{
    listwise_loss, pairwise_loss, rank_accuracy, sample_group, GuidanceLevel, RewardTrainConfig,
};
use prefguide_core::seeded_rng;
use prefguide_core::tasks::{
    kl_q_value, step_metric, AvgQualityTask, KLBaselineConfig, KeywordTask, NoisySupervisedTask, Prior, PriorKind,
};
use prefguide_core::train::{
    alternate_train, reinforce_entropy_step, run_alternation, weighted_mle_loss, AlternationPhases, Estimator,
    PolicyMode, PolicyTrainConfig, ReinforceOpts,
};
use prefguide_core::Result;
use rand::Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn report(n: u32, name: &str, pass: bool, detail: String, elapsed: Duration, limit: Duration) {
    let ok = pass && elapsed < limit;
    println!(
        "criterion {n:>2} {:<4} {name}: {detail} [{:.2?} / limit {:.0?}]",
        if ok { "PASS" } else { "FAIL" },
        elapsed,
        limit
    );
    assert!(pass, "criterion {n} failed: {detail}");
    assert!(elapsed < limit, "criterion {n} exceeded its runtime bound: {elapsed:.2?}");
}

fn lock() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn small_arch(n_inputs: usize) -> Arch {
    Arch {
        embed: 4,
        hidden: 8,
        window: 3,
        max_pos: 8,
        n_inputs,
    }
}

fn random_traj(rng: &mut impl Rng, vocab_size: usize, max_len: usize) -> Trajectory {
    let len = rng.random_range(1..=max_len);
    Trajectory::new(0, (0..len).map(|_| rng.random_range(0..vocab_size)).collect())
}

#[test]
fn c01_pairwise_listwise_equivalence() {
    let _g = lock();
    let t0 = Instant::now();
    let v = Vocab::new(7, None).unwrap();
    let mut rng = seeded_rng(1);
    let mut worst_loss = 0.0f64;
    let mut worst_grad = 0.0f64;
    for i in 0..100 {
        let reward = RewardModel::new(&v, Arch::default(), 1000 + i);
        let a = random_traj(&mut rng, 7, 8);
        let b = random_traj(&mut rng, 7, 8);
        let group = PreferenceGroup::new(0, None, vec![a.clone(), b.clone()], vec![0, 1]).unwrap();
        let (lw, gw) = listwise_loss(&reward, &group, Aggregation::Sum).unwrap();
        let (pw, gp) = pairwise_loss(&reward, &a, &b).unwrap();
        worst_loss = worst_loss.max((lw - pw).abs());
        for (x, y) in gw.as_slice().iter().zip(gp.as_slice()) {
            worst_grad = worst_grad.max((x - y).abs());
        }
    }
    report(
        1,
        "listwise K=2 Sum equals pairwise",
        worst_loss <= 1e-12 && worst_grad <= 1e-12,
        format!("100 instances, max |Δloss| = {worst_loss:.1e}, max |Δgrad| = {worst_grad:.1e} (tol 1e-12)"),
        t0.elapsed(),
        Duration::from_secs(5),
    );
}

#[test]
fn c02_plackett_luce_normalization() {
    let _g = lock();
    let t0 = Instant::now();
    let mut rng = seeded_rng(2);
    let mut worst = 0.0f64;
    for k in 2..=4 {
        for _ in 0..50 {
            let evals: Vec<f64> = (0..k).map(|_| rng.random_range(-10.0..10.0)).collect();
            let total: f64 = enumerate_permutation_probs(&evals).unwrap().iter().map(|(_, p)| p).sum();
            worst = worst.max((total - 1.0).abs());
        }
    }
    report(
        2,
        "permutation probabilities sum to one",
        worst <= 1e-9,
        format!("K in 2..=4, 50 vectors each, max |Σp - 1| = {worst:.1e} (tol 1e-9)"),
        t0.elapsed(),
        Duration::from_secs(5),
    );
}

#[test]
fn c03_unit_reward_aggregation() {
    let _g = lock();
    let t0 = Instant::now();
    let c = prefguide_core::aggregate::mean_length_of([5, 15]).unwrap();
    let short = vec![1.0; 5];
    let long = vec![1.0; 15];
    let sums = [
        aggregate(&short, c, Aggregation::Sum).unwrap().value,
        aggregate(&long, c, Aggregation::Sum).unwrap().value,
    ];
    let avgs = [
        aggregate(&short, c, Aggregation::Average).unwrap().value,
        aggregate(&long, c, Aggregation::Average).unwrap().value,
    ];
    report(
        3,
        "unit rewards, lengths {5, 15}",
        c == 10.0 && sums == [5.0, 15.0] && avgs == [10.0, 10.0],
        format!("C = {c}, e_sum = {sums:?}, e_avg = {avgs:?} (exact)"),
        t0.elapsed(),
        Duration::from_secs(1),
    );
}

fn random_group(rng: &mut impl Rng, v: &Vocab, k: usize) -> PreferenceGroup {
    let trajs: Vec<Trajectory> = (0..k).map(|_| random_traj(rng, v.size(), 5)).collect();
    let mut ordering: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        ordering.swap(i, rng.random_range(0..=i));
    }
    PreferenceGroup::new(0, None, trajs, ordering).unwrap()
}

fn fd_check(analytic: &[f64], numeric: &[f64]) -> (bool, f64) {
    let c = compare_gradients(analytic, numeric, FD_RTOL, FD_ATOL).unwrap();
    (c.passed(), c.max_abs_err)
}

#[test]
fn c04_gradient_suite() {
    let _g = lock();
    let t0 = Instant::now();
    let v = Vocab::new(5, None).unwrap();
    let arch = small_arch(2);
    let aggs = [
        Aggregation::Sum,
        Aggregation::Average,
        Aggregation::SoftMax { beta: 2.0 },
        Aggregation::SoftMin { beta: 0.5 },
    ];
    let mut rng = seeded_rng(4);
    let mut results = Vec::new();

    let mut pass = 0;
    let mut worst = 0.0f64;
    for i in 0..20 {
        let reward = RewardModel::new(&v, arch, 40 + i);
        let k = rng.random_range(2..=5);
        let group = random_group(&mut rng, &v, k);
        let agg = aggs[i as usize % 4];
        let (_, g) = listwise_loss(&reward, &group, agg).unwrap();
        let mut probe = reward.clone();
        let fd = finite_diff_grad(
            |p| {
                probe.params_mut().copy_from_slice(p);
                listwise_loss(&probe, &group, agg).unwrap().0
            },
            reward.params(),
            FD_STEP,
        )
        .unwrap();
        let (ok, rel) = fd_check(g.as_slice(), &fd);
        pass += usize::from(ok);
        worst = worst.max(rel);
    }
    results.push(("listwise_loss", pass, worst));

    let (mut pass, mut worst) = (0, 0.0f64);
    for i in 0..20 {
        let reward = RewardModel::new(&v, arch, 60 + i);
        let (a, b) = (random_traj(&mut rng, 5, 5), random_traj(&mut rng, 5, 5));
        let (_, g) = pairwise_loss(&reward, &a, &b).unwrap();
        let mut probe = reward.clone();
        let fd = finite_diff_grad(
            |p| {
                probe.params_mut().copy_from_slice(p);
                pairwise_loss(&probe, &a, &b).unwrap().0
            },
            reward.params(),
            FD_STEP,
        )
        .unwrap();
        let (ok, rel) = fd_check(g.as_slice(), &fd);
        pass += usize::from(ok);
        worst = worst.max(rel);
    }
    results.push(("pairwise_loss", pass, worst));

    let (mut pass, mut worst) = (0, 0.0f64);
    for i in 0..20 {
        let policy = PolicyModel::new(&v, arch, 80 + i);
        let reward = RewardModel::new(&v, arch, 100 + i);
        let records: Vec<SupervisedRecord> = (0..3)
            .map(|j| {
                let t = random_traj(&mut rng, 5, 5);
                SupervisedRecord::new(j % 2, t.tokens().to_vec(), &v).unwrap()
            })
            .collect();
        let (_, g) = weighted_mle_loss(&policy, &reward, &records).unwrap();
        let mut probe = policy.clone();
        let fd = finite_diff_grad(
            |p| {
                probe.params_mut().copy_from_slice(p);
                weighted_mle_loss(&probe, &reward, &records).unwrap().0
            },
            policy.params(),
            FD_STEP,
        )
        .unwrap();
        let (ok, rel) = fd_check(g.as_slice(), &fd);
        pass += usize::from(ok);
        worst = worst.max(rel);
    }
    results.push(("weighted_mle_loss", pass, worst));

    let (mut pass, mut worst) = (0, 0.0f64);
    for i in 0..20 {
        let policy = PolicyModel::new(&v, arch, 120 + i);
        let reward = RewardModel::new(&v, arch, 140 + i);
        let batch: Vec<Trajectory> = (0..3).map(|_| random_traj(&mut rng, 5, 5)).collect();
        let alpha = [0.0, 0.125, 1.0][i as usize % 3];
        let opts = ReinforceOpts::default();
        let obj = reinforce_entropy_step(&policy, &reward, &batch, None, alpha, opts).unwrap();
        let mut probe = policy.clone();
        let fd = finite_diff_grad(
            |p| {
                probe.params_mut().copy_from_slice(p);
                reinforce_entropy_step(&probe, &reward, &batch, None, alpha, opts).unwrap().value
            },
            policy.params(),
            FD_STEP,
        )
        .unwrap();
        let (ok, rel) = fd_check(obj.grad.as_slice(), &fd);
        pass += usize::from(ok);
        worst = worst.max(rel);
    }
    results.push(("exact-mode REINFORCE+entropy objective", pass, worst));

    let all = results.iter().all(|&(_, p, _)| p == 20);
    let detail = results
        .iter()
        .map(|(n, p, w)| format!("{n} {p}/20 (max abs err {w:.1e})"))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        4,
        "analytic gradients vs central differences",
        all,
        format!("{detail}; h = 1e-5, rtol 1e-4, atol 1e-8"),
        t0.elapsed(),
        Duration::from_secs(60),
    );
}

fn exact_estimator_matches(v: &Vocab, horizon: usize, seed: u64, alpha: f64) -> f64 {
    let arch = Arch {
        n_inputs: 2,
        ..Arch::default()
    };
    let budget = EnumerationBudget::new(10_000).unwrap();
    let policy = PolicyModel::new(v, arch, seed);
    let reward = RewardModel::new(v, arch, seed + 1);
    let seqs = enumerate_sequences(v, horizon, budget).unwrap();
    let weights: Vec<f64> = seqs.iter().map(|s| sequence_probability(&policy, 1, s).unwrap()).collect();
    let batch: Vec<Trajectory> = seqs.into_iter().map(|s| Trajectory::new(1, s)).collect();
    let est = reinforce_entropy_step(&policy, &reward, &batch, Some(&weights), alpha, ReinforceOpts::default())
        .unwrap()
        .grad;
    let oracle = exact_policy_gradient(
        &policy,
        Guidance::Reward {
            model: &reward,
            input_id: 1,
        },
        alpha,
        v,
        horizon,
        budget,
    )
    .unwrap();
    let c = compare_gradients(est.as_slice(), oracle.as_slice(), 1e-6, 1e-12).unwrap();
    if c.passed() {
        c.max_abs_err
    } else {
        f64::INFINITY
    }
}

#[test]
fn c05_estimator_oracle_equivalence() {
    let _g = lock();
    let t0 = Instant::now();
    let instances = [
        (Vocab::new(3, None).unwrap(), 2, 0.0),
        (Vocab::new(3, None).unwrap(), 2, 0.125),
        (Vocab::new(4, Some(3)).unwrap(), 3, 0.5),
        (Vocab::new(6, None).unwrap(), 5, 0.125),
        (Vocab::new(10, Some(0)).unwrap(), 4, 0.25),
    ];
    let mut exact_worst = 0.0f64;
    for (i, (v, h, a)) in instances.iter().enumerate() {
        exact_worst = exact_worst.max(exact_estimator_matches(v, *h, 10 + i as u64, *a));
    }

    // Sampled estimator: fixed-length vocabulary so every draw has T steps.
    let v = Vocab::new(3, None).unwrap();
    let horizon = 3;
    let alpha = 0.125;
    let arch = Arch {
        n_inputs: 2,
        ..Arch::default()
    };
    let policy = PolicyModel::new(&v, arch, 51);
    let reward = RewardModel::new(&v, arch, 52);
    let exact = exact_policy_gradient(
        &policy,
        Guidance::Reward {
            model: &reward,
            input_id: 0,
        },
        alpha,
        &v,
        horizon,
        EnumerationBudget::default(),
    )
    .unwrap();
    let n_dirs = 5;
    let mut dir_rng = seeded_rng(53);
    let mut dirs: Vec<Vec<f64>> = vec![exact.as_slice().to_vec()];
    for _ in 1..n_dirs {
        dirs.push((0..exact.len()).map(|_| dir_rng.random_range(-1.0..1.0)).collect());
    }
    for d in &mut dirs {
        let n = math::sqrt(math::dot(d, d));
        d.iter_mut().for_each(|x| *x /= n);
    }
    let draws = 100_000;
    let mut sums = vec![0.0; n_dirs];
    let mut sq = vec![0.0; n_dirs];
    let mut rng = seeded_rng(54);
    let opts = ReinforceOpts {
        estimator: Estimator::Sampled,
        baseline: 0.0,
    };
    for _ in 0..draws {
        let traj = policy.sample_with(&mut rng, 0, horizon, 1.0).unwrap();
        let g = reinforce_entropy_step(&policy, &reward, &[traj], None, alpha, opts).unwrap().grad;
        for (j, d) in dirs.iter().enumerate() {
            let x = math::dot(d, g.as_slice());
            sums[j] += x;
            sq[j] += x * x;
        }
    }
    let n = draws as f64;
    let mut z_max = 0.0f64;
    for j in 0..n_dirs {
        let mean = sums[j] / n;
        let var = (sq[j] - n * mean * mean) / (n - 1.0);
        let se = math::sqrt(var / n);
        let target = math::dot(&dirs[j], exact.as_slice());
        z_max = z_max.max((mean - target).abs() / se);
    }
    report(
        5,
        "estimator vs enumeration oracle",
        exact_worst.is_finite() && z_max <= 3.0,
        format!(
            "exact mode on {} instances with |V|^T <= 1e4: max abs err {exact_worst:.1e} (rtol 1e-6); \
             sampled mode, 1e5 draws: max |mean - exact| = {z_max:.2} SE over {n_dirs} projections (limit 3)",
            instances.len()
        ),
        t0.elapsed(),
        Duration::from_secs(120),
    );
}

struct KeywordRun {
    ratio: f64,
    metric: f64,
    keyword_top: f64,
}

fn keyword_run(
    vocab_size: usize,
    horizon: usize,
    mode: PolicyMode,
    seed: u64,
    budget: EnumerationBudget,
) -> KeywordRun {
    let keyword = 3;
    let v = Vocab::new(vocab_size, None).unwrap();
    let task = KeywordTask::generate(v.clone(), keyword, 1.0, 100 + seed).unwrap();
    let rew_cfg = RewardTrainConfig {
        m_rew: 50,
        k: 5,
        level: GuidanceLevel::Token(Aggregation::SoftMax { beta: 2.0 }),
        horizon,
        seed,
        ..Default::default()
    };
    let pol_cfg = PolicyTrainConfig {
        m_lm: 300,
        m_re: 50,
        m_rew_init: Some(200),
        alpha: 0.125,
        mode,
        batch_size: 8,
        horizon,
        seed,
        eval_every: 300,
        ..Default::default()
    };
    let out = alternate_train(
        PolicyModel::new(&v, Arch::default(), seed),
        RewardModel::new(&v, Arch::default(), seed + 1000),
        &task,
        &rew_cfg,
        &pol_cfg,
        None,
    )
    .unwrap();
    let metric = exact_expected_metric(&out.policy, &task, &v, horizon, budget).unwrap();
    let optimal = optimal_expected_metric(&task, &v, horizon, budget).unwrap();
    let (mut top, mut n) = (0usize, 0usize);
    for i in 0..40 {
        let traj = out.policy.sample(0, horizon, 1.0, 5000 + i).unwrap();
        for t in 0..traj.len() {
            let r = out.reward.rewards_all_tokens(0, traj.prefix(t)).unwrap();
            n += 1;
            top += usize::from((0..vocab_size).all(|a| a == keyword || r[keyword] > r[a]));
        }
    }
    KeywordRun {
        ratio: metric / optimal,
        metric,
        keyword_top: top as f64 / n as f64,
    }
}

#[test]
fn c06_keyword_task_efficacy() {
    let _g = lock();
    let t0 = Instant::now();
    let budget = EnumerationBudget::new(4_000_000).unwrap();
    let runs: Vec<KeywordRun> = (0..5)
        .map(|s| keyword_run(20, 5, PolicyMode::Reinforce, s, budget))
        .collect();
    let ratios: Vec<f64> = runs.iter().map(|r| r.ratio).collect();
    let tops: Vec<f64> = runs.iter().map(|r| r.keyword_top).collect();
    let (mr, mt) = (math::median(&ratios), math::median(&tops));
    report(
        6,
        "keyword task, |V|=20, T=5, K=5, soft-max aggregation, alpha=1/8",
        mr >= 0.8 && mt >= 0.95,
        format!(
            "median exact/optimal = {mr:.3} (need >= 0.8), per seed {ratios:.3?}; \
             median share of policy-sampled contexts with keyword strictly top = {mt:.3} (need >= 0.95)"
        ),
        t0.elapsed(),
        Duration::from_secs(180),
    );
}

#[test]
fn c07_average_vs_sum_aggregation() {
    let _g = lock();
    let t0 = Instant::now();
    let (k, horizon) = (5, 8);
    let v = Vocab::new(6, Some(5)).unwrap();
    let (mut avg, mut sum) = (Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let task = AvgQualityTask::generate(v.clone(), 500 + seed).unwrap();
        let policy = PolicyModel::new(&v, Arch::default(), seed);
        let mut rng = seeded_rng(seed + 77);
        let held: Vec<PreferenceGroup> = (0..200)
            .map(|_| sample_group(&policy, &task, k, horizon, 1.0, &mut rng).unwrap())
            .collect();
        for (agg, out) in [(Aggregation::Average, &mut avg), (Aggregation::Sum, &mut sum)] {
            let cfg = RewardTrainConfig {
                m_rew: 200,
                k,
                level: GuidanceLevel::Token(agg),
                horizon,
                seed,
                ..Default::default()
            };
            let (r, _) = prefguide_core::rank::train_reward(
                RewardModel::new(&v, Arch::default(), seed + 1000),
                &policy,
                &task,
                &cfg,
            )
            .unwrap();
            out.push(rank_accuracy(&r, &held, agg).unwrap());
        }
    }
    let (ma, ms) = (math::median(&avg), math::median(&sum));
    report(
        7,
        "average vs sum aggregation on variable-length sequences",
        ma >= ms,
        format!("median held-out rank accuracy: average {ma:.3}, sum {ms:.3}; per seed avg {avg:.3?} sum {sum:.3?}"),
        t0.elapsed(),
        Duration::from_secs(180),
    );
}

#[test]
fn c08_weighted_vs_vanilla_mle() {
    let _g = lock();
    let t0 = Instant::now();
    let v = Vocab::new(8, None).unwrap();
    let horizon = 4;
    let arch = Arch {
        n_inputs: 2,
        ..Arch::default()
    };
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..5u64 {
        let task = NoisySupervisedTask::generate(v.clone(), 4, 2, horizon, 0.5, 900 + seed).unwrap();
        let records = task.records(200, seed).unwrap();
        let rew_cfg = RewardTrainConfig {
            m_rew: 50,
            k: 3,
            level: GuidanceLevel::Token(Aggregation::Average),
            horizon,
            seed,
            ..Default::default()
        };
        let metric = |mode| {
            let pol_cfg = PolicyTrainConfig {
                m_lm: 300,
                m_re: 50,
                m_rew_init: Some(200),
                mode,
                horizon,
                seed,
                eval_every: 300,
                ..Default::default()
            };
            let out = alternate_train(
                PolicyModel::new(&v, arch, seed),
                RewardModel::new(&v, arch, seed + 1000),
                &task,
                &rew_cfg,
                &pol_cfg,
                Some(&records),
            )
            .unwrap();
            exact_expected_metric(&out.policy, &task, &v, horizon, EnumerationBudget::default()).unwrap()
        };
        let (w, m) = (metric(PolicyMode::WeightedMle), metric(PolicyMode::VanillaMle));
        wins += usize::from(w >= m);
        detail.push(format!("{w:.3}/{m:.3}"));
    }
    report(
        8,
        "weighted vs vanilla MLE, noise rate 0.5",
        wins >= 4,
        format!("weighted >= vanilla in {wins}/5 seeds (need 4); weighted/vanilla exact metric {}", detail.join(" ")),
        t0.elapsed(),
        Duration::from_secs(180),
    );
}

struct Markers {
    retrain: Vec<bool>,
}

impl AlternationPhases for Markers {
    fn init_reward(&mut self) -> Result<()> {
        Ok(())
    }
    fn retrain_reward(&mut self, _iter: usize) -> Result<()> {
        Ok(())
    }
    fn policy_step(&mut self, _iter: usize, retrained: bool) -> Result<()> {
        self.retrain.push(retrained);
        Ok(())
    }
}

#[test]
fn c09_retrain_schedule() {
    let _g = lock();
    let t0 = Instant::now();
    let mut stub = Markers { retrain: Vec::new() };
    let fired = run_alternation(12_000, 1_000, true, &mut stub).unwrap();
    let marked: Vec<usize> = stub
        .retrain
        .iter()
        .enumerate()
        .filter(|(_, &r)| r)
        .map(|(i, _)| i + 1)
        .collect();
    let expected: Vec<usize> = (1..=6).map(|k| k * 1000).collect();
    let mut degenerate = Markers { retrain: Vec::new() };
    let none = run_alternation(100, 51, true, &mut degenerate).unwrap();
    let pass = marked == expected
        && fired == expected
        && stub.retrain.len() == 12_000
        && marked.iter().all(|&i| 2 * i <= 12_000)
        && none.is_empty();
    report(
        9,
        "retrain schedule M_LM=12000, M_re=1000",
        pass,
        format!("retrain markers at {marked:?}; M_re > M_LM/2 gives {} retrains", none.len()),
        t0.elapsed(),
        Duration::from_secs(1),
    );
}

#[test]
fn c10_sequence_vs_token_guidance() {
    let _g = lock();
    let t0 = Instant::now();
    // Sequences longer than the reward's context window.
    let budget = EnumerationBudget::new(2_000_000).unwrap();
    let token: Vec<f64> = (0..5)
        .map(|s| keyword_run(6, 8, PolicyMode::Reinforce, s, budget).metric)
        .collect();
    let seq: Vec<f64> = (0..5)
        .map(|s| keyword_run(6, 8, PolicyMode::SeqReinforce, s, budget).metric)
        .collect();
    let (mt, st) = (math::median(&token), math::mean_std(&token).1);
    let (ms, ss) = (math::median(&seq), math::mean_std(&seq).1);
    report(
        10,
        "token-level vs sequence-level guidance on the keyword task",
        mt >= ms && ss >= st,
        format!("median final metric token {mt:.4} vs sequence {ms:.4}; sd token {st:.4} vs sequence {ss:.4}"),
        t0.elapsed(),
        Duration::from_secs(300),
    );
}

#[test]
fn c11_step_metric_values() {
    let _g = lock();
    let t0 = Instant::now();
    let a = step_metric(&[0.7, 0.3], 0).unwrap();
    let b = step_metric(&[0.3, 0.7], 0).unwrap();
    let c = step_metric(&[0.5, 0.5], 0).unwrap();
    report(
        11,
        "stepwise metric unit values",
        a == 80.0 && b == -72.0 && c == 0.0,
        format!("[0.7,0.3] -> {a}, [0.3,0.7] -> {b}, tie -> {c} (exact)"),
        t0.elapsed(),
        Duration::from_secs(1),
    );
}

#[test]
fn c12_kl_q_value_decay() {
    let _g = lock();
    let t0 = Instant::now();
    let v = Vocab::new(5, None).unwrap();
    let horizon = 5;
    let policy = PolicyModel::new(&v, Arch::default(), 12);
    let task = KeywordTask::generate(v.clone(), 2, 1.0, 12).unwrap();
    let cfg = KLBaselineConfig {
        gamma: 0.5,
        c: 0.0,
        prior: PriorKind::Uniform,
    };
    let budget = EnumerationBudget::default();
    // State s_1 = (x, a_0), action a_1: remaining horizon T - 1 - t = 3.
    let (prefix, action) = ([4], 1);
    let q = kl_q_value(&policy, &Prior::Uniform, 0, &prefix, action, &task, None, &cfg, horizon, budget).unwrap();
    let terminal = exact_conditional_metric(&policy, &task, 0, None, &[4, 1], &v, horizon, budget).unwrap();
    let err = (q - 0.125 * terminal).abs();
    report(
        12,
        "KL-penalized Q-value decay",
        err <= 1e-9,
        format!("Q = {q:.12}, 0.125 x E[R] = {:.12}, |diff| = {err:.1e} (tol 1e-9)", 0.125 * terminal),
        t0.elapsed(),
        Duration::from_secs(1),
    );
}
