//! CSV artifacts. Column contracts are listed in the README; missing values
//! are written as empty fields.

use std::path::Path;

use prefguide_core::math;
use prefguide_core::rank::RewardHistory;
use prefguide_core::train::PolicyHistoryRow;

use crate::{CliError, Result};

pub const HISTORY_COLUMNS: [&str; 6] = ["iter", "mode", "policy_loss", "exact_metric", "sampled_metric", "retrain_flag"];
pub const REWARD_HISTORY_COLUMNS: [&str; 5] = ["phase_iter", "step", "train_loss", "holdout_loss", "rank_accuracy"];
pub const SUMMARY_KEY_COLUMNS: [&str; 5] = ["sweep", "setting", "stat", "seed", "n"];

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::Csv(path.display().to_string(), e))
}

fn finish(path: &Path, mut w: csv::Writer<std::fs::File>) -> Result<()> {
    w.flush().map_err(|e| CliError::io(path, e))
}

/// One row of a policy history. `policy_loss` is absent for trainers that
/// do not report one.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub iter: usize,
    pub mode: String,
    pub policy_loss: Option<f64>,
    pub exact_metric: Option<f64>,
    pub sampled_metric: Option<f64>,
    pub retrain: bool,
}

impl From<&PolicyHistoryRow> for HistoryRow {
    fn from(r: &PolicyHistoryRow) -> Self {
        Self {
            iter: r.iter,
            mode: r.mode.flag().to_string(),
            policy_loss: Some(r.policy_loss),
            exact_metric: r.exact_metric,
            sampled_metric: r.sampled_metric,
            retrain: r.retrain,
        }
    }
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = writer(path)?;
    let err = |e| CliError::Csv(path.display().to_string(), e);
    w.write_record(HISTORY_COLUMNS).map_err(err)?;
    for r in rows {
        w.write_record([
            r.iter.to_string(),
            r.mode.clone(),
            opt(r.policy_loss),
            opt(r.exact_metric),
            opt(r.sampled_metric),
            u8::from(r.retrain).to_string(),
        ])
        .map_err(err)?;
    }
    finish(path, w)
}

/// Reward-training histories, one block per training phase (`phase_iter` is
/// the policy iteration that triggered it, `0` for the initial fit).
pub fn write_reward_history(path: &Path, phases: &[(usize, RewardHistory)]) -> Result<()> {
    let mut w = writer(path)?;
    let err = |e| CliError::Csv(path.display().to_string(), e);
    w.write_record(REWARD_HISTORY_COLUMNS).map_err(err)?;
    for (iter, h) in phases {
        for r in &h.rows {
            w.write_record([
                iter.to_string(),
                r.step.to_string(),
                r.train_loss.to_string(),
                opt(r.holdout_loss),
                opt(r.rank_accuracy),
            ])
            .map_err(err)?;
        }
    }
    finish(path, w)
}

/// Final metrics of one seed under one setting.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub sweep: String,
    pub setting: String,
    pub seed: u64,
    pub metrics: Vec<Option<f64>>,
}

/// Mean and sample standard deviation of one `(sweep, setting)` group.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub sweep: String,
    pub setting: String,
    pub n: usize,
    pub mean: Vec<Option<f64>>,
    pub sd: Vec<Option<f64>>,
}

/// Per-seed rows followed by `mean` and `sd` rows for every
/// `(sweep, setting)` pair, in first-appearance order.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub metric_names: Vec<&'static str>,
    pub results: Vec<SeedResult>,
}

/// Mean and sample standard deviation of the present values; the deviation
/// needs at least two.
pub fn mean_sd(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let xs: Vec<f64> = values.iter().flatten().copied().collect();
    match xs.len() {
        0 => (None, None),
        1 => (Some(xs[0]), None),
        _ => {
            let (m, s) = math::mean_std(&xs);
            (Some(m), Some(s))
        }
    }
}

impl Summary {
    pub fn new(metric_names: Vec<&'static str>) -> Self {
        Self {
            metric_names,
            results: Vec::new(),
        }
    }

    pub fn push(&mut self, r: SeedResult) {
        debug_assert_eq!(r.metrics.len(), self.metric_names.len());
        self.results.push(r);
    }

    fn groups(&self) -> Vec<(&str, &str)> {
        let mut keys: Vec<(&str, &str)> = Vec::new();
        for r in &self.results {
            let k = (r.sweep.as_str(), r.setting.as_str());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys
    }

    fn rows_of(&self, sweep: &str, setting: &str) -> Vec<&SeedResult> {
        self.results.iter().filter(|r| r.sweep == sweep && r.setting == setting).collect()
    }

    pub fn aggregates(&self) -> Vec<Aggregate> {
        self.groups()
            .into_iter()
            .map(|(sweep, setting)| {
                let rows = self.rows_of(sweep, setting);
                let (mean, sd) = (0..self.metric_names.len())
                    .map(|j| mean_sd(&rows.iter().map(|r| r.metrics[j]).collect::<Vec<_>>()))
                    .unzip();
                Aggregate {
                    sweep: sweep.to_string(),
                    setting: setting.to_string(),
                    n: rows.len(),
                    mean,
                    sd,
                }
            })
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = writer(path)?;
        let err = |e| CliError::Csv(path.display().to_string(), e);
        let header: Vec<&str> = SUMMARY_KEY_COLUMNS.iter().chain(&self.metric_names).copied().collect();
        w.write_record(&header).map_err(err)?;
        for a in self.aggregates() {
            for r in self.rows_of(&a.sweep, &a.setting) {
                let mut rec = vec![a.sweep.clone(), a.setting.clone(), "seed".into(), r.seed.to_string(), "1".into()];
                rec.extend(r.metrics.iter().map(|&m| opt(m)));
                w.write_record(&rec).map_err(err)?;
            }
            for (stat, vals) in [("mean", &a.mean), ("sd", &a.sd)] {
                let mut rec = vec![a.sweep.clone(), a.setting.clone(), stat.into(), String::new(), a.n.to_string()];
                rec.extend(vals.iter().map(|&m| opt(m)));
                w.write_record(&rec).map_err(err)?;
            }
        }
        finish(path, w)
    }

    /// Aligned plain-text rendering of the aggregate rows.
    pub fn render(&self) -> String {
        let mut out = format!("{:<14} {:<16} {:>3}", "sweep", "setting", "n");
        for m in &self.metric_names {
            out.push_str(&format!(" {m:>24}"));
        }
        out.push('\n');
        for a in self.aggregates() {
            out.push_str(&format!("{:<14} {:<16} {:>3}", a.sweep, a.setting, a.n));
            for (m, s) in a.mean.iter().zip(&a.sd) {
                let cell = match (m, s) {
                    (Some(m), Some(s)) => format!("{m:.4} ({s:.4})"),
                    (Some(m), None) => format!("{m:.4}"),
                    _ => "-".into(),
                };
                out.push_str(&format!(" {cell:>24}"));
            }
            out.push('\n');
        }
        out
    }
}
