//! Sequence evaluations `e(τ) = f({r_t})` from per-step rewards.
//!
//! | kind      | `e(τ)`                              | `∂e/∂r_t`                |
//! |-----------|-------------------------------------|--------------------------|
//! | `Sum`     | `Σ r_t`                             | `1`                      |
//! | `Average` | `(C / T) Σ r_t`                     | `C / T`                  |
//! | `SoftMax` | `C β ln Σ exp(r_t / β)`             | `C softmax(r / β)_t`     |
//! | `SoftMin` | `-C β ln Σ exp(-r_t / β)`           | `C softmax(-r / β)_t`    |
//!
//! `C` is the mean length of the `K` trajectories being compared, so that
//! the length-normalized variants stay on the same scale as `Sum`.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::domain::PreferenceGroup;
use crate::error::param_err;
use crate::math;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Aggregation {
    Sum,
    Average,
    SoftMax { beta: f64 },
    SoftMin { beta: f64 },
}

impl Aggregation {
    /// Builds an aggregation from its flag name (`sum`, `avg`, `max`, `min`);
    /// `beta` is only used by the soft variants.
    pub fn from_flag(name: &str, beta: f64) -> Result<Self> {
        let agg = match name {
            "sum" => Self::Sum,
            "avg" | "average" => Self::Average,
            "max" | "softmax" => Self::SoftMax { beta },
            "min" | "softmin" => Self::SoftMin { beta },
            other => return Err(param_err!("unknown aggregation {other:?}")),
        };
        agg.validate()?;
        Ok(agg)
    }

    pub fn flag(&self) -> &'static str {
        match self {
            Self::Sum => "sum",
            Self::Average => "avg",
            Self::SoftMax { .. } => "max",
            Self::SoftMin { .. } => "min",
        }
    }

    pub fn beta(&self) -> Option<f64> {
        match *self {
            Self::SoftMax { beta } | Self::SoftMin { beta } => Some(beta),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.beta() {
            Some(b) if !(b > 0.0 && b.is_finite()) => {
                Err(param_err!("temperature beta must be positive, got {b}"))
            }
            _ => Ok(()),
        }
    }

    /// Copy with the temperature replaced (no-op for `Sum`/`Average`).
    pub fn with_beta(self, beta: f64) -> Self {
        match self {
            Self::SoftMax { .. } => Self::SoftMax { beta },
            Self::SoftMin { .. } => Self::SoftMin { beta },
            other => other,
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.beta() {
            Some(b) => write!(f, "{}(beta={b})", self.flag()),
            None => f.write_str(self.flag()),
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    /// Parses `sum`, `avg`, `max`, `min`, optionally followed by `:<beta>`
    /// (default `beta = 2`).
    fn from_str(s: &str) -> Result<Self> {
        let (name, beta) = match s.split_once(':') {
            Some((n, b)) => (
                n,
                b.parse::<f64>()
                    .map_err(|_| param_err!("invalid beta in {s:?}"))?,
            ),
            None => (s, 2.0),
        };
        Self::from_flag(name, beta)
    }
}

/// `C = (1/K) Σ_k T^k` over the group's trajectories.
pub fn mean_length(group: &PreferenceGroup) -> Result<f64> {
    mean_length_of(group.trajectories().iter().map(|t| t.len()))
}

pub fn mean_length_of<I: IntoIterator<Item = usize>>(lengths: I) -> Result<f64> {
    let (n, total) = lengths
        .into_iter()
        .fold((0usize, 0usize), |(n, s), l| (n + 1, s + l));
    if n == 0 {
        return Err(Error::Shape("mean length of an empty group".into()));
    }
    Ok(total as f64 / n as f64)
}

/// A sequence evaluation together with `∂e/∂r_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated {
    pub value: f64,
    pub grad: Vec<f64>,
}

pub fn aggregate(rewards: &[f64], c: f64, agg: Aggregation) -> Result<Aggregated> {
    if rewards.is_empty() {
        return Err(Error::Shape("cannot aggregate an empty reward list".into()));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(param_err!("mean length C must be positive, got {c}"));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("per-step rewards"));
    }
    agg.validate()?;
    let t = rewards.len() as f64;
    let out = match agg {
        Aggregation::Sum => Aggregated {
            value: rewards.iter().sum(),
            grad: vec![1.0; rewards.len()],
        },
        Aggregation::Average => Aggregated {
            value: c * rewards.iter().sum::<f64>() / t,
            grad: vec![c / t; rewards.len()],
        },
        Aggregation::SoftMax { beta } => soft_extreme(rewards, c, beta),
        Aggregation::SoftMin { beta } => soft_extreme(rewards, c, -beta),
    };
    Ok(out)
}

/// `C β ln Σ exp(r_t / β)` for a signed temperature.
fn soft_extreme(rewards: &[f64], c: f64, beta: f64) -> Aggregated {
    let scaled: Vec<f64> = rewards.iter().map(|r| r / beta).collect();
    let lse = math::log_sum_exp(&scaled);
    let grad = scaled.iter().map(|z| c * math::exp(z - lse)).collect();
    Aggregated {
        value: c * beta * lse,
        grad,
    }
}
