//! Plain-text parameter checkpoints.
//!
//! ```text
//! prefguide-params v1
//! kind reward
//! vocab_size 6
//! eos none
//! arch 8 32 4 16 1
//! n_params 1234
//! <one value per line>
//! ```
//!
//! Values use the shortest representation that parses back to the same
//! `f64`.

use std::fmt::Write as _;
use std::path::Path;

use prefguide_core::domain::Vocab;
use prefguide_core::models::{Arch, Parametric, PolicyModel, RewardModel};

use crate::{CliError, Result};

pub const MAGIC: &str = "prefguide-params v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Reward,
    Policy,
}

impl ModelKind {
    fn name(self) -> &'static str {
        match self {
            ModelKind::Reward => "reward",
            ModelKind::Policy => "policy",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub vocab: Vocab,
    pub arch: Arch,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn of_reward(m: &RewardModel, vocab: &Vocab) -> Self {
        Self {
            kind: ModelKind::Reward,
            vocab: vocab.clone(),
            arch: *m.arch(),
            params: m.params().to_vec(),
        }
    }

    pub fn of_policy(m: &PolicyModel, vocab: &Vocab) -> Self {
        Self {
            kind: ModelKind::Policy,
            vocab: vocab.clone(),
            arch: *m.arch(),
            params: m.params().to_vec(),
        }
    }

    pub fn to_text(&self) -> String {
        let a = &self.arch;
        let mut s = String::with_capacity(24 * self.params.len() + 128);
        let eos = self.vocab.eos().map_or("none".to_string(), |e| e.to_string());
        writeln!(s, "{MAGIC}").unwrap();
        writeln!(s, "kind {}", self.kind.name()).unwrap();
        writeln!(s, "vocab_size {}", self.vocab.size()).unwrap();
        writeln!(s, "eos {eos}").unwrap();
        writeln!(s, "arch {} {} {} {} {}", a.embed, a.hidden, a.window, a.max_pos, a.n_inputs).unwrap();
        writeln!(s, "n_params {}", self.params.len()).unwrap();
        for p in &self.params {
            writeln!(s, "{p:?}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: &str| CliError::Checkpoint(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("missing `prefguide-params v1` header"));
        }
        let mut field = |key: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| bad(&format!("missing `{key}` line")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(bad(&format!("expected `{key}`, found `{line}`")));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("invalid integer `{s}`")));
        let kind = match field("kind")?.as_slice() {
            [k] if k == "reward" => ModelKind::Reward,
            [k] if k == "policy" => ModelKind::Policy,
            other => return Err(bad(&format!("unknown model kind {other:?}"))),
        };
        let size = match field("vocab_size")?.as_slice() {
            [n] => num(n)?,
            _ => return Err(bad("malformed vocab_size")),
        };
        let eos = match field("eos")?.as_slice() {
            [e] if e == "none" => None,
            [e] => Some(num(e)?),
            _ => return Err(bad("malformed eos")),
        };
        let arch = match field("arch")?.as_slice() {
            [e, h, w, m, n] => Arch {
                embed: num(e)?,
                hidden: num(h)?,
                window: num(w)?,
                max_pos: num(m)?,
                n_inputs: num(n)?,
            },
            _ => return Err(bad("arch needs 5 integers")),
        };
        let n = match field("n_params")?.as_slice() {
            [n] => num(n)?,
            _ => return Err(bad("malformed n_params")),
        };
        let params = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>().map_err(|_| bad(&format!("invalid value `{l}`"))))
            .collect::<Result<Vec<_>>>()?;
        if params.len() != n {
            return Err(bad(&format!("expected {n} values, found {}", params.len())));
        }
        let vocab = Vocab::new(size, eos)?;
        arch.validate()?;
        Ok(Self {
            kind,
            vocab,
            arch,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    fn fill<M: Parametric>(&self, mut model: M, kind: ModelKind) -> Result<M> {
        if self.kind != kind {
            return Err(CliError::Checkpoint(format!(
                "checkpoint holds a {} model, expected {}",
                self.kind.name(),
                kind.name()
            )));
        }
        if model.n_params() != self.params.len() {
            return Err(CliError::Checkpoint(format!(
                "architecture expects {} parameters, checkpoint has {}",
                model.n_params(),
                self.params.len()
            )));
        }
        model.params_mut().copy_from_slice(&self.params);
        Ok(model)
    }

    pub fn into_reward(self) -> Result<RewardModel> {
        let m = RewardModel::zeros(&self.vocab, self.arch);
        self.fill(m, ModelKind::Reward)
    }

    pub fn into_policy(self) -> Result<PolicyModel> {
        let m = PolicyModel::zeros(&self.vocab, self.arch);
        self.fill(m, ModelKind::Policy)
    }
}
