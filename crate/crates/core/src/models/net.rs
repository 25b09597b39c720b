use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::domain::TokenId;
use crate::error::shape_err;
use crate::math;
use crate::{seeded_rng, Error, Result};

/// Architecture hyper-parameters shared by the reward and policy models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arch {
    /// Embedding width.
    pub embed: usize,
    pub hidden: usize,
    /// Number of most recent prefix tokens the model sees.
    pub window: usize,
    /// Positions at or beyond `max_pos - 1` share the last positional row.
    pub max_pos: usize,
    /// Number of distinct input ids `x`.
    pub n_inputs: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            embed: 8,
            hidden: 32,
            window: 4,
            max_pos: 16,
            n_inputs: 1,
        }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.embed == 0 || self.hidden == 0 || self.max_pos == 0 || self.n_inputs == 0 {
            return Err(Error::Parameter(alloc::format!(
                "architecture dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    tok: usize,
    pos: usize,
    inp: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    total: usize,
    in_dim: usize,
}

impl Layout {
    fn new(vocab: usize, arch: &Arch, with_token: bool, out_dim: usize) -> Self {
        let e = arch.embed;
        let slots = arch.window + 2 + usize::from(with_token);
        let in_dim = slots * e;
        let tok = 0;
        let pos = tok + vocab * e;
        let inp = pos + arch.max_pos * e;
        let w1 = inp + arch.n_inputs * e;
        let b1 = w1 + arch.hidden * in_dim;
        let w2 = b1 + arch.hidden;
        let b2 = w2 + out_dim * arch.hidden;
        let total = b2 + out_dim;
        Self {
            tok,
            pos,
            inp,
            w1,
            b1,
            w2,
            b2,
            total,
            in_dim,
        }
    }
}

/// Forward-pass record needed by `backward`.
#[derive(Debug, Clone)]
pub struct NetTrace {
    /// Parameter offset of the embedding row feeding each input slot
    /// (`None` for zero padding).
    rows: Vec<Option<usize>>,
    x: Vec<f64>,
    h: Vec<f64>,
    out: Vec<f64>,
}

impl NetTrace {
    pub fn output(&self) -> &[f64] {
        &self.out
    }
}

/// One-hidden-layer network over a fixed-width context of the state.
///
/// Input slots, in order: candidate token (reward only), prefix tokens from
/// most recent to oldest, position, input id.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ContextNet {
    vocab: usize,
    arch: Arch,
    with_token: bool,
    out_dim: usize,
    layout: Layout,
    params: Vec<f64>,
}

impl ContextNet {
    pub fn zeros(vocab: usize, arch: Arch, with_token: bool, out_dim: usize) -> Self {
        let layout = Layout::new(vocab, &arch, with_token, out_dim);
        Self {
            vocab,
            arch,
            with_token,
            out_dim,
            layout,
            params: vec![0.0; layout.total],
        }
    }

    /// Parameters drawn uniformly from `[-0.1, 0.1]`.
    pub fn seeded(vocab: usize, arch: Arch, with_token: bool, out_dim: usize, seed: u64) -> Self {
        let mut net = Self::zeros(vocab, arch, with_token, out_dim);
        let mut rng = seeded_rng(seed);
        for p in &mut net.params {
            *p = rng.random_range(-0.1..=0.1);
        }
        net
    }

    #[inline]
    pub fn vocab(&self) -> usize {
        self.vocab
    }

    #[inline]
    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    #[inline]
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    #[inline]
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check(&self, input_id: usize, prefix: &[TokenId], token: Option<TokenId>) -> Result<()> {
        if input_id >= self.arch.n_inputs {
            return Err(shape_err!(
                "input id {input_id} out of range for {} inputs",
                self.arch.n_inputs
            ));
        }
        for &t in prefix.iter().chain(token.iter()) {
            if t >= self.vocab {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    size: self.vocab,
                });
            }
        }
        Ok(())
    }

    /// Embedding-row offsets for the context slots (everything but the
    /// candidate token).
    fn context_rows(&self, input_id: usize, prefix: &[TokenId]) -> Vec<Option<usize>> {
        let e = self.arch.embed;
        let l = &self.layout;
        let mut rows = Vec::with_capacity(self.arch.window + 2);
        for k in 0..self.arch.window {
            let row = prefix
                .len()
                .checked_sub(k + 1)
                .map(|i| l.tok + prefix[i] * e);
            rows.push(row);
        }
        let pos = prefix.len().min(self.arch.max_pos - 1);
        rows.push(Some(l.pos + pos * e));
        rows.push(Some(l.inp + input_id * e));
        rows
    }

    fn gather(&self, rows: &[Option<usize>]) -> Vec<f64> {
        let e = self.arch.embed;
        let mut x = vec![0.0; rows.len() * e];
        for (s, row) in rows.iter().enumerate() {
            if let Some(off) = row {
                x[s * e..(s + 1) * e].copy_from_slice(&self.params[*off..off + e]);
            }
        }
        x
    }

    fn head(&self, z: &mut [f64]) -> Vec<f64> {
        let l = &self.layout;
        let hd = self.arch.hidden;
        for v in z.iter_mut() {
            *v = math::tanh(*v);
        }
        let mut out = self.params[l.b2..l.b2 + self.out_dim].to_vec();
        for (o, y) in out.iter_mut().enumerate() {
            let row = &self.params[l.w2 + o * hd..l.w2 + (o + 1) * hd];
            *y += math::dot(row, z);
        }
        out
    }

    pub fn forward(
        &self,
        input_id: usize,
        prefix: &[TokenId],
        token: Option<TokenId>,
    ) -> Result<NetTrace> {
        debug_assert_eq!(token.is_some(), self.with_token);
        self.check(input_id, prefix, token)?;
        let e = self.arch.embed;
        let mut rows = Vec::with_capacity(self.arch.window + 3);
        if let Some(t) = token {
            rows.push(Some(self.layout.tok + t * e));
        }
        rows.extend(self.context_rows(input_id, prefix));
        let x = self.gather(&rows);
        let l = &self.layout;
        let mut z = self.params[l.b1..l.b1 + self.arch.hidden].to_vec();
        for (j, zj) in z.iter_mut().enumerate() {
            let w = &self.params[l.w1 + j * l.in_dim..l.w1 + (j + 1) * l.in_dim];
            *zj += math::dot(w, &x);
        }
        let out = self.head(&mut z);
        Ok(NetTrace { rows, x, h: z, out })
    }

    /// Scalar head output for every candidate token at one state, sharing the
    /// context part of the hidden pre-activation.
    pub fn forward_all_tokens(&self, input_id: usize, prefix: &[TokenId]) -> Result<Vec<f64>> {
        debug_assert!(self.with_token && self.out_dim == 1);
        self.check(input_id, prefix, None)?;
        let e = self.arch.embed;
        let l = &self.layout;
        let rows = self.context_rows(input_id, prefix);
        let ctx = self.gather(&rows);
        let hd = self.arch.hidden;
        let mut shared = self.params[l.b1..l.b1 + hd].to_vec();
        for (j, zj) in shared.iter_mut().enumerate() {
            let w = &self.params[l.w1 + j * l.in_dim + e..l.w1 + (j + 1) * l.in_dim];
            *zj += math::dot(w, &ctx);
        }
        let mut out = Vec::with_capacity(self.vocab);
        let mut z = vec![0.0; hd];
        for tok in 0..self.vocab {
            let emb = &self.params[l.tok + tok * e..l.tok + (tok + 1) * e];
            for j in 0..hd {
                let w = &self.params[l.w1 + j * l.in_dim..l.w1 + j * l.in_dim + e];
                z[j] = shared[j] + math::dot(w, emb);
            }
            out.push(self.head(&mut z)[0]);
        }
        Ok(out)
    }

    /// Accumulates `∂loss/∂params` into `grad` given `dout = ∂loss/∂output`.
    pub fn backward(&self, trace: &NetTrace, dout: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(dout.len(), self.out_dim);
        debug_assert_eq!(grad.len(), self.params.len());
        let l = &self.layout;
        let hd = self.arch.hidden;
        let e = self.arch.embed;
        let mut dz = vec![0.0; hd];
        for (o, &d) in dout.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad[l.b2 + o] += d;
            let w2 = l.w2 + o * hd;
            for j in 0..hd {
                grad[w2 + j] += d * trace.h[j];
                dz[j] += d * self.params[w2 + j];
            }
        }
        let mut dx = vec![0.0; l.in_dim];
        for j in 0..hd {
            let d = dz[j] * (1.0 - trace.h[j] * trace.h[j]);
            if d == 0.0 {
                continue;
            }
            grad[l.b1 + j] += d;
            let w1 = l.w1 + j * l.in_dim;
            for i in 0..l.in_dim {
                grad[w1 + i] += d * trace.x[i];
                dx[i] += d * self.params[w1 + i];
            }
        }
        for (s, row) in trace.rows.iter().enumerate() {
            if let Some(off) = row {
                for k in 0..e {
                    grad[off + k] += dx[s * e + k];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_matches_layout() {
        let arch = Arch::default();
        let net = ContextNet::zeros(10, arch, true, 1);
        let in_dim = (arch.window + 3) * arch.embed;
        let expected = 10 * 8 + 16 * 8 + 8 + 32 * in_dim + 32 + 32 + 1;
        assert_eq!(net.params().len(), expected);
    }

    #[test]
    fn all_token_forward_matches_individual_forward() {
        let net = ContextNet::seeded(7, Arch::default(), true, 1, 3);
        let prefix = [1, 4, 6, 2, 0, 3];
        let all = net.forward_all_tokens(0, &prefix).unwrap();
        for (tok, v) in all.iter().enumerate() {
            let single = net.forward(0, &prefix, Some(tok)).unwrap().output()[0];
            assert!((v - single).abs() < 1e-14);
        }
    }

    #[test]
    fn out_of_range_ids_are_rejected() {
        let net = ContextNet::zeros(5, Arch::default(), false, 5);
        assert!(matches!(
            net.forward(0, &[5], None),
            Err(Error::TokenOutOfRange { token: 5, size: 5 })
        ));
        assert!(matches!(net.forward(1, &[], None), Err(Error::Shape(_))));
    }
}
