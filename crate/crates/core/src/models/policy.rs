use alloc::vec::Vec;
use rand::{Rng, RngCore};

use super::net::{Arch, ContextNet, NetTrace};
use super::{Backprop, GradBuffer, Parametric};
use crate::domain::{TokenId, Trajectory, Vocab};
use crate::error::param_err;
use crate::math;
use crate::{seeded_rng, Result};

/// Autoregressive token policy `π(a_t | x, a_<t)` over a finite vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    net: ContextNet,
    eos: Option<TokenId>,
}

/// Trace of one policy evaluation; carries the softmax probabilities.
#[derive(Debug, Clone)]
pub struct PolicyTrace {
    net: NetTrace,
    probs: Vec<f64>,
}

impl PolicyTrace {
    #[inline]
    pub fn logits(&self) -> &[f64] {
        self.net.output()
    }

    #[inline]
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

impl PolicyModel {
    pub fn new(vocab: &Vocab, arch: Arch, seed: u64) -> Self {
        let v = vocab.size();
        Self {
            net: ContextNet::seeded(v, arch, false, v, seed),
            eos: vocab.eos(),
        }
    }

    /// All parameters zero: the uniform policy.
    pub fn zeros(vocab: &Vocab, arch: Arch) -> Self {
        let v = vocab.size();
        Self {
            net: ContextNet::zeros(v, arch, false, v),
            eos: vocab.eos(),
        }
    }

    pub fn arch(&self) -> &Arch {
        self.net.arch()
    }

    pub fn vocab_size(&self) -> usize {
        self.net.vocab()
    }

    pub fn eos(&self) -> Option<TokenId> {
        self.eos
    }

    pub fn policy_logits(&self, input_id: usize, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.net.forward(input_id, prefix, None)?.output().to_vec())
    }

    pub fn probs(&self, input_id: usize, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(math::softmax(&self.policy_logits(input_id, prefix)?))
    }

    pub fn trace(&self, input_id: usize, prefix: &[TokenId]) -> Result<PolicyTrace> {
        let net = self.net.forward(input_id, prefix, None)?;
        let probs = math::softmax(net.output());
        Ok(PolicyTrace { net, probs })
    }

    /// `ln π(a | x, a_<t)`.
    pub fn log_prob(&self, input_id: usize, prefix: &[TokenId], token: TokenId) -> Result<f64> {
        let logits = self.policy_logits(input_id, prefix)?;
        Ok(logits[token] - math::log_sum_exp(&logits))
    }

    /// Samples up to `horizon` tokens, stopping after an end-of-sequence
    /// token. Same seed, same trajectory.
    pub fn sample(
        &self,
        input_id: usize,
        horizon: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Trajectory> {
        self.sample_with(&mut seeded_rng(seed), input_id, horizon, temperature)
    }

    pub fn sample_with<R: RngCore + ?Sized>(
        &self,
        rng: &mut R,
        input_id: usize,
        horizon: usize,
        temperature: f64,
    ) -> Result<Trajectory> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(param_err!("temperature must be positive, got {temperature}"));
        }
        if horizon == 0 {
            return Err(param_err!("horizon must be at least 1"));
        }
        let mut tokens = Vec::with_capacity(horizon);
        while tokens.len() < horizon {
            let mut logits = self.policy_logits(input_id, &tokens)?;
            logits.iter_mut().for_each(|z| *z /= temperature);
            math::softmax_in_place(&mut logits);
            let tok = sample_index(rng, &logits);
            tokens.push(tok);
            if Some(tok) == self.eos {
                break;
            }
        }
        Ok(Trajectory::new(input_id, tokens))
    }

    /// Most likely token at every step, up to `horizon` or end-of-sequence.
    pub fn greedy(&self, input_id: usize, horizon: usize) -> Result<Trajectory> {
        let mut tokens = Vec::with_capacity(horizon);
        while tokens.len() < horizon {
            let tok = math::argmax(&self.policy_logits(input_id, &tokens)?);
            tokens.push(tok);
            if Some(tok) == self.eos {
                break;
            }
        }
        Ok(Trajectory::new(input_id, tokens))
    }
}

/// Inverse-CDF draw from a probability vector.
pub(crate) fn sample_index<R: RngCore + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the last partial sum.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

impl Parametric for PolicyModel {
    fn params(&self) -> &[f64] {
        self.net.params()
    }

    fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }
}

impl Backprop for PolicyModel {
    type Trace = PolicyTrace;
    /// `∂loss/∂logits`.
    type Seed = Vec<f64>;

    fn backprop_into(&self, trace: &PolicyTrace, d_logits: &Vec<f64>, grad: &mut GradBuffer) {
        self.net.backward(&trace.net, d_logits, grad.as_mut_slice());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        Vocab::new(5, None).unwrap()
    }

    #[test]
    fn zero_policy_is_uniform() {
        let p = PolicyModel::zeros(&vocab(), Arch::default());
        let probs = p.probs(0, &[1, 2]).unwrap();
        assert!(probs.iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn logits_are_deterministic_and_shift_invariant() {
        let p = PolicyModel::new(&vocab(), Arch::default(), 9);
        let a = p.policy_logits(0, &[3]).unwrap();
        assert_eq!(a, p.policy_logits(0, &[3]).unwrap());
        let shifted: Vec<f64> = a.iter().map(|z| z + 17.5).collect();
        let (pa, pb) = (math::softmax(&a), math::softmax(&shifted));
        for (x, y) in pa.iter().zip(&pb) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let p = PolicyModel::new(&vocab(), Arch::default(), 4);
        assert_eq!(p.sample(0, 6, 1.0, 42).unwrap(), p.sample(0, 6, 1.0, 42).unwrap());
    }

    #[test]
    fn uniform_policy_without_eos_fills_horizon() {
        let p = PolicyModel::zeros(&vocab(), Arch::default());
        for seed in 0..20 {
            assert_eq!(p.sample(0, 5, 1.0, seed).unwrap().len(), 5);
        }
    }

    #[test]
    fn tiny_temperature_is_greedy() {
        let p = PolicyModel::new(&vocab(), Arch::default(), 8);
        let greedy = p.greedy(0, 6).unwrap();
        for seed in 0..10 {
            assert_eq!(p.sample(0, 6, 1e-6, seed).unwrap(), greedy);
        }
    }

    #[test]
    fn sampling_stops_at_eos() {
        let v = Vocab::new(3, Some(2)).unwrap();
        let mut p = PolicyModel::zeros(&v, Arch::default());
        // Output bias on the eos logit makes eos almost certain.
        let n = p.n_params();
        p.params_mut()[n - 1] = 50.0;
        let t = p.sample(0, 10, 1.0, 3).unwrap();
        assert_eq!(t.tokens(), &[2]);
    }

    #[test]
    fn nonpositive_temperature_is_rejected() {
        let p = PolicyModel::zeros(&vocab(), Arch::default());
        assert!(matches!(p.sample(0, 3, 0.0, 1), Err(crate::Error::Parameter(_))));
        assert!(matches!(p.sample(0, 3, -1.0, 1), Err(crate::Error::Parameter(_))));
    }

    #[test]
    fn sample_index_edges() {
        let mut rng = seeded_rng(0);
        assert_eq!(sample_index(&mut rng, &[0.0, 1.0, 0.0]), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn probabilities_normalize(
            seed in 0u64..10_000,
            prefix in proptest::collection::vec(0usize..5, 0..7),
        ) {
            let p = PolicyModel::new(&vocab(), Arch::default(), seed);
            let probs = p.probs(0, &prefix).unwrap();
            prop_assert!(probs.iter().all(|&x| x >= 0.0));
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
