use alloc::vec::Vec;

use super::net::{Arch, ContextNet, NetTrace};
use super::{Backprop, GradBuffer, Parametric};
use crate::domain::{TokenId, Trajectory, Vocab};
use crate::math;
use crate::Result;

/// Bounded per-token reward `r(s_t, a_t) = σ(f(x, a_<t, a_t)) ∈ (0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    net: ContextNet,
}

/// Trace of one reward evaluation.
#[derive(Debug, Clone)]
pub struct RewardTrace {
    net: NetTrace,
    value: f64,
}

impl RewardTrace {
    #[inline]
    pub fn value(&self) -> f64 {
        self.value
    }
}

impl RewardModel {
    pub fn new(vocab: &Vocab, arch: Arch, seed: u64) -> Self {
        Self {
            net: ContextNet::seeded(vocab.size(), arch, true, 1, seed),
        }
    }

    /// All parameters zero, so every reward is exactly `0.5`.
    pub fn zeros(vocab: &Vocab, arch: Arch) -> Self {
        Self {
            net: ContextNet::zeros(vocab.size(), arch, true, 1),
        }
    }

    pub fn arch(&self) -> &Arch {
        self.net.arch()
    }

    pub fn vocab_size(&self) -> usize {
        self.net.vocab()
    }

    pub fn reward_step(&self, input_id: usize, prefix: &[TokenId], token: TokenId) -> Result<f64> {
        Ok(self.trace_step(input_id, prefix, token)?.value)
    }

    /// Per-step rewards `r(s_t, a_t)` for `t = 0..T`.
    pub fn reward_trajectory(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        traj.steps()
            .map(|(prefix, a)| self.reward_step(traj.input_id(), prefix, a))
            .collect()
    }

    /// `r(s, a)` for every token `a` of the vocabulary at one state.
    pub fn rewards_all_tokens(&self, input_id: usize, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut v = self.net.forward_all_tokens(input_id, prefix)?;
        v.iter_mut().for_each(|z| *z = math::sigmoid(*z));
        Ok(v)
    }

    pub fn trace_step(
        &self,
        input_id: usize,
        prefix: &[TokenId],
        token: TokenId,
    ) -> Result<RewardTrace> {
        let net = self.net.forward(input_id, prefix, Some(token))?;
        let value = math::sigmoid(net.output()[0]);
        Ok(RewardTrace { net, value })
    }

    pub fn trace_trajectory(&self, traj: &Trajectory) -> Result<Vec<RewardTrace>> {
        traj.steps()
            .map(|(prefix, a)| self.trace_step(traj.input_id(), prefix, a))
            .collect()
    }
}

impl Parametric for RewardModel {
    fn params(&self) -> &[f64] {
        self.net.params()
    }

    fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }
}

impl Backprop for RewardModel {
    type Trace = RewardTrace;
    type Seed = f64;

    fn backprop_into(&self, trace: &RewardTrace, d_reward: &f64, grad: &mut GradBuffer) {
        let r = trace.value;
        let dlogit = d_reward * r * (1.0 - r);
        self.net
            .backward(&trace.net, &[dlogit], grad.as_mut_slice());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{backprop_scalar, LossGraph};
    use crate::oracle::finite_diff_grad;
    use alloc::vec;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        Vocab::new(6, Some(5)).unwrap()
    }

    #[test]
    fn zero_model_gives_one_half() {
        let m = RewardModel::zeros(&vocab(), Arch::default());
        assert_eq!(m.reward_step(0, &[1, 2], 3).unwrap(), 0.5);
        let t = Trajectory::new(0, vec![0, 1, 2, 3, 4]);
        assert_eq!(m.reward_trajectory(&t).unwrap(), vec![0.5; 5]);
    }

    #[test]
    fn deterministic_and_singleton() {
        let m = RewardModel::new(&vocab(), Arch::default(), 11);
        let a = m.reward_step(0, &[1, 2], 3).unwrap();
        assert_eq!(a, m.reward_step(0, &[1, 2], 3).unwrap());
        let t = Trajectory::new(0, vec![4]);
        assert_eq!(m.reward_trajectory(&t).unwrap(), vec![m.reward_step(0, &[], 4).unwrap()]);
    }

    #[test]
    fn rejects_invalid_token() {
        let m = RewardModel::zeros(&vocab(), Arch::default());
        assert!(m.reward_step(0, &[], 6).is_err());
    }

    #[test]
    fn extension_keeps_earlier_rewards() {
        let m = RewardModel::new(&vocab(), Arch::default(), 2);
        let short = m.reward_trajectory(&Trajectory::new(0, vec![1, 2, 3])).unwrap();
        let long = m.reward_trajectory(&Trajectory::new(0, vec![1, 2, 3, 0, 4])).unwrap();
        assert_eq!(&long[..3], &short[..]);
    }

    #[test]
    fn step_gradient_matches_finite_differences() {
        let mut m = RewardModel::new(&vocab(), Arch::default(), 5);
        let trace = m.trace_step(0, &[3, 1], 2).unwrap();
        let mut g = LossGraph::new(trace.value());
        g.push(trace, 1.0);
        let analytic = backprop_scalar(&m, &g).unwrap();
        let start = m.params().to_vec();
        let numeric = finite_diff_grad(
            |p| {
                m.params_mut().copy_from_slice(p);
                m.reward_step(0, &[3, 1], 2).unwrap()
            },
            &start,
            1e-5,
        )
        .unwrap();
        for (a, n) in analytic.as_slice().iter().zip(&numeric) {
            assert!((a - n).abs() <= 1e-4 * a.abs().max(n.abs()).max(1e-4), "{a} vs {n}");
        }
    }

    #[test]
    fn constant_and_direct_losses() {
        let m = RewardModel::new(&vocab(), Arch::default(), 1);
        let g: LossGraph<RewardModel> = LossGraph::new(3.0);
        assert!(backprop_scalar(&m, &g).unwrap().as_slice().iter().all(|&x| x == 0.0));
        let mut g: LossGraph<RewardModel> = LossGraph::new(m.params()[7]);
        g.add_direct(7, 1.0);
        let grad = backprop_scalar(&m, &g).unwrap();
        assert_eq!(grad[7], 1.0);
        assert_eq!(grad.as_slice().iter().filter(|&&x| x != 0.0).count(), 1);
        let bad: LossGraph<RewardModel> = LossGraph::new(f64::NAN);
        assert_eq!(backprop_scalar(&m, &bad), Err(crate::Error::NonFinite("loss")));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rewards_are_strictly_bounded(
            seed in 0u64..1000,
            prefix in proptest::collection::vec(0usize..6, 0..8),
            tok in 0usize..6,
        ) {
            let m = RewardModel::new(&vocab(), Arch::default(), seed);
            let r = m.reward_step(0, &prefix, tok).unwrap();
            prop_assert!(r > 0.0 && r < 1.0);
        }

        #[test]
        fn rewards_are_causal(
            seed in 0u64..1000,
            tokens in proptest::collection::vec(0usize..5, 2..8),
            cut in 0usize..7,
            tail in proptest::collection::vec(0usize..5, 1..4),
        ) {
            let cut = cut % (tokens.len() - 1);
            let m = RewardModel::new(&vocab(), Arch::default(), seed);
            let base = m.reward_trajectory(&Trajectory::new(0, tokens.clone())).unwrap();
            let mut mutated = tokens[..=cut].to_vec();
            mutated.extend(tail);
            let other = m.reward_trajectory(&Trajectory::new(0, mutated)).unwrap();
            prop_assert_eq!(&base[..=cut], &other[..=cut]);
        }
    }
}
