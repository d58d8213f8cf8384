use crate::numerics::{kernels, rng, Bound, ParamSet, Tape, Tensor, Var};
use crate::rewardmodel::ResponseScorer;
use crate::seqmodel::{PolicyModel, SamplingConfig};
use crate::taskworld::{Instruction, Response};

use super::PpoConfig;

/// Linear value estimate from the policy's final-layer features.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueHead {
    /// `value.w` `[width, 1]` and `value.b` `[1]`.
    pub params: ParamSet,
}

impl ValueHead {
    pub fn new(width: usize) -> Self {
        let mut params = ParamSet::new();
        params.add("value.w", Tensor::zeros(&[width, 1]));
        params.add("value.b", Tensor::zeros(&[1]));
        Self { params }
    }

    pub fn value(&self, features: &[f64]) -> f64 {
        let w = self.params.tensors()[0].data();
        kernels::dot(features, w) + self.params.tensors()[1].data()[0]
    }

    /// Values `[T]` for feature rows `[T, width]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, features: Var) -> Var {
        let v = p.vars();
        let out = tape.matmul(features, v[0]);
        let out = tape.add_row(out, v[1]);
        let n = tape.shape(out)[0];
        tape.reshape(out, &[n])
    }
}

/// One sampled episode and everything the update needs from it.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub instruction: Instruction,
    pub response: Response,
    /// Acting-policy log-probabilities of each response token.
    pub logprobs: Vec<f64>,
    /// Acting-policy full log-softmax rows, for KL(new || old).
    pub old_rows: Vec<Vec<f64>>,
    pub ref_logprobs: Vec<f64>,
    /// Reward-model score of the whole response.
    pub score: f64,
    /// Shaped per-token rewards (KL penalty, plus the score at the end).
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    /// Sum over tokens of `log pi - log pi_ref`.
    pub fn log_ratio(&self) -> f64 {
        self.logprobs.iter().zip(&self.ref_logprobs).map(|(a, b)| a - b).sum()
    }
}

#[derive(Clone, Debug, Default)]
pub struct RolloutBatch {
    pub rollouts: Vec<Rollout>,
}

impl RolloutBatch {
    pub fn tokens(&self) -> usize {
        self.rollouts.iter().map(Rollout::len).sum()
    }

    pub fn mean_score(&self) -> f64 {
        self.rollouts.iter().map(|r| r.score).sum::<f64>() / self.rollouts.len().max(1) as f64
    }
}

/// Generalised advantage estimates and returns for one episode.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_v - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        adv[t] = next_adv;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shift and scale advantages of the whole batch to mean 0 and std 1. The
/// std is floored so a constant batch does not divide by zero.
pub fn whiten(batch: &mut RolloutBatch, floor: f64) {
    let all: Vec<f64> = batch.rollouts.iter().flat_map(|r| r.advantages.iter().copied()).collect();
    if all.is_empty() {
        return;
    }
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / all.len() as f64;
    let std = var.sqrt().max(floor);
    for r in &mut batch.rollouts {
        for a in &mut r.advantages {
            *a = (*a - mean) / std;
        }
    }
}

/// Sample one response per instruction and score it.
pub fn collect_rollouts(
    policy: &PolicyModel,
    value: &ValueHead,
    reference: &PolicyModel,
    reward: &dyn ResponseScorer,
    instructions: &[Instruction],
    cfg: &PpoConfig,
    seed: u64,
) -> RolloutBatch {
    let mut batch = RolloutBatch::default();
    for (k, x) in instructions.iter().enumerate() {
        let s = SamplingConfig::new(
            cfg.temperature,
            cfg.max_new_tokens,
            rng::derive_seed(&[seed, rng::label("rollout"), k as u64, x.id]),
        );
        let trace = policy.sample_traced(x, &s);
        let logprobs = trace.token_logprobs();
        let (_, ref_logprobs) = reference.sequence_logprob(x, &trace.response.tokens);
        let score = reward.score_response(x, &trace.response.tokens);
        let mut rewards: Vec<f64> = logprobs
            .iter()
            .zip(&ref_logprobs)
            .map(|(a, b)| -cfg.beta * (a - b))
            .collect();
        *rewards.last_mut().expect("nonempty response") += score;
        let values: Vec<f64> = trace.features.iter().map(|f| value.value(f)).collect();
        let (advantages, returns) = gae(&rewards, &values, cfg.gamma, cfg.gae_lambda);
        batch.rollouts.push(Rollout {
            instruction: x.clone(),
            response: trace.response,
            logprobs,
            old_rows: trace.log_probs,
            ref_logprobs,
            score,
            rewards,
            values,
            advantages,
            returns,
        });
    }
    whiten(&mut batch, cfg.std_floor);
    batch
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_with_unit_discount_and_lambda_is_reward_to_go() {
        let (adv, ret) = gae(&[1.0, 0.0, 2.0], &[0.5, 0.25, 1.0], 1.0, 1.0);
        assert_eq!(ret, vec![3.0, 2.0, 2.0]);
        assert_eq!(adv, vec![2.5, 1.75, 1.0]);
    }

    #[test]
    fn gae_lambda_zero_is_one_step_td() {
        let (adv, _) = gae(&[1.0, 2.0], &[0.5, 0.25], 1.0, 0.0);
        assert_eq!(adv, vec![1.0 + 0.25 - 0.5, 2.0 - 0.25]);
    }
}
