use std::io::Write;

use rand::seq::SliceRandom;

use crate::numerics::{rng, Adam};
use crate::rewardmodel::ResponseScorer;
use crate::seqmodel::{PolicyModel, Role, SamplingConfig};
use crate::taskworld::{Instruction, InstructionSet, ModelTag};

use super::rollout::{collect_rollouts, ValueHead};
use super::update::ppo_update;
use super::{PpoConfig, PpoError};

#[derive(Clone, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub mean_score: f64,
    /// Mean summed log-ratio to the reference over the rollout batch.
    pub mean_kl: f64,
    pub mean_len: f64,
    pub clip_frac: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub epochs_run: usize,
    pub early_stopped: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PpoLog {
    pub iterations: Vec<IterRecord>,
}

impl PpoLog {
    pub fn write_lines<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.iterations {
            writeln!(
                w,
                "iter={}\tscore={:.6}\tkl={:.6}\tlen={:.3}\tclip_frac={:.4}\tpolicy_loss={:.6}\tvalue_loss={:.6}\tepochs={}\tearly_stop={}",
                r.iter,
                r.mean_score,
                r.mean_kl,
                r.mean_len,
                r.clip_frac,
                r.policy_loss,
                r.value_loss,
                r.epochs_run,
                r.early_stopped
            )?;
        }
        Ok(())
    }
}

/// Fine-tune `init` with PPO against `reward` on the instructions of `u`.
/// The reference policy is a frozen copy of `init`.
pub fn train_policy(
    init: &PolicyModel,
    reward: &dyn ResponseScorer,
    u: &InstructionSet,
    tag: ModelTag,
    cfg: &PpoConfig,
) -> Result<(PolicyModel, PpoLog), PpoError> {
    cfg.validate()?;
    if u.items.is_empty() {
        return Err(PpoError::Config("no instructions to optimise on".into()));
    }
    let reference = init.clone();
    let mut policy = init.clone().with_role(Role::Policy, tag);
    let mut value = ValueHead::new(init.config().width);
    let mut joint = policy.params().clone();
    joint.append(&value.params);
    let mut opt = Adam::new(cfg.optimizer.clone(), &joint);

    let mut log = PpoLog::default();
    let mut order: Vec<usize> = Vec::new();
    let mut pass = 0u64;
    for iter in 0..cfg.iterations {
        let mut picked = Vec::with_capacity(cfg.rollout_batch);
        while picked.len() < cfg.rollout_batch {
            if order.is_empty() {
                order = (0..u.items.len()).collect();
                order.shuffle(&mut rng::rng(rng::derive_seed(&[cfg.seed, rng::label("ppo-pass"), pass])));
                pass += 1;
            }
            picked.push(u.items[order.pop().expect("refilled")].clone());
        }
        let seed = rng::derive_seed(&[cfg.seed, rng::label("ppo-iter"), iter as u64]);
        let batch = collect_rollouts(&policy, &value, &reference, reward, &picked, cfg, seed);
        let stats = ppo_update(&mut policy, &mut value, &mut opt, &batch, cfg, seed)
            .map_err(|e| match e {
                PpoError::Divergence { .. } => PpoError::Divergence { iteration: iter },
                other => other,
            })?;
        let n = batch.rollouts.len() as f64;
        log.iterations.push(IterRecord {
            iter,
            mean_score: batch.mean_score(),
            mean_kl: batch.rollouts.iter().map(|r| r.log_ratio()).sum::<f64>() / n,
            mean_len: batch.tokens() as f64 / n,
            clip_frac: stats.clip_frac,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            epochs_run: stats.epochs_run,
            early_stopped: stats.early_stopped,
        });
    }
    Ok((policy, log))
}

/// Mean over `instructions` of the sequence-level KL(policy || reference),
/// estimated by sampling `draws` responses per instruction from the policy
/// and summing the exact per-step KL between next-token distributions along
/// each trajectory.
pub fn sequence_kl(
    policy: &PolicyModel,
    reference: &PolicyModel,
    instructions: &[Instruction],
    draws: usize,
    max_new_tokens: usize,
    seed: u64,
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for x in instructions {
        for i in 0..draws {
            let s = SamplingConfig::new(
                1.0,
                max_new_tokens,
                rng::derive_seed(&[seed, rng::label("seq-kl"), x.id, i as u64]),
            );
            let trace = policy.sample_traced(x, &s);
            let rows = reference.logprob_rows(x, &trace.response.tokens);
            total += trace
                .log_probs
                .iter()
                .zip(&rows)
                .map(|(p, q)| p.iter().zip(q).map(|(a, b)| a.exp() * (a - b)).sum::<f64>())
                .sum::<f64>();
            count += 1;
        }
    }
    total / count.max(1) as f64
}
