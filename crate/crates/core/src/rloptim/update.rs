use rand::seq::SliceRandom;

use crate::numerics::{rng, Adam, Bound, Tape, Tensor, Var};
use crate::seqmodel::PolicyModel;

use super::rollout::{Rollout, RolloutBatch, ValueHead};
use super::{PpoConfig, PpoError};

/// PPO objective over a minibatch, with diagnostics read off the forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PpoTerms {
    pub total: Var,
    /// Clipped surrogate loss, token mean.
    pub policy: Var,
    /// Squared value error, token mean.
    pub value: Var,
    /// Mean per-token KL(current || rollout policy).
    pub kl_old: f64,
    /// Fraction of tokens whose ratio lies outside the clip range.
    pub clip_frac: f64,
    pub tokens: usize,
}

pub fn ppo_loss_taped(
    policy: &PolicyModel,
    value_head: &ValueHead,
    tape: &mut Tape,
    pb: &Bound,
    vb: &Bound,
    rollouts: &[&Rollout],
    cfg: &PpoConfig,
) -> PpoTerms {
    let mut pg_terms = Vec::with_capacity(rollouts.len());
    let mut v_terms = Vec::with_capacity(rollouts.len());
    let (mut kl, mut clipped, mut tokens) = (0.0, 0usize, 0usize);
    for r in rollouts {
        let n = r.len();
        let s = policy.taped_logprobs(tape, pb, &r.instruction, &r.response.tokens);
        let old = tape.constant(Tensor::vector(r.logprobs.clone()));
        let adv = tape.constant(Tensor::vector(r.advantages.clone()));
        let diff = tape.sub(s.token, old);
        let ratio = tape.exp(diff);
        let plain = tape.mul(ratio, adv);
        let bounded = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
        let bounded = tape.mul(bounded, adv);
        let surrogate = tape.minimum(plain, bounded);
        pg_terms.push(tape.sum(surrogate));

        let feats = tape.slice_rows(s.forward.features, s.start, n);
        let detached = tape.constant(tape.value(feats).clone());
        let v = value_head.forward(tape, vb, detached);
        let target = tape.constant(Tensor::vector(r.returns.clone()));
        let err = tape.sub(v, target);
        let sq = tape.square(err);
        v_terms.push(tape.sum(sq));

        let rows = tape.value(s.rows);
        for (t, old_row) in r.old_rows.iter().enumerate() {
            let new_row = rows.row(t);
            kl += new_row.iter().zip(old_row).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
        }
        clipped += tape
            .value(ratio)
            .data()
            .iter()
            .filter(|&&x| (x - 1.0).abs() > cfg.clip)
            .count();
        tokens += n;
    }
    let inv = 1.0 / tokens as f64;
    let pg = tape.add_all(&pg_terms);
    let policy_loss = tape.scale(pg, -inv);
    let vs = tape.add_all(&v_terms);
    let value_loss = tape.scale(vs, inv);
    let weighted = tape.scale(value_loss, cfg.value_coef);
    let total = tape.add(policy_loss, weighted);
    PpoTerms {
        total,
        policy: policy_loss,
        value: value_loss,
        kl_old: kl * inv,
        clip_frac: clipped as f64 * inv,
        tokens,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub epochs_run: usize,
    pub steps: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_frac: f64,
    /// KL(current || rollout policy) measured before the last step taken.
    pub kl_old: f64,
    pub early_stopped: bool,
}

/// Several epochs of clipped-surrogate minibatch updates on one batch.
///
/// `opt` must have been created for the concatenation of the policy's
/// parameters and the value head's parameters, in that order.
pub fn ppo_update(
    policy: &mut PolicyModel,
    value_head: &mut ValueHead,
    opt: &mut Adam,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<UpdateStats, PpoError> {
    let mut joint = policy.params().clone();
    let n_policy = joint.len();
    joint.append(&value_head.params);
    let mut stats = UpdateStats::default();
    let mut order: Vec<usize> = (0..batch.rollouts.len()).collect();
    let (mut sum_pg, mut sum_v, mut sum_clip) = (0.0, 0.0, 0.0);
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::rng(rng::derive_seed(&[seed, rng::label("ppo-epoch"), epoch as u64])));
        for chunk in order.chunks(cfg.minibatch) {
            let rollouts: Vec<&Rollout> = chunk.iter().map(|&i| &batch.rollouts[i]).collect();
            let mut tape = Tape::new();
            let p = joint.bind(&mut tape);
            let pb = p.range(0, n_policy);
            let vb = p.range(n_policy, value_head.params.len());
            let terms = ppo_loss_taped(policy, value_head, &mut tape, &pb, &vb, &rollouts, cfg);
            if stats.steps > 0 && terms.kl_old > cfg.kl_stop {
                stats.early_stopped = true;
                break 'epochs;
            }
            let total = tape.scalar(terms.total);
            if !total.is_finite() {
                return Err(PpoError::Divergence { iteration: 0 });
            }
            let mut grads = p.grads(&tape.backward(terms.total)?);
            opt.step(&mut joint, &mut grads)?;
            let t = joint.tensors();
            policy.params_mut().tensors_mut().clone_from_slice(&t[..n_policy]);
            value_head.params.tensors_mut().clone_from_slice(&t[n_policy..]);
            sum_pg += tape.scalar(terms.policy);
            sum_v += tape.scalar(terms.value);
            sum_clip += terms.clip_frac;
            stats.kl_old = terms.kl_old;
            stats.steps += 1;
        }
        stats.epochs_run = epoch + 1;
    }
    let s = stats.steps.max(1) as f64;
    stats.policy_loss = sum_pg / s;
    stats.value_loss = sum_v / s;
    stats.clip_frac = sum_clip / s;
    Ok(stats)
}
