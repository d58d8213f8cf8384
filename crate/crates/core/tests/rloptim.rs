use std::sync::OnceLock;
use std::time::Instant;

use rlp_core::numerics::{AdamConfig, Adam, Tape};
use rlp_core::rewardmodel::*;
use rlp_core::rloptim::*;
use rlp_core::seqmodel::*;
use rlp_core::taskworld::*;

struct World {
    splits: Splits,
    sft: PolicyModel,
    rm: RewardModel,
}

fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| {
        let t = Instant::now();
        let splits = generate_splits(11, SplitCounts::default(), &WorldConfig::default()).unwrap();
        let demos: Vec<_> = splits.sft.iter().map(|x| (x.clone(), gold_answer(x))).collect();
        let init = PolicyModel::new(ModelConfig::default(), 11).unwrap();
        let (sft, _) = sft_train(&init, &demos, &SftConfig::default()).unwrap();
        let sampler = PolicySampler {
            model: &sft,
            config: SamplingConfig::new(1.0, 12, 0),
        };
        let (human, _) = collect_preferences(&sampler, &splits.preference, &TrueRewardSpec::default(), 1).unwrap();
        let inputs = RewardInputs {
            human: Some(&human),
            ..Default::default()
        };
        let init_rm = RewardModel::from_policy(&sft, RmRole::Initial);
        let (rm, _) = train_reward(&init_rm, &inputs, None, 0.0, &RewardTrainConfig::default()).unwrap();
        eprintln!("world built in {:.1}s", t.elapsed().as_secs_f64());
        World { splits, sft, rm }
    })
}

fn untrained(seed: u64) -> PolicyModel {
    PolicyModel::new(ModelConfig::default(), seed).unwrap()
}

fn probe(w: &World) -> &[Instruction] {
    &w.splits.eval.items[..48]
}

fn mean_rm_score(policy: &PolicyModel, rm: &RewardModel, xs: &[Instruction]) -> f64 {
    let cfg = SamplingConfig::new(1.0, 12, 77);
    let mut total = 0.0;
    let mut n = 0;
    for x in xs {
        for y in policy.sample_set(x, 4, &cfg) {
            total += rm.score(x, &y.tokens);
            n += 1;
        }
    }
    total / n as f64
}

fn small_batch(policy: &PolicyModel, reference: &PolicyModel, beta: f64) -> RolloutBatch {
    let w = world();
    let cfg = PpoConfig { beta, ..Default::default() };
    let value = ValueHead::new(policy.config().width);
    collect_rollouts(policy, &value, reference, &w.rm, &w.splits.unlabeled.items[..12], &cfg, 3)
}

#[test]
fn zero_beta_leaves_only_the_terminal_score() {
    let (p, q) = (untrained(1), untrained(2));
    let batch = small_batch(&p, &q, 0.0);
    for r in &batch.rollouts {
        let n = r.len();
        assert!(r.rewards[..n - 1].iter().all(|&x| x == 0.0));
        assert_eq!(r.rewards[n - 1], r.score);
    }
}

#[test]
fn identical_policy_and_reference_have_zero_penalty() {
    let p = untrained(1);
    let batch = small_batch(&p, &p, 0.05);
    for r in &batch.rollouts {
        let n = r.len();
        assert!(r.rewards[..n - 1].iter().all(|&x| x == 0.0));
        assert_eq!(r.rewards[n - 1], r.score);
    }
}

#[test]
fn penalty_matches_recomputed_log_ratio() {
    let (p, q) = (untrained(1), untrained(2));
    let batch = small_batch(&p, &q, 0.05);
    let (mut penalty, mut ratio, mut n) = (0.0, 0.0, 0);
    for r in &batch.rollouts {
        let (_, lp) = p.sequence_logprob(&r.instruction, &r.response.tokens);
        let (_, lq) = q.sequence_logprob(&r.instruction, &r.response.tokens);
        for t in 0..r.len() {
            let shaped = r.rewards[t] - if t + 1 == r.len() { r.score } else { 0.0 };
            penalty += shaped;
            ratio += lp[t] - lq[t];
            assert!((shaped + 0.05 * (lp[t] - lq[t])).abs() < 1e-9);
            n += 1;
        }
    }
    assert!((penalty / n as f64 + 0.05 * ratio / n as f64).abs() < 1e-10);
}

#[test]
fn whitened_advantages_are_standardised() {
    let (p, q) = (untrained(1), untrained(2));
    let batch = small_batch(&p, &q, 0.05);
    let a: Vec<f64> = batch.rollouts.iter().flat_map(|r| r.advantages.clone()).collect();
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
    assert!(mean.abs() < 1e-6);
    assert!((std - 1.0).abs() < 1e-6);
}

#[test]
fn first_step_surrogate_is_zero_on_the_full_batch() {
    let (p, q) = (untrained(1), untrained(2));
    let batch = small_batch(&p, &q, 0.05);
    let value = ValueHead::new(p.config().width);
    let mut tape = Tape::new();
    let pb = p.params().bind(&mut tape);
    let vb = value.params.bind(&mut tape);
    let all: Vec<&Rollout> = batch.rollouts.iter().collect();
    let terms = ppo_loss_taped(&p, &value, &mut tape, &pb, &vb, &all, &PpoConfig::default());
    assert!(tape.scalar(terms.policy).abs() < 1e-6);
    assert_eq!(terms.clip_frac, 0.0);
    assert!(terms.kl_old.abs() < 1e-9);
}

#[test]
fn equal_advantages_stay_finite() {
    let p = untrained(1);
    let mut batch = small_batch(&p, &p, 0.05);
    for r in &mut batch.rollouts {
        r.advantages.iter_mut().for_each(|a| *a = 0.7);
    }
    whiten(&mut batch, 1e-6);
    assert!(batch.rollouts.iter().flat_map(|r| &r.advantages).all(|a| a.abs() < 1e-6));
    let mut policy = p.clone();
    let mut value = ValueHead::new(p.config().width);
    let mut joint = policy.params().clone();
    joint.append(&value.params);
    let cfg = PpoConfig::default();
    let mut opt = Adam::new(cfg.optimizer.clone(), &joint);
    let stats = ppo_update(&mut policy, &mut value, &mut opt, &batch, &cfg, 0).unwrap();
    assert!(stats.policy_loss.is_finite() && stats.value_loss.is_finite());
}

#[test]
fn positive_advantage_raises_that_token_probability() {
    let p = untrained(1);
    let mut batch = small_batch(&p, &p, 0.0);
    batch.rollouts.truncate(1);
    let r = &mut batch.rollouts[0];
    r.advantages.iter_mut().for_each(|a| *a = 0.0);
    let t = r.len() / 2;
    r.advantages[t] = 1.0;
    let (x, y) = (r.instruction.clone(), r.response.tokens.clone());
    let before = p.sequence_logprob(&x, &y).1[t];

    let cfg = PpoConfig {
        epochs: 1,
        minibatch: 1,
        optimizer: AdamConfig::with_lr(1e-4),
        ..Default::default()
    };
    let mut policy = p.clone();
    let mut value = ValueHead::new(p.config().width);
    let mut joint = policy.params().clone();
    joint.append(&value.params);
    let mut opt = Adam::new(cfg.optimizer.clone(), &joint);
    ppo_update(&mut policy, &mut value, &mut opt, &batch, &cfg, 0).unwrap();
    let after = policy.sequence_logprob(&x, &y).1[t];
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn unclipped_surrogate_gradient_is_reinforce() {
    let p = untrained(1);
    let batch = small_batch(&p, &untrained(2), 0.0);
    let r = &batch.rollouts[0];
    let cfg = PpoConfig {
        beta: 0.0,
        clip: 1e12,
        epochs: 1,
        ..Default::default()
    };
    let value = ValueHead::new(p.config().width);

    let mut tape = Tape::new();
    let pb = p.params().bind(&mut tape);
    let vb = value.params.bind_frozen(&mut tape);
    let terms = ppo_loss_taped(&p, &value, &mut tape, &pb, &vb, &[r], &cfg);
    let ppo = pb.grads(&tape.backward(terms.policy).unwrap());

    // REINFORCE: -(1/T) sum_t A_t log pi(y_t)
    let mut tape = Tape::new();
    let pb = p.params().bind(&mut tape);
    let s = p.taped_logprobs(&mut tape, &pb, &r.instruction, &r.response.tokens);
    let adv = tape.constant(rlp_core::numerics::Tensor::vector(r.advantages.clone()));
    let weighted = tape.mul(s.token, adv);
    let total = tape.sum(weighted);
    let loss = tape.scale(total, -1.0 / r.len() as f64);
    let reinforce = pb.grads(&tape.backward(loss).unwrap());

    let mut worst: f64 = 0.0;
    let mut norm: f64 = 0.0;
    for (a, b) in ppo.iter().zip(&reinforce) {
        for (u, v) in a.data().iter().zip(b.data()) {
            worst = worst.max((u - v).abs());
            norm = norm.max(v.abs());
        }
    }
    assert!(norm > 0.0);
    assert!(worst <= 1e-6 * norm, "max diff {worst} vs scale {norm}");
}

#[test]
fn zero_iterations_return_the_initial_policy() {
    let w = world();
    let u = InstructionSet {
        split: Split::Unlabeled,
        items: w.splits.unlabeled.items[..8].to_vec(),
    };
    let cfg = PpoConfig {
        iterations: 0,
        ..Default::default()
    };
    let (out, log) = train_policy(&w.sft, &w.rm, &u, ModelTag::Ppo, &cfg).unwrap();
    assert!(log.iterations.is_empty());
    assert_eq!(out.params(), w.sft.params());
}

#[test]
fn invalid_config_is_rejected() {
    let w = world();
    let cfg = PpoConfig {
        clip: 0.0,
        ..Default::default()
    };
    assert!(matches!(
        train_policy(&w.sft, &w.rm, &w.splits.unlabeled, ModelTag::Ppo, &cfg),
        Err(PpoError::Config(_))
    ));
}

#[test]
fn ppo_raises_reward_model_score_and_respects_beta() {
    let w = world();
    let sft_score = mean_rm_score(&w.sft, &w.rm, probe(w));
    let snapshot = w.sft.params().clone();
    let mut kls = Vec::new();
    for beta in [0.05, 0.5] {
        let cfg = PpoConfig {
            beta,
            iterations: 60,
            seed: 4,
            ..Default::default()
        };
        let t = Instant::now();
        let (policy, log) = train_policy(&w.sft, &w.rm, &w.splits.unlabeled, ModelTag::Ppo, &cfg).unwrap();
        let score = mean_rm_score(&policy, &w.rm, probe(w));
        let kl = sequence_kl(&policy, &w.sft, probe(w), 4, 12, 9);
        let last = log.iterations.last().unwrap();
        eprintln!(
            "beta={beta} {:.1}s sft={sft_score:.3} ppo={score:.3} kl={kl:.4} last={last:?}",
            t.elapsed().as_secs_f64()
        );
        if beta == 0.05 {
            assert!(score > sft_score);
        }
        kls.push(kl);
    }
    assert!(kls[1] < kls[0], "{kls:?}");
    assert_eq!(w.sft.params(), &snapshot);
}
