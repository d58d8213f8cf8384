use std::f64::consts::LN_2;
use std::sync::OnceLock;

use rlp_core::numerics::gradcheck::check_gradients;
use rlp_core::numerics::{rng, Tape, Tensor};
use rlp_core::rewardmodel::*;
use rlp_core::seqmodel::*;
use rlp_core::spg::{build_policy_samples, PolicySampleSet};
use rlp_core::taskworld::*;

struct World {
    splits: Splits,
    sft: PolicyModel,
    human: PreferenceDataset,
    heldout: PreferenceDataset,
    samples: Vec<PolicySampleSet>,
}

fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| {
        let splits = generate_splits(5, SplitCounts::default(), &WorldConfig::default()).unwrap();
        let demos: Vec<_> = splits.sft.iter().map(|x| (x.clone(), gold_answer(x))).collect();
        let init = PolicyModel::new(ModelConfig::default(), 5).unwrap();
        let (sft, _) = sft_train(&init, &demos, &SftConfig::default()).unwrap();
        let spec = TrueRewardSpec::default();
        let sampler = PolicySampler {
            model: &sft,
            config: SamplingConfig::new(1.0, 12, 0),
        };
        let (human, _) = collect_preferences(&sampler, &splits.preference, &spec, 1).unwrap();
        let (heldout, _) = collect_preferences(&sampler, &splits.eval, &spec, 2).unwrap();
        let u = InstructionSet {
            split: Split::Unlabeled,
            items: splits.unlabeled.items[..64].to_vec(),
        };
        let samples = build_policy_samples(&sft, &u, 4, &SamplingConfig::new(1.0, 12, 3)).unwrap();
        World {
            splits,
            sft,
            human,
            heldout,
            samples,
        }
    })
}

fn trained_rm() -> &'static (RewardModel, RewardLog) {
    static R: OnceLock<(RewardModel, RewardLog)> = OnceLock::new();
    R.get_or_init(|| {
        let w = world();
        let init = RewardModel::from_policy(&w.sft, RmRole::Initial);
        let inputs = RewardInputs {
            human: Some(&w.human),
            heldout: Some(&w.heldout),
            ..Default::default()
        };
        train_reward(&init, &inputs, None, 0.0, &RewardTrainConfig::default()).unwrap()
    })
}

#[test]
fn pairwise_loss_closed_forms() {
    assert!((pairwise_loss_from_gaps(&[0.0, 0.0, 0.0]) - LN_2).abs() < 1e-9);
    assert!((pairwise_loss_from_gaps(&[-(3f64.ln())]) - 4f64.ln()).abs() < 1e-12);
    assert!(pairwise_loss_from_gaps(&[1e6]) < 1e-12);
    let w = world();
    let fresh = RewardModel::from_policy(&w.sft, RmRole::Initial);
    let loss = pairwise_loss(&fresh, &w.human.pairs()[..10]).unwrap();
    assert!((loss - LN_2).abs() < 1e-9);
}

#[test]
fn pairwise_loss_depends_on_gaps_only() {
    let mut r = rng::rng(4);
    for _ in 0..50 {
        let g = Tensor::randn(&[6], 2.0, &mut r).into_data();
        // constant shifts cancel inside every gap
        let (w, l): (Vec<f64>, Vec<f64>) = g.iter().map(|&g| (g + 0.3, 0.3)).unzip();
        let gaps: Vec<f64> = w.iter().zip(&l).map(|(a, b)| a - b).collect();
        let shifted: Vec<f64> = w.iter().zip(&l).map(|(a, b)| (a + 7.5) - (b + 7.5)).collect();
        assert!((pairwise_loss_from_gaps(&gaps) - pairwise_loss_from_gaps(&shifted)).abs() < 1e-12);
        for &x in &g {
            let lhs = pairwise_loss_from_gaps(&[-x]);
            let rhs = x + pairwise_loss_from_gaps(&[x]);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}

#[test]
fn scores_are_deterministic_and_zero_when_fresh() {
    let w = world();
    let fresh = RewardModel::from_policy(&w.sft, RmRole::Initial);
    let x = &w.splits.eval.items[0];
    let y = gold_answer(x);
    assert_eq!(fresh.score(x, &y.tokens), 0.0);
    let (rm, _) = trained_rm();
    assert_eq!(rm.score(x, &y.tokens), rm.score(x, &y.tokens));
    assert!(rm.score(x, &[]).is_finite());
}

#[test]
fn trained_reward_model_generalises() {
    let w = world();
    let (rm, log) = trained_rm();
    let acc = log.epochs.last().unwrap().heldout_accuracy.unwrap();
    assert!(acc > 0.5, "held-out accuracy {acc}");
    let mut r = rng::rng(9);
    let (mut gold, mut bad) = (0.0, 0.0);
    for x in w.splits.eval.iter() {
        let y = gold_answer(x);
        let mut c = y.tokens.clone();
        let i = rand::Rng::random_range(&mut r, 0..c.len() - 1);
        let orig = c[i];
        while c[i] == orig {
            c[i] = Token::letter(rand::Rng::random_range(&mut r, 0..MAX_ALPHABET));
        }
        gold += rm.score(x, &y.tokens);
        bad += rm.score(x, &c);
    }
    assert!(gold > bad, "gold {gold} vs corrupted {bad}");
}

#[test]
fn zero_lambda_ignores_head_bitwise() {
    let w = world();
    let init = RewardModel::from_policy(&w.sft, RmRole::Initial);
    let cfg = RewardTrainConfig {
        epochs: 2,
        ..Default::default()
    };
    let inputs = RewardInputs {
        human: Some(&w.human),
        samples: Some(&w.samples),
        ..Default::default()
    };
    let head = MibHead::new(64, MibConfig::default(), 1).unwrap();
    let (a, la) = train_reward(&init, &inputs, None, 0.0, &cfg).unwrap();
    let (b, lb) = train_reward(&init, &inputs, Some(&head), 0.0, &cfg).unwrap();
    assert_eq!(a.net, b.net);
    assert_eq!(a.head, b.head);
    assert_eq!(la, lb);
}

#[test]
fn lambda_weights_logged_addends() {
    let w = world();
    let init = RewardModel::from_policy(&w.sft, RmRole::Initial);
    let cfg = RewardTrainConfig {
        epochs: 1,
        ..Default::default()
    };
    let inputs = RewardInputs {
        human: Some(&w.human),
        samples: Some(&w.samples),
        ..Default::default()
    };
    let head = MibHead::new(64, MibConfig::default(), 1).unwrap();
    let (m, log) = train_reward(&init, &inputs, Some(&head), 0.5, &cfg).unwrap();
    assert!(m.mib.is_some());
    assert_eq!(log.batches.iter().map(|b| b.views).sum::<usize>(), w.samples.len());
    for b in &log.batches {
        assert!(b.views >= 2);
        assert!((b.total - (b.pairwise + 0.5 * b.mib)).abs() < 1e-9);
        assert!((b.mib - (b.skl - b.mi)).abs() < 1e-9);
    }
    let mut lines = Vec::new();
    log.write_lines(&mut lines).unwrap();
    assert_eq!(String::from_utf8(lines).unwrap().lines().count(), log.batches.len() + 1);
    assert!(matches!(
        train_reward(&init, &RewardInputs { human: Some(&w.human), ..Default::default() }, Some(&head), 0.5, &cfg),
        Err(RewardError::MissingViews(_))
    ));
}

#[test]
fn mvi_variant_has_no_skl_contribution() {
    let w = world();
    let init = RewardModel::from_policy(&w.sft, RmRole::Initial);
    let cfg = RewardTrainConfig {
        epochs: 1,
        ..Default::default()
    };
    let inputs = RewardInputs {
        human: Some(&w.human),
        samples: Some(&w.samples),
        ..Default::default()
    };
    let mvi = MibConfig {
        loss: RepresentationLoss::Mvi,
        ..Default::default()
    };
    let head = MibHead::new(64, mvi, 1).unwrap();
    let (_, log) = train_reward(&init, &inputs, Some(&head), 0.5, &cfg).unwrap();
    assert!(log.batches.iter().all(|b| b.skl == 0.0 && (b.mib + b.mi).abs() < 1e-12));
}

fn feature_batch(b: usize, seed: u64) -> Tensor {
    Tensor::randn(&[b, 64], 1.0, &mut rng::rng(seed))
}

#[test]
fn identical_views_have_zero_skl() {
    let head = MibHead::new(64, MibConfig::default(), 2).unwrap();
    let v = feature_batch(8, 1);
    let out = mib_loss(&head, &v, &v, 3).unwrap();
    assert_eq!(out.skl, 0.0);
    assert!((out.loss + out.mi).abs() < 1e-12);
}

#[test]
fn zero_critic_gives_two_ln_two_plus_skl() {
    let mut head = MibHead::new(64, MibConfig::default(), 2).unwrap();
    let names: Vec<String> = head.params.names().to_vec();
    for (n, t) in names.iter().zip(head.params.tensors_mut()) {
        if n.starts_with("critic") {
            t.data_mut().fill(0.0);
        }
    }
    let out = mib_loss(&head, &feature_batch(8, 1), &feature_batch(8, 2), 3).unwrap();
    assert!((out.mi + 2.0 * LN_2).abs() < 1e-12);
    assert!((out.loss - (2.0 * LN_2 + out.skl)).abs() < 1e-12);
    assert!(out.skl > 0.0);
}

#[test]
fn mib_gradients_match_finite_differences() {
    for loss in RepresentationLoss::ALL {
        let cfg = MibConfig {
            dim_z: 4,
            hidden: 8,
            loss,
        };
        let head = MibHead::new(6, cfg.clone(), 7).unwrap();
        let (v1, v2) = (Tensor::randn(&[5, 6], 1.0, &mut rng::rng(1)), Tensor::randn(&[5, 6], 1.0, &mut rng::rng(2)));
        let noise = ViewNoise::draw(5, 4, 11);
        let report = check_gradients(
            &head.params,
            |tape, p| {
                let a = tape.constant(v1.clone());
                let b = tape.constant(v2.clone());
                head.loss_taped(tape, p, a, b, &noise).loss
            },
            6,
            1e-5,
            0,
        );
        assert!(report.max_rel_err < 1e-3, "{loss:?}: {report:?}");
    }
}

#[test]
fn reparameterisation() {
    let mut head = MibHead::new(64, MibConfig::default(), 2).unwrap();
    let v1 = feature_batch(1, 5).into_data();
    let v2 = feature_batch(1, 6).into_data();
    assert_eq!(head.encode_views(&v1, &v2, 4), head.encode_views(&v1, &v2, 4));

    let g = head.gaussian(&v1);
    let n = 10_000;
    let mut sums = vec![0.0; g.mean.len()];
    for s in 0..n {
        let (z1, _) = head.encode_views(&v1, &v2, s);
        for (a, z) in sums.iter_mut().zip(&z1) {
            *a += z;
        }
    }
    for i in 0..g.mean.len() {
        let se = g.dev[i] / (n as f64).sqrt();
        assert!((sums[i] / n as f64 - g.mean[i]).abs() < 3.0 * se + 1e-12, "dim {i}");
    }

    // drive every deviation to ~0 through the final bias
    let id = head.params.find("dev.l3.b").unwrap();
    head.params.get_mut(id).data_mut().fill(-60.0);
    let head = MibHead::from_params(64, MibConfig::default(), head.params.clone()).unwrap();
    let g = head.gaussian(&v1);
    let (z1, _) = head.encode_views(&v1, &v2, 8);
    for (z, m) in z1.iter().zip(&g.mean) {
        assert!((z - m).abs() < 1e-20);
    }
}

#[test]
fn reward_gradients_through_backbone_and_head() {
    let cfg = ModelConfig {
        vocab: 32,
        context_len: 8,
        width: 8,
        heads: 2,
        blocks: 1,
        mlp: 16,
    };
    let policy = PolicyModel::new(cfg, 3).unwrap();
    let mut rm = RewardModel::from_policy(&policy, RmRole::Initial);
    for (i, t) in rm.head.tensors_mut().iter_mut().enumerate() {
        *t = Tensor::randn(t.shape(), 1.0, &mut rng::rng(i as u64));
    }
    let x = Instruction::new(0, TaskFamily::Copy, 0, vec![Token::letter(1), Token::letter(2)]);
    let (yw, yl) = ([Token::letter(1), Token::letter(2), Token::EOS], [Token::letter(3), Token::EOS]);
    let mut joint = rm.net.params().clone();
    joint.append(&rm.head);
    let n = rm.net.params().len();
    let report = check_gradients(
        &joint,
        |tape: &mut Tape, p| {
            let bb = p.range(0, n);
            let hb = p.range(n, 2);
            let fw = rm.features_taped(tape, &bb, &x, &yw);
            let fl = rm.features_taped(tape, &bb, &x, &yl);
            let sw = rm.head_taped(tape, &hb, fw);
            let sl = rm.head_taped(tape, &hb, fl);
            let g = tape.sub(sl, sw);
            tape.softplus(g)
        },
        4,
        1e-5,
        1,
    );
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn checkpoint_round_trip_with_mib_head() {
    let w = world();
    let mut rm = RewardModel::from_policy(&w.sft, RmRole::Retrained);
    rm.mib = Some(MibHead::new(64, MibConfig::default(), 3).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rm.ckpt");
    rm.save(&path).unwrap();
    assert_eq!(RewardModel::load(&path).unwrap(), rm);
    let (trained, _) = trained_rm();
    trained.save(&path).unwrap();
    assert_eq!(&RewardModel::load(&path).unwrap(), trained);
}

#[test]
fn gaussian_probe_orders_correlations() {
    let cfg = MiProbeConfig::default();
    let t = std::time::Instant::now();
    let est: Vec<f64> = [0.0, 0.5, 0.9]
        .iter()
        .map(|&rho| gaussian_mi_probe(rho, 1, &cfg).unwrap())
        .collect();
    eprintln!("probe {est:?} in {:?}", t.elapsed());
    assert!(est[0] < est[1] && est[1] < est[2], "{est:?}");
    assert!(est[0].abs() < 0.1);
}
