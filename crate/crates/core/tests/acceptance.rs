//! Acceptance criteria, each run at its stated tolerance. Prints one
//! PASS/FAIL line per criterion and exits nonzero if any fails.
//!
//! Set `RLP_ACCEPTANCE_DIR` to keep the run artifacts; otherwise they live
//! in a temporary directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng as _;
use rlp_core::numerics::gradcheck::check_gradients;
use rlp_core::numerics::{rng, Tape, Tensor};
use rlp_core::pipeline::*;
use rlp_core::rewardmodel::*;
use rlp_core::rloptim::{sequence_kl, train_policy, ValueHead};
use rlp_core::seqmodel::{ModelConfig, PolicyModel, Transformer};
use rlp_core::spg::*;
use rlp_core::taskworld::*;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn randomise(params: &mut rlp_core::numerics::ParamSet, sd: f64, seed: u64) {
    let mut r = rng::rng(seed);
    for t in params.tensors_mut() {
        let noise = Tensor::randn(t.shape(), sd, &mut r);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}

// 1. Gradient correctness ---------------------------------------------------

fn gradient_correctness() -> Verdict {
    let t = Instant::now();
    let mut results: Vec<(String, f64, f64)> = Vec::new();

    for k in 0..6u64 {
        let cfg = ModelConfig {
            vocab: 5 + k as usize,
            context_len: 4 + (k as usize % 3),
            width: [4, 6, 8][k as usize % 3],
            heads: [1, 2][k as usize % 2],
            blocks: 1 + (k as usize % 2),
            mlp: 6 + 2 * k as usize,
        };
        let mut m = Transformer::new(cfg.clone(), k).unwrap();
        randomise(m.params_mut(), 0.3, 100 + k);
        let mut r = rng::rng(200 + k);
        let toks: Vec<usize> = (0..cfg.context_len).map(|_| r.random_range(0..cfg.vocab)).collect();
        let targets: Vec<usize> = (0..cfg.context_len).map(|_| r.random_range(0..cfg.vocab)).collect();
        let rep = check_gradients(
            m.params(),
            |tape, p| {
                let f = m.forward(tape, p, &toks);
                let lp = tape.log_softmax(f.logits);
                let g = tape.gather(lp, &targets);
                let s = tape.sum(g);
                tape.neg(s)
            },
            4,
            1e-5,
            k,
        );
        results.push((format!("transformer#{k}"), rep.max_rel_err, 1e-4));
    }

    for k in 0..5u64 {
        let cfg = ModelConfig {
            vocab: VOCAB_SIZE,
            context_len: 8 + k as usize % 2,
            width: [4, 8][k as usize % 2],
            heads: [1, 2][k as usize % 2],
            blocks: 1 + k as usize % 2,
            mlp: 8 + 4 * k as usize,
        };
        let policy = PolicyModel::new(cfg, 10 + k).unwrap();
        let mut rm = RewardModel::from_policy(&policy, RmRole::Initial);
        randomise(rm.net.params_mut(), 0.2, 300 + k);
        randomise(&mut rm.head, 1.0, 400 + k);
        let x = Instruction::new(k, TaskFamily::Copy, 0, vec![Token::letter(1), Token::letter(2)]);
        let yw = [Token::letter(1), Token::letter(2), Token::EOS];
        let yl = [Token::letter(k as usize % 3), Token::EOS];
        let mut joint = rm.net.params().clone();
        joint.append(&rm.head);
        let n = rm.net.params().len();
        let rep = check_gradients(
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
            k,
        );
        results.push((format!("reward-model#{k}"), rep.max_rel_err, 1e-4));
    }

    for (k, loss) in RepresentationLoss::ALL.iter().flat_map(|l| [(0u64, *l), (1, *l)]) {
        let cfg = MibConfig {
            dim_z: 3 + k as usize,
            hidden: 6 + 2 * k as usize,
            loss,
        };
        let (b, d) = (4 + k as usize, 5 + k as usize);
        let head = MibHead::new(d, cfg.clone(), 20 + k).unwrap();
        let v1 = Tensor::randn(&[b, d], 1.0, &mut rng::rng(30 + k));
        let v2 = Tensor::randn(&[b, d], 1.0, &mut rng::rng(40 + k));
        let noise = ViewNoise::draw(b, cfg.dim_z, 50 + k);
        let rep = check_gradients(
            &head.params,
            |tape, p| {
                let a = tape.constant(v1.clone());
                let c = tape.constant(v2.clone());
                head.loss_taped(tape, p, a, c, &noise).loss
            },
            6,
            1e-5,
            k,
        );
        results.push((format!("mib-{}#{k}", loss.name()), rep.max_rel_err, 1e-3));
    }

    for k in 0..3u64 {
        let (b, da, db) = (5 + k as usize, 2 + k as usize, 3);
        let critic = JsCritic::new(da, db, 6 + k as usize, 60 + k);
        let a = Tensor::randn(&[b, da], 1.0, &mut rng::rng(70 + k));
        let c = Tensor::randn(&[b, db], 1.0, &mut rng::rng(80 + k));
        let perm = derangement(b, &mut rng::rng(90 + k));
        let rep = check_gradients(
            &critic.params,
            |tape, p| {
                let av = tape.constant(a.clone());
                let cv = tape.constant(c.clone());
                critic.bound_taped(tape, p, av, cv, &perm)
            },
            6,
            1e-5,
            k,
        );
        results.push((format!("js-critic#{k}"), rep.max_rel_err, 1e-4));
    }

    for k in 0..3u64 {
        let (rows, width) = (3 + k as usize, 4 + 2 * k as usize);
        let mut head = ValueHead::new(width);
        randomise(&mut head.params, 1.0, 500 + k);
        let feats = Tensor::randn(&[rows, width], 1.0, &mut rng::rng(600 + k));
        let targets = Tensor::randn(&[rows], 1.0, &mut rng::rng(700 + k));
        let rep = check_gradients(
            &head.params,
            |tape, p| {
                let f = tape.constant(feats.clone());
                let v = head.forward(tape, p, f);
                let tg = tape.constant(targets.clone());
                let d = tape.sub(v, tg);
                let sq = tape.square(d);
                tape.mean(sq)
            },
            6,
            1e-5,
            k,
        );
        results.push((format!("value-head#{k}"), rep.max_rel_err, 1e-4));
    }

    let elapsed = t.elapsed();
    let failed: Vec<String> = results
        .iter()
        .filter(|(_, e, tol)| !(e <= tol))
        .map(|(n, e, tol)| format!("{n} {e:.2e}>{tol:.0e}"))
        .collect();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let pass = failed.is_empty() && results.len() >= 20 && elapsed <= Duration::from_secs(60);
    verdict(
        pass,
        format!(
            "{} configurations, worst relative error {worst:.2e}, {:.1}s{}",
            results.len(),
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    )
}

// 2. Closed forms -------------------------------------------------------------

fn closed_forms() -> Verdict {
    let pair = pairwise_loss_from_gaps(&[0.0]);
    let e_pair = (pair - std::f64::consts::LN_2).abs();

    let mut r = rng::rng(5);
    let mut e_same: f64 = 0.0;
    for _ in 0..50 {
        let d = r.random_range(1..8);
        let g = GaussianRepresentation {
            mean: (0..d).map(|_| r.random_range(-3.0..3.0)).collect(),
            dev: (0..d).map(|_| r.random_range(0.1..3.0)).collect(),
        };
        e_same = e_same.max(skl_divergence(&g, &g).unwrap().abs());
    }

    // KL(N(0,1) || N(1,1)) by composite Simpson on [-14, 15]
    let (a, b, n) = (-14.0f64, 15.0f64, 200_000usize);
    let h = (b - a) / n as f64;
    let f = |x: f64| {
        let p = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let lp = -0.5 * x * x;
        let lq = -0.5 * (x - 1.0) * (x - 1.0);
        p * (lp - lq)
    };
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let numeric = s * h / 3.0;
    let g0 = GaussianRepresentation {
        mean: vec![0.0],
        dev: vec![1.0],
    };
    let g1 = GaussianRepresentation {
        mean: vec![1.0],
        dev: vec![1.0],
    };
    let closed = skl_divergence(&g0, &g1).unwrap();
    let e_kl = (closed - numeric).abs().max((closed - 0.5).abs());

    verdict(
        e_pair <= 1e-9 && e_same <= 1e-12 && e_kl <= 1e-6,
        format!("|L(0)-ln2| {e_pair:.1e}, SKL(g,g) max {e_same:.1e}, KL d=1 {closed:.9} vs integral {numeric:.9}"),
    )
}

// 3. MI estimator sanity ----------------------------------------------------

fn mi_sanity() -> Verdict {
    let t = Instant::now();
    let cfg = MiProbeConfig::default();
    let mut ordered = 0;
    let mut indep = Vec::new();
    let mut rows = Vec::new();
    for seed in 0..10u64 {
        let est: Vec<f64> = [0.0, 0.5, 0.9]
            .iter()
            .map(|&rho| gaussian_mi_probe(rho, seed, &cfg).unwrap())
            .collect();
        if est[0] < est[1] && est[1] < est[2] {
            ordered += 1;
        }
        indep.push(est[0]);
        rows.push(format!("{:.3}/{:.3}/{:.3}", est[0], est[1], est[2]));
    }
    let mean0 = indep.iter().sum::<f64>() / indep.len() as f64;
    let elapsed = t.elapsed();
    verdict(
        ordered >= 9 && mean0.abs() <= 0.05 && elapsed <= Duration::from_secs(120),
        format!(
            "strictly increasing in {ordered}/10 runs, independent mean {mean0:+.4}, {:.1}s [{}]",
            elapsed.as_secs_f64(),
            rows.join(" ")
        ),
    )
}

// 4. Clustering oracle equivalence ------------------------------------------

fn clustering_equivalence() -> Verdict {
    let mut r = rng::rng(2024);
    let (mut agree, mut partitions, mut classes) = (0, 0, 0);
    let total = 1000;
    for id in 0..total as u64 {
        let x = Instruction::new(id, TaskFamily::Copy, 0, vec![Token::letter(0), Token::letter(1)]);
        let letters = r.random_range(1..4usize);
        let responses = (0..10)
            .map(|_| {
                let len = r.random_range(0..4);
                let mut t: Vec<Token> = (0..len).map(|_| Token::letter(r.random_range(0..letters))).collect();
                if r.random_bool(0.7) {
                    t.push(Token::EOS);
                }
                Response::new(t, ModelTag::Ppo)
            })
            .collect();
        let set = PolicySampleSet {
            instruction: x.clone(),
            responses,
            tag: ModelTag::Ppo,
        };
        let greedy = cluster(&set, &ExactCanonical).unwrap();
        let brute = cluster_components(&set, &ExactCanonical).unwrap();
        agree += usize::from(greedy == brute);
        partitions += usize::from(greedy.is_partition() && greedy.sizes().iter().sum::<usize>() == 10);
        let eq = |i: usize, j: usize| ExactCanonical.equivalent(&x, &set.responses[i].tokens, &set.responses[j].tokens).unwrap();
        let within = greedy.groups.iter().all(|g| g.iter().all(|&i| eq(g[0], i)));
        let across = greedy
            .groups
            .iter()
            .enumerate()
            .all(|(a, g)| greedy.groups[a + 1..].iter().all(|h| !eq(g[0], h[0])));
        classes += usize::from(within && across);
    }
    verdict(
        agree == total && partitions == total && classes == total,
        format!("greedy = components in {agree}/{total}, partitions {partitions}/{total}, equivalence classes {classes}/{total}"),
    )
}

// shared experiment ---------------------------------------------------------

fn seed_config(base: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        method: Method::Ablations,
        out_dir: base.out_dir.join(format!("seed-{seed}")),
        ..base.clone()
    }
}

// 5. SPG selectivity --------------------------------------------------------

fn spg_selectivity(base: &ExperimentConfig) -> Verdict {
    let t = Instant::now();
    let spec = base.reward_spec();
    let mut pairs = Vec::new();
    for &seed in &base.ablation_seeds {
        let mut runner = Runner::open(seed_config(base, seed)).unwrap();
        let spg = runner.synthetic(Variant::Spg).unwrap();
        let all = runner.synthetic(Variant::SelectAll).unwrap();
        let a = true_reward_accuracy(&spg, &spec).unwrap_or(f64::NAN);
        let b = true_reward_accuracy(&all, &spec).unwrap_or(f64::NAN);
        pairs.push((a, b, spg.len(), all.len()));
    }
    let n = pairs.len() as f64;
    let (ma, mb) = (pairs.iter().map(|p| p.0).sum::<f64>() / n, pairs.iter().map(|p| p.1).sum::<f64>() / n);
    let strict = pairs.iter().filter(|p| p.0 > p.1).count();
    let elapsed = t.elapsed();
    let per: Vec<String> = pairs
        .iter()
        .map(|(a, b, na, nb)| format!("{:.3}({na}) vs {:.3}({nb})", a, b))
        .collect();
    verdict(
        ma >= mb && strict >= 3 && elapsed <= Duration::from_secs(300),
        format!(
            "accuracy gamma=0.5 {ma:.4} vs gamma=0 {mb:.4}, strict in {strict}/5 seeds, {:.0}s [{}]",
            elapsed.as_secs_f64(),
            per.join("; ")
        ),
    )
}

// 6 and 7. End-to-end ordering and loss ablation ------------------------------

fn ordering(suite: &SuiteReport, elapsed: Duration) -> Verdict {
    let checks = [
        ("PPO > SFT", suite.row("ppo").map(|r| r.win_rates().iter().map(|w| w - 50.0).collect::<Vec<_>>()).unwrap_or_default()),
        ("RLP-SPG > PPO", suite.margins("rlp-spg", "ppo")),
        ("RLP-UML > PPO", suite.margins("rlp-uml", "ppo")),
    ];
    let mut pass = elapsed <= Duration::from_secs(45 * 60);
    let mut parts = Vec::new();
    for (name, m) in &checks {
        let mean = if m.is_empty() { f64::NAN } else { m.iter().sum::<f64>() / m.len() as f64 };
        let p = sign_test_p(m);
        let ok = m.len() == suite.seeds.len() && mean > 0.0 && p < 0.1;
        pass &= ok;
        parts.push(format!("{name}: margin {mean:+.2} p={p:.3} {}", if ok { "ok" } else { "no" }));
    }
    let means: Vec<String> = ["ppo", "rlp-uml", "rlp-spg"]
        .iter()
        .filter_map(|n| suite.row(n).map(|r| format!("{n} {:.2}", r.mean_std().0)))
        .collect();
    verdict(
        pass,
        format!("{}; means {}; {:.1} min", parts.join(", "), means.join(", "), elapsed.as_secs_f64() / 60.0),
    )
}

fn loss_ablation(suite: &SuiteReport) -> Verdict {
    let means: Vec<String> = Variant::LOSS_ABLATION
        .iter()
        .filter_map(|v| suite.row(v.name()).map(|r| format!("{} {:.2}", v.name(), r.mean_std().0)))
        .collect();
    let seeds_ok = Variant::LOSS_ABLATION
        .iter()
        .all(|v| suite.row(v.name()).is_some_and(|r| r.runs.len() >= 5));
    let v = suite.loss_verdict();
    let label = match v {
        Some(LossVerdict::MibBest) => "MIB best",
        Some(LossVerdict::Inconclusive) => "INCONCLUSIVE (MIB neither best nor last)",
        Some(LossVerdict::MibLast) => "MIB strictly last",
        None => "incomplete",
    };
    verdict(
        seeds_ok && matches!(v, Some(LossVerdict::MibBest | LossVerdict::Inconclusive)),
        format!("{label}; means {}", means.join(", ")),
    )
}

// 8. KL-regularisation contract ---------------------------------------------

fn kl_contract(base: &ExperimentConfig) -> Verdict {
    let betas = [0.05, 0.1, 0.5, 1.0];
    let mut kl: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for seed in 0..3u64 {
        let mut runner = Runner::open(seed_config(base, seed)).unwrap();
        let sft = runner.sft().unwrap();
        let rm = runner.reward_model().unwrap();
        let splits = runner.data().unwrap();
        for (i, &beta) in betas.iter().enumerate() {
            let policy = if beta == base.ppo_beta {
                runner.ppo().unwrap()
            } else {
                let cfg = rlp_core::rloptim::PpoConfig {
                    beta,
                    ..runner.cfg.ppo()
                };
                train_policy(&sft, &rm, &splits.unlabeled, ModelTag::Ppo, &cfg).unwrap().0
            };
            let k = sequence_kl(&policy, &sft, &splits.eval.items, 4, base.max_response_len, 77 + seed);
            kl.entry(i).or_default().push(k);
        }
    }
    let avg: Vec<f64> = (0..betas.len()).map(|i| kl[&i].iter().sum::<f64>() / kl[&i].len() as f64).collect();
    let pass = avg[1] < avg[0] && avg[3] < avg[2];
    let parts: Vec<String> = betas.iter().zip(&avg).map(|(b, k)| format!("beta {b}: {k:.4}")).collect();
    verdict(pass, format!("3-seed mean sequence KL {}", parts.join(", ")))
}

// 9. Determinism --------------------------------------------------------------

fn determinism(root: &Path) -> Verdict {
    let run = |name: &str| {
        let cfg = ExperimentConfig {
            seed: 0,
            method: Method::RlpSpg,
            out_dir: root.join(name),
            ..ExperimentConfig::default()
        };
        run_algorithm1(&cfg).unwrap()
    };
    let (a, b) = (run("det-a"), run("det-b"));
    let files = |m: &RunManifest| -> BTreeMap<String, String> {
        m.stages
            .iter()
            .flat_map(|s| s.files.iter().map(move |f| (format!("{}/{}", s.name, f.label), f.sha256.clone())))
            .collect()
    };
    let (fa, fb) = (files(&a), files(&b));
    let mismatched: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    let load = |name: &str, m: &RunManifest| {
        let p = m.path(&root.join(name), "eval-rlp-spg", "winrate").unwrap();
        WinRateReport::parse_lines(&std::fs::read_to_string(p).unwrap()).unwrap()
    };
    let (wa, wb) = (load("det-a", &a), load("det-b", &b));
    let datasets = ["data/", "prefs/", "samples/", "synth-rlp-spg/dhat"]
        .iter()
        .map(|p| fa.keys().filter(|k| k.starts_with(p)).count())
        .sum::<usize>();
    verdict(
        fa.len() == fb.len() && mismatched.is_empty() && wa == wb,
        format!(
            "{} outputs ({datasets} datasets) byte-identical, win-rate {:.3} vs {:.3}{}",
            fa.len() - mismatched.len(),
            wa.mean(),
            wb.mean(),
            if mismatched.is_empty() { String::new() } else { format!("; differing: {mismatched:?}") }
        ),
    )
}

fn main() {
    let total = Instant::now();
    let keep = std::env::var_os("RLP_ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().unwrap();
    let root = keep.unwrap_or_else(|| tmp.path().to_path_buf());
    std::fs::create_dir_all(&root).unwrap();
    let base = ExperimentConfig {
        out_dir: root.join("suite"),
        ..ExperimentConfig::default()
    };

    let mut outcomes: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut report = |n: u32, name: &'static str, v: Verdict| {
        println!("[{}] criterion {n} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        outcomes.push((n, name, v));
    };

    report(1, "gradient correctness", gradient_correctness());
    report(2, "closed-form checks", closed_forms());
    report(3, "MI-estimator sanity", mi_sanity());
    report(4, "clustering oracle equivalence", clustering_equivalence());

    let suite_start = Instant::now();
    report(5, "SPG selectivity", spg_selectivity(&base));
    let suite = run_ablation_suite(&base).unwrap();
    let suite_time = suite_start.elapsed();
    std::fs::write(root.join("suite.txt"), suite.write_lines()).unwrap();
    let text = emit_report(&[], &[], Some(&suite)).unwrap();
    std::fs::write(root.join("report.txt"), &text).unwrap();
    println!("{text}");
    report(6, "end-to-end ordering", ordering(&suite, suite_time));
    report(7, "representation-loss ablation", loss_ablation(&suite));
    report(8, "KL-regularisation contract", kl_contract(&base));
    report(9, "determinism", determinism(&root));

    let failed: Vec<u32> = outcomes.iter().filter(|o| !o.2.pass).map(|o| o.0).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.1} min",
        outcomes.len() - failed.len(),
        outcomes.len(),
        total.elapsed().as_secs_f64() / 60.0
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
