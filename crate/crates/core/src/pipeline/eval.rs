use std::collections::HashMap;
use std::io::Write;

use crate::numerics::rng;
use crate::rewardmodel::RewardModel;
use crate::seqmodel::{PolicyModel, SamplingConfig};
use crate::taskworld::{annotate, gold_answer, Instruction, InstructionSet, Response, TaskFamily, TrueRewardSpec};

/// Something that answers an instruction given a sampling seed.
pub trait Responder {
    fn respond(&self, x: &Instruction, seed: u64) -> Response;
}

/// Plain temperature sampling from a policy.
pub struct Sampled<'a> {
    pub policy: &'a PolicyModel,
    pub temperature: f64,
    pub max_new_tokens: usize,
}

impl Responder for Sampled<'_> {
    fn respond(&self, x: &Instruction, seed: u64) -> Response {
        self.policy
            .sample(x, &SamplingConfig::new(self.temperature, self.max_new_tokens, seed))
    }
}

/// Best of `n` policy samples under a reward model.
pub struct BestOfN<'a> {
    pub policy: &'a PolicyModel,
    pub reward: &'a RewardModel,
    pub n: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
}

impl Responder for BestOfN<'_> {
    fn respond(&self, x: &Instruction, seed: u64) -> Response {
        let cfg = SamplingConfig::new(self.temperature, self.max_new_tokens, seed);
        best_of_n_decode(self.policy, self.reward, x, self.n, &cfg)
    }
}

/// Always answers with the gold response.
pub struct GoldSolver;

impl Responder for GoldSolver {
    fn respond(&self, x: &Instruction, _seed: u64) -> Response {
        gold_answer(x)
    }
}

/// Highest-scoring of `n` samples drawn as by `sample_set`; ties go to the
/// earliest draw.
pub fn best_of_n_decode(
    policy: &PolicyModel,
    reward: &RewardModel,
    x: &Instruction,
    n: usize,
    cfg: &SamplingConfig,
) -> Response {
    assert!(n >= 1, "best-of-n needs n >= 1");
    let mut best: Option<(f64, Response)> = None;
    for y in policy.sample_set(x, n, cfg) {
        let s = reward.score(x, &y.tokens);
        if best.as_ref().is_none_or(|(top, _)| s > *top) {
            best = Some((s, y));
        }
    }
    best.expect("n >= 1").1
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
}

impl Tally {
    pub fn total(&self) -> usize {
        self.wins + self.ties + self.losses
    }

    /// Percentage with ties counted half; 50 for an empty tally.
    pub fn win_rate(&self) -> f64 {
        if self.total() == 0 {
            return 50.0;
        }
        100.0 * (self.wins as f64 + 0.5 * self.ties as f64) / self.total() as f64
    }

    fn add(&mut self, o: &Tally) {
        self.wins += o.wins;
        self.ties += o.ties;
        self.losses += o.losses;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub tally: Tally,
    pub by_family: Vec<(TaskFamily, Tally)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WinRateReport {
    pub method: String,
    pub opponent: String,
    pub seeds: Vec<SeedOutcome>,
}

impl WinRateReport {
    pub fn rates(&self) -> Vec<f64> {
        self.seeds.iter().map(|s| s.tally.win_rate()).collect()
    }

    pub fn mean(&self) -> f64 {
        mean_std(&self.rates()).0
    }

    pub fn std(&self) -> f64 {
        mean_std(&self.rates()).1
    }

    /// Outcomes per task family, pooled over seeds.
    pub fn by_family(&self) -> Vec<(TaskFamily, Tally)> {
        TaskFamily::ALL
            .iter()
            .map(|&f| {
                let mut t = Tally::default();
                for s in &self.seeds {
                    for (g, u) in &s.by_family {
                        if *g == f {
                            t.add(u);
                        }
                    }
                }
                (f, t)
            })
            .filter(|(_, t)| t.total() > 0)
            .collect()
    }

    pub fn write_lines<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for s in &self.seeds {
            writeln!(
                w,
                "method={}\topponent={}\tseed={}\twins={}\tties={}\tlosses={}\twin_rate={:.3}",
                self.method,
                self.opponent,
                s.seed,
                s.tally.wins,
                s.tally.ties,
                s.tally.losses,
                s.tally.win_rate()
            )?;
            for (f, t) in &s.by_family {
                writeln!(
                    w,
                    "method={}\topponent={}\tseed={}\tfamily={}\twins={}\tties={}\tlosses={}",
                    self.method,
                    self.opponent,
                    s.seed,
                    f.name(),
                    t.wins,
                    t.ties,
                    t.losses
                )?;
            }
        }
        Ok(())
    }

    /// Inverse of [`WinRateReport::write_lines`].
    pub fn parse_lines(text: &str) -> Result<Self, String> {
        let mut report = WinRateReport {
            method: String::new(),
            opponent: String::new(),
            seeds: Vec::new(),
        };
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let err = |m: &str| format!("line {}: {m}", i + 1);
            let f: HashMap<&str, &str> = line.split('\t').filter_map(|p| p.split_once('=')).collect();
            let get = |k: &str| f.get(k).copied().ok_or_else(|| err(&format!("missing {k}")));
            let count = |k: &str| get(k)?.parse::<usize>().map_err(|_| err(&format!("bad {k}")));
            let seed: u64 = get("seed")?.parse().map_err(|_| err("bad seed"))?;
            report.method = get("method")?.to_string();
            report.opponent = get("opponent")?.to_string();
            let tally = Tally {
                wins: count("wins")?,
                ties: count("ties")?,
                losses: count("losses")?,
            };
            match f.get("family") {
                None => report.seeds.push(SeedOutcome {
                    seed,
                    tally,
                    by_family: Vec::new(),
                }),
                Some(name) => {
                    let fam = TaskFamily::ALL
                        .into_iter()
                        .find(|g| g.name() == *name)
                        .ok_or_else(|| err("unknown family"))?;
                    let s = report
                        .seeds
                        .last_mut()
                        .filter(|s| s.seed == seed)
                        .ok_or_else(|| err("family line before its seed line"))?;
                    s.by_family.push((fam, tally));
                }
            }
        }
        if report.seeds.is_empty() {
            return Err("no records".into());
        }
        Ok(report)
    }
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, 0.0);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    /// Both sides draw with the same sampling seed per instruction.
    pub shared_sampling: bool,
}

/// Head-to-head comparison judged by the simulated annotator. Identical
/// outputs are ties; otherwise the annotator's Bradley-Terry draw decides.
pub fn evaluate_winrate(
    method: (&str, &dyn Responder),
    opponent: (&str, &dyn Responder),
    eval: &InstructionSet,
    spec: &TrueRewardSpec,
    cfg: &EvalConfig,
) -> WinRateReport {
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut tally = Tally::default();
        let mut fam: Vec<(TaskFamily, Tally)> = TaskFamily::ALL.iter().map(|&f| (f, Tally::default())).collect();
        for x in eval.iter() {
            let s_a = rng::derive_seed(&[seed, rng::label("eval-sample"), x.id]);
            let s_b = if cfg.shared_sampling {
                s_a
            } else {
                rng::derive_seed(&[seed, rng::label("eval-sample-opponent"), x.id])
            };
            let a = method.1.respond(x, s_a);
            let b = opponent.1.respond(x, s_b);
            let slot = &mut fam.iter_mut().find(|(f, _)| *f == x.family).expect("known family").1;
            if a.tokens == b.tokens {
                tally.ties += 1;
                slot.ties += 1;
                continue;
            }
            let judge = rng::derive_seed(&[seed, rng::label("eval-judge"), x.id]);
            let verdict = annotate(x, &a, &b, spec, judge).expect("distinct responses");
            if verdict.chosen.tokens == a.tokens {
                tally.wins += 1;
                slot.wins += 1;
            } else {
                tally.losses += 1;
                slot.losses += 1;
            }
        }
        fam.retain(|(_, t)| t.total() > 0);
        seeds.push(SeedOutcome {
            seed,
            tally,
            by_family: fam,
        });
    }
    WinRateReport {
        method: method.0.to_string(),
        opponent: opponent.0.to_string(),
        seeds,
    }
}
