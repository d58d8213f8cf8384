use std::collections::HashMap;
use std::fmt::Write as _;

use crate::spg::true_reward_accuracy;

use super::config::{ExperimentConfig, Method};
use super::eval::{mean_std, WinRateReport};
use super::run::{Runner, Variant};
use super::PipelineError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowGroup {
    Baseline,
    Loss,
    Preference,
}

impl RowGroup {
    pub fn name(self) -> &'static str {
        match self {
            RowGroup::Baseline => "baseline",
            RowGroup::Loss => "loss",
            RowGroup::Preference => "preference",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [RowGroup::Baseline, RowGroup::Loss, RowGroup::Preference]
            .into_iter()
            .find(|g| g.name() == s)
    }
}

/// One completed seed of one row.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub win_rate: f64,
    /// Accuracy of the synthetic pairs against the noiseless r* ranking.
    pub pref_accuracy: Option<f64>,
    /// Sum of the logged SKL addends over reward retraining.
    pub skl_total: Option<f64>,
    pub report: Option<WinRateReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantRow {
    pub name: String,
    pub group: RowGroup,
    pub runs: Vec<SeedRun>,
    pub failures: Vec<(u64, String)>,
}

impl VariantRow {
    fn new(name: &str, group: RowGroup) -> Self {
        Self {
            name: name.into(),
            group,
            runs: Vec::new(),
            failures: Vec::new(),
        }
    }

    pub fn win_rates(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.win_rate).collect()
    }

    pub fn win_rate(&self, seed: u64) -> Option<f64> {
        self.runs.iter().find(|r| r.seed == seed).map(|r| r.win_rate)
    }

    /// Mean and sample std of the win-rate over completed seeds.
    pub fn mean_std(&self) -> (f64, f64) {
        mean_std(&self.win_rates())
    }

    pub fn pref_accuracies(&self) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.pref_accuracy).collect()
    }
}

/// Outcome of the representation-loss comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossVerdict {
    /// MIB mean is at least every other mean.
    MibBest,
    /// MIB is neither best nor strictly last.
    Inconclusive,
    MibLast,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<VariantRow>,
}

/// One-sided sign-test p-value for "margins are positive". Zero margins
/// are dropped.
pub fn sign_test_p(margins: &[f64]) -> f64 {
    let n = margins.iter().filter(|m| **m != 0.0).count();
    let k = margins.iter().filter(|m| **m > 0.0).count();
    let choose = |n: usize, r: usize| (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    (k..=n).map(|j| choose(n, j)).sum::<f64>() / 2f64.powi(n as i32)
}

impl SuiteReport {
    pub fn row(&self, name: &str) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Per-seed win-rate differences `a - b` over seeds both completed.
    pub fn margins(&self, a: &str, b: &str) -> Vec<f64> {
        let (Some(ra), Some(rb)) = (self.row(a), self.row(b)) else {
            return Vec::new();
        };
        ra.runs
            .iter()
            .filter_map(|r| rb.win_rate(r.seed).map(|w| r.win_rate - w))
            .collect()
    }

    pub fn loss_verdict(&self) -> Option<LossVerdict> {
        let means: Vec<f64> = Variant::LOSS_ABLATION
            .iter()
            .map(|v| self.row(v.name()).map(|r| r.mean_std().0))
            .collect::<Option<_>>()?;
        if means.iter().any(|m| m.is_nan()) {
            return None;
        }
        let mib = means[0];
        Some(if means[1..].iter().all(|&m| mib >= m) {
            LossVerdict::MibBest
        } else if means[1..].iter().all(|&m| mib < m) {
            LossVerdict::MibLast
        } else {
            LossVerdict::Inconclusive
        })
    }

    /// One line per row and seed; failures carry the error text.
    pub fn write_lines(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        for row in &self.rows {
            for r in &row.runs {
                let _ = writeln!(
                    s,
                    "variant={}\tgroup={}\tseed={}\tstatus=ok\twin_rate={:.6}\tpref_accuracy={}\tskl_total={}",
                    row.name,
                    row.group.name(),
                    r.seed,
                    r.win_rate,
                    opt(r.pref_accuracy),
                    opt(r.skl_total)
                );
            }
            for (seed, e) in &row.failures {
                let e = e.replace(['\t', '\n'], " ");
                let _ = writeln!(s, "variant={}\tgroup={}\tseed={seed}\tstatus=failed\terror={e}", row.name, row.group.name());
            }
        }
        s
    }

    /// Inverse of [`SuiteReport::write_lines`]; per-family detail is not
    /// stored and comes back empty.
    pub fn parse_lines(text: &str) -> Result<Self, PipelineError> {
        let mut report = SuiteReport {
            seeds: Vec::new(),
            rows: Vec::new(),
        };
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |m: &str| PipelineError::Config(format!("suite report line {}: {m}", i + 1));
            let f: HashMap<&str, &str> = line.split('\t').filter_map(|p| p.split_once('=')).collect();
            let get = |k: &str| f.get(k).copied().ok_or_else(|| bad(&format!("missing {k}")));
            let opt = |k: &str| -> Result<Option<f64>, PipelineError> {
                match get(k)? {
                    "-" => Ok(None),
                    v => v.parse().map(Some).map_err(|_| bad(&format!("bad {k}"))),
                }
            };
            let name = get("variant")?;
            let group = RowGroup::parse(get("group")?).ok_or_else(|| bad("unknown group"))?;
            let seed: u64 = get("seed")?.parse().map_err(|_| bad("bad seed"))?;
            if !report.seeds.contains(&seed) {
                report.seeds.push(seed);
            }
            if report.row(name).is_none() {
                report.rows.push(VariantRow::new(name, group));
            }
            let row = report.rows.iter_mut().find(|r| r.name == name).expect("just inserted");
            match get("status")? {
                "ok" => row.runs.push(SeedRun {
                    seed,
                    win_rate: get("win_rate")?.parse().map_err(|_| bad("bad win_rate"))?,
                    pref_accuracy: opt("pref_accuracy")?,
                    skl_total: opt("skl_total")?,
                    report: None,
                }),
                "failed" => row.failures.push((seed, get("error")?.to_string())),
                _ => return Err(bad("unknown status")),
            }
        }
        if report.rows.is_empty() {
            return Err(PipelineError::EmptyReport("suite report has no rows".into()));
        }
        Ok(report)
    }
}

fn skl_total(log: &str) -> f64 {
    log.lines()
        .filter(|l| l.starts_with("kind=batch"))
        .filter_map(|l| l.split('\t').find_map(|f| f.strip_prefix("skl=")))
        .filter_map(|v| v.parse::<f64>().ok())
        .sum()
}

fn run_variant(runner: &mut Runner, v: Variant) -> Result<SeedRun, PipelineError> {
    let report = runner.eval_variant(v)?;
    let pref_accuracy = if v.synthetic() {
        let d = runner.synthetic(v)?;
        true_reward_accuracy(&d, &runner.cfg.reward_spec())
    } else {
        None
    };
    let skl = match v {
        Variant::Uml(_) => {
            let log = std::fs::read_to_string(runner.file(&format!("retrain-rm-{}", v.name()), "log")?)?;
            Some(skl_total(&log))
        }
        _ => None,
    };
    Ok(SeedRun {
        seed: runner.cfg.seed,
        win_rate: report.mean(),
        pref_accuracy,
        skl_total: skl,
        report: Some(report),
    })
}

/// Run every retraining variant over `cfg.ablation_seeds`, each seed in
/// its own `seed-<s>` directory under `cfg.out_dir` with lines 1-3 shared
/// by all variants of that seed. A failing variant is recorded and the
/// suite moves on.
pub fn run_ablation_suite(cfg: &ExperimentConfig) -> Result<SuiteReport, PipelineError> {
    cfg.validate()?;
    let mut rows = vec![
        VariantRow::new(Method::Ppo.name(), RowGroup::Baseline),
        VariantRow::new(Method::BestOfN.name(), RowGroup::Baseline),
    ];
    for v in Variant::LOSS_ABLATION {
        rows.push(VariantRow::new(v.name(), RowGroup::Loss));
    }
    for v in Variant::PREFERENCE_ABLATION {
        rows.push(VariantRow::new(v.name(), RowGroup::Preference));
    }
    for &seed in &cfg.ablation_seeds {
        let sub = ExperimentConfig {
            seed,
            method: Method::Ablations,
            out_dir: cfg.out_dir.join(format!("seed-{seed}")),
            ..cfg.clone()
        };
        let mut runner = match Runner::open(sub) {
            Ok(r) => r,
            Err(e) => {
                for row in &mut rows {
                    row.failures.push((seed, e.to_string()));
                }
                continue;
            }
        };
        for row in rows.iter_mut() {
            let outcome = match row.group {
                RowGroup::Baseline => {
                    let m = Method::parse(&row.name).expect("baseline rows are methods");
                    runner.eval_method(m).map(|report| SeedRun {
                        seed,
                        win_rate: report.mean(),
                        pref_accuracy: None,
                        skl_total: None,
                        report: Some(report),
                    })
                }
                _ => run_variant(&mut runner, Variant::parse(&row.name).expect("variant rows parse")),
            };
            match outcome {
                Ok(run) => row.runs.push(run),
                Err(e) => row.failures.push((seed, e.to_string())),
            }
        }
    }
    Ok(SuiteReport {
        seeds: cfg.ablation_seeds.clone(),
        rows,
    })
}
