use std::fmt::Write as _;
use std::path::Path;

use crate::taskworld::TaskFamily;

use super::ablation::{sign_test_p, LossVerdict, SuiteReport, VariantRow};
use super::eval::{mean_std, Tally, WinRateReport};
use super::manifest::RunManifest;
use super::run::Variant;
use super::PipelineError;

const METHOD_ORDER: [&str; 5] = ["sft", "best-of-n", "ppo", "rlp-uml", "rlp-spg"];

fn display(name: &str) -> &str {
    match name {
        "sft" => "SFT",
        "best-of-n" => "Best-of-n",
        "ppo" => "PPO",
        "rlp-uml" => "RLP-UML",
        "rlp-spg" => "RLP-SPG",
        "uml-infomax" => "InfoMax",
        "uml-mvi" => "MVI",
        "uml-cl" => "CL",
        "rlaif" => "RLAIF",
        "reward-rank" => "Reward",
        "select-all" => "Select-All",
        other => other,
    }
}

fn rank(name: &str) -> usize {
    METHOD_ORDER.iter().position(|m| *m == name).unwrap_or(METHOD_ORDER.len())
}

fn family_table(s: &mut String, columns: &[(String, Vec<(TaskFamily, Tally)>)]) {
    let _ = write!(s, "{:<12}", "family");
    for (name, _) in columns {
        let _ = write!(s, "{:>12}", display(name));
    }
    s.push('\n');
    for f in TaskFamily::ALL {
        let _ = write!(s, "{:<12}", f.name());
        for (_, fams) in columns {
            match fams.iter().find(|(g, _)| *g == f) {
                Some((_, t)) => {
                    let _ = write!(s, "{:>12.1}", t.win_rate());
                }
                None => {
                    let _ = write!(s, "{:>12}", "-");
                }
            }
        }
        s.push('\n');
    }
}

fn pooled_families(reports: &[&WinRateReport]) -> Vec<(TaskFamily, Tally)> {
    TaskFamily::ALL
        .into_iter()
        .filter_map(|f| {
            let mut t = Tally::default();
            for r in reports {
                for (g, u) in r.by_family() {
                    if g == f {
                        t.wins += u.wins;
                        t.ties += u.ties;
                        t.losses += u.losses;
                    }
                }
            }
            (t.total() > 0).then_some((f, t))
        })
        .collect()
}

fn row_line(s: &mut String, label: &str, rates: &[f64]) {
    let (m, sd) = mean_std(rates);
    let _ = writeln!(s, "{label:<20}{m:>10.2}{sd:>8.2}{:>7}", rates.len());
}

fn suite_row_families(row: &VariantRow) -> Vec<(TaskFamily, Tally)> {
    let reports: Vec<&WinRateReport> = row.runs.iter().filter_map(|r| r.report.as_ref()).collect();
    pooled_families(&reports)
}

fn suite_tables(s: &mut String, suite: &SuiteReport) {
    let seeds: Vec<String> = suite.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(s, "== Ablation suite over seeds {} ==\n", seeds.join(","));

    let _ = writeln!(s, "Methods (win-rate % vs SFT, mean over seeds)");
    let _ = writeln!(s, "{:<20}{:>10}{:>8}{:>7}", "method", "win-rate", "std", "seeds");
    row_line(s, display("sft"), &vec![50.0; suite.seeds.len()]);
    let table2 = ["best-of-n", "ppo", "rlp-uml", "rlp-spg"];
    for name in table2 {
        if let Some(r) = suite.row(name) {
            row_line(s, display(name), &r.win_rates());
        }
    }
    s.push('\n');
    for (a, b) in [("ppo", None), ("rlp-uml", Some("ppo")), ("rlp-spg", Some("ppo"))] {
        let margins = match b {
            None => suite.row(a).map(|r| r.win_rates().iter().map(|w| w - 50.0).collect()).unwrap_or_default(),
            Some(b) => suite.margins(a, b),
        };
        let (m, _) = mean_std(&margins);
        let _ = writeln!(
            s,
            "{} > {}: mean margin {:+.2}, positive in {}/{} seeds, sign-test p = {:.4}",
            display(a),
            display(b.unwrap_or("sft")),
            m,
            margins.iter().filter(|x| **x > 0.0).count(),
            margins.len(),
            sign_test_p(&margins)
        );
    }
    s.push('\n');

    let columns: Vec<(String, Vec<(TaskFamily, Tally)>)> = table2
        .iter()
        .filter_map(|n| suite.row(n).map(|r| (n.to_string(), suite_row_families(r))))
        .filter(|(_, f)| !f.is_empty())
        .collect();
    if !columns.is_empty() {
        let _ = writeln!(s, "Per-family win-rate % (pooled over seeds)");
        family_table(s, &columns);
        s.push('\n');
    }

    let _ = writeln!(s, "Representation loss (win-rate % vs SFT)");
    let _ = writeln!(s, "{:<20}{:>10}{:>8}{:>7}{:>14}", "loss", "win-rate", "std", "seeds", "sum SKL");
    for v in Variant::LOSS_ABLATION {
        if let Some(r) = suite.row(v.name()) {
            let (m, sd) = r.mean_std();
            let skl: f64 = r.runs.iter().filter_map(|x| x.skl_total).sum();
            let label = if v == Variant::LOSS_ABLATION[0] { "MIB" } else { display(v.name()) };
            let _ = writeln!(s, "{label:<20}{m:>10.2}{sd:>8.2}{:>7}{skl:>14.4}", r.runs.len());
        }
    }
    let verdict = match suite.loss_verdict() {
        Some(LossVerdict::MibBest) => "MIB has the highest mean",
        Some(LossVerdict::Inconclusive) => "inconclusive: MIB is neither best nor last",
        Some(LossVerdict::MibLast) => "MIB ranks strictly last",
        None => "incomplete",
    };
    let _ = writeln!(s, "verdict: {verdict}\n");

    let _ = writeln!(s, "Synthetic preferences (accuracy vs r* ranking, win-rate % vs SFT)");
    let _ = writeln!(s, "{:<20}{:>10}{:>10}{:>8}{:>7}", "source", "accuracy", "win-rate", "std", "seeds");
    for v in Variant::PREFERENCE_ABLATION {
        if let Some(r) = suite.row(v.name()) {
            let (acc, _) = mean_std(&r.pref_accuracies());
            let (m, sd) = r.mean_std();
            let _ = writeln!(
                s,
                "{:<20}{:>10.1}{m:>10.2}{sd:>8.2}{:>7}",
                display(v.name()),
                100.0 * acc,
                r.runs.len()
            );
        }
    }

    let failures: Vec<String> = suite
        .rows
        .iter()
        .flat_map(|r| r.failures.iter().map(move |(seed, e)| format!("{} seed {seed}: {e}", r.name)))
        .collect();
    if !failures.is_empty() {
        let _ = writeln!(s, "\nFailed variants:");
        for f in failures {
            let _ = writeln!(s, "  {f}");
        }
    }
}

/// Fixed-layout text summary of single-run evaluations and, if given, an
/// ablation suite. Methods are listed SFT, Best-of-n, PPO, RLP-UML,
/// RLP-SPG, then anything else in input order.
pub fn emit_report(
    manifests: &[RunManifest],
    reports: &[WinRateReport],
    suite: Option<&SuiteReport>,
) -> Result<String, PipelineError> {
    if reports.is_empty() && suite.is_none() {
        return Err(PipelineError::EmptyReport("no evaluations or suite results given".into()));
    }
    let mut s = String::new();
    if !manifests.is_empty() {
        let _ = writeln!(s, "Runs");
        for m in manifests {
            let _ = writeln!(
                s,
                "  method={} seed={} version={} stages={} fingerprint={}",
                m.method,
                m.seed,
                m.version,
                m.stages.len(),
                &m.fingerprint[..m.fingerprint.len().min(12)]
            );
        }
        s.push('\n');
    }
    if !reports.is_empty() {
        let mut ordered: Vec<&WinRateReport> = reports.iter().collect();
        ordered.sort_by_key(|r| rank(&r.method));
        let opponents: Vec<&str> = ordered.iter().map(|r| r.opponent.as_str()).collect();
        let _ = writeln!(s, "Win-rate % against {} (ties count half)", display(opponents[0]));
        let _ = writeln!(s, "{:<20}{:>10}{:>8}{:>7}", "method", "win-rate", "std", "seeds");
        for r in &ordered {
            row_line(&mut s, display(&r.method), &r.rates());
        }
        s.push('\n');
        let columns: Vec<(String, Vec<(TaskFamily, Tally)>)> =
            ordered.iter().map(|r| (r.method.clone(), r.by_family())).collect();
        let _ = writeln!(s, "Per-family win-rate % (pooled over seeds)");
        family_table(&mut s, &columns);
        s.push('\n');
    }
    if let Some(suite) = suite {
        suite_tables(&mut s, suite);
    }
    Ok(s)
}

pub fn write_report(
    path: &Path,
    manifests: &[RunManifest],
    reports: &[WinRateReport],
    suite: Option<&SuiteReport>,
) -> Result<(), PipelineError> {
    let text = emit_report(manifests, reports, suite)?;
    std::fs::write(path, text)?;
    Ok(())
}
