use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rlp_core::pipeline::{
    emit_report, run_ablation_suite, run_algorithm1, ExperimentConfig, Method, PipelineError, RunManifest, Runner,
    SuiteReport, Variant, WinRateReport,
};
use rlp_core::rewardmodel::RepresentationLoss;

/// Reward learning on policy: a desk-scale RLHF pipeline.
#[derive(Parser)]
#[command(name = "rlp", version)]
struct Cli {
    /// Experiment config file (flat `key = value` lines).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RetrainMethod {
    Uml,
    Spg,
    SelectAll,
    Rlaif,
    RewardRank,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the four instruction splits.
    GenData,
    /// Supervised fine-tuning on gold demonstrations.
    Sft,
    /// Collect annotated SFT preference pairs.
    CollectPrefs,
    /// Train the initial reward model.
    TrainRm,
    /// PPO against the initial reward model.
    Ppo,
    /// Sample the policy dataset from the PPO policy.
    SamplePolicy,
    /// Retrain the reward model on policy data.
    RetrainRm {
        #[arg(long, value_enum)]
        method: RetrainMethod,
        /// Representation loss for `uml` (defaults to the config's).
        #[arg(long)]
        loss: Option<String>,
    },
    /// PPO from the SFT model against a retrained reward model.
    RetrainPolicy {
        #[arg(long, value_enum)]
        method: RetrainMethod,
        #[arg(long)]
        loss: Option<String>,
    },
    /// Win-rate of a method against SFT samples.
    Eval {
        /// sft, best-of-n, ppo, rlp-uml or rlp-spg; defaults to the config's.
        #[arg(long)]
        method: Option<String>,
    },
    /// Every stage the config's method needs, then its evaluation.
    Run,
    /// Ablation suite over the config's ablation seeds.
    Ablate,
    /// Summarise evaluated runs and an optional suite into a text report.
    Report {
        /// Run directories whose evaluations to include.
        #[arg(long = "run")]
        runs: Vec<PathBuf>,
        /// Suite results written by `ablate`.
        #[arg(long)]
        suite: Option<PathBuf>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| PipelineError::Config(format!("override `{o}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn variant(method: RetrainMethod, loss: Option<&str>, cfg: &ExperimentConfig) -> Result<Variant, PipelineError> {
    Ok(match method {
        RetrainMethod::Uml => {
            let loss = match loss {
                None => cfg.mib_loss,
                Some(s) => RepresentationLoss::parse(s)
                    .ok_or_else(|| PipelineError::Config(format!("unknown representation loss `{s}`")))?,
            };
            Variant::Uml(loss)
        }
        RetrainMethod::Spg => Variant::Spg,
        RetrainMethod::SelectAll => Variant::SelectAll,
        RetrainMethod::Rlaif => Variant::Rlaif,
        RetrainMethod::RewardRank => Variant::RewardRank,
    })
}

fn print_winrate(r: &WinRateReport) {
    println!(
        "{} vs {}: {:.2} ± {:.2} over {} seeds",
        r.method,
        r.opponent,
        r.mean(),
        r.std(),
        r.seeds.len()
    );
}

/// Evaluations recorded in a run directory's manifest.
fn run_reports(dir: &Path) -> Result<(RunManifest, Vec<WinRateReport>), PipelineError> {
    let m = RunManifest::load(dir)?;
    let mut out = Vec::new();
    for s in m.stages.iter().filter(|s| s.name.starts_with("eval-")) {
        for f in &s.files {
            let text = std::fs::read_to_string(dir.join(&f.path))?;
            out.push(WinRateReport::parse_lines(&text).map_err(PipelineError::Manifest)?);
        }
    }
    Ok((m, out))
}

fn execute(cli: &Cli) -> Result<(), PipelineError> {
    if let Command::Report { runs, suite, out } = &cli.command {
        let mut manifests = Vec::new();
        let mut reports = Vec::new();
        for dir in runs {
            let (m, r) = run_reports(dir)?;
            manifests.push(m);
            reports.extend(r);
        }
        let suite = match suite {
            Some(p) => Some(SuiteReport::parse_lines(&std::fs::read_to_string(p)?)?),
            None => None,
        };
        let text = emit_report(&manifests, &reports, suite.as_ref())?;
        match out {
            Some(p) => std::fs::write(p, text)?,
            None => print!("{text}"),
        }
        return Ok(());
    }

    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Run => {
            let m = run_algorithm1(&cfg)?;
            println!("completed stages: {}", m.stage_names().join(", "));
            let mut r = Runner::open(cfg.clone())?;
            if cfg.method != Method::Ablations {
                print_winrate(&r.eval_method(cfg.method)?);
            }
        }
        Command::Ablate => {
            let suite = run_ablation_suite(&cfg)?;
            let path = cfg.out_dir.join("suite.txt");
            std::fs::write(&path, suite.write_lines())?;
            print!("{}", emit_report(&[], &[], Some(&suite))?);
            println!("suite results: {}", path.display());
        }
        cmd => {
            let mut r = Runner::open(cfg.clone())?;
            match cmd {
                Command::GenData => {
                    r.data()?;
                }
                Command::Sft => {
                    r.sft()?;
                }
                Command::CollectPrefs => {
                    r.preferences()?;
                }
                Command::TrainRm => {
                    r.reward_model()?;
                }
                Command::Ppo => {
                    r.ppo()?;
                }
                Command::SamplePolicy => {
                    r.samples()?;
                }
                Command::RetrainRm { method, loss } => {
                    r.retrained_reward(variant(*method, loss.as_deref(), &cfg)?)?;
                }
                Command::RetrainPolicy { method, loss } => {
                    r.retrained_policy(variant(*method, loss.as_deref(), &cfg)?)?;
                }
                Command::Eval { method } => {
                    let report = match method.as_deref() {
                        None => r.eval_method(cfg.method)?,
                        Some(name) => match (Method::parse(name), Variant::parse(name)) {
                            (Some(m), _) if m != Method::Ablations => r.eval_method(m)?,
                            (_, Some(v)) => r.eval_variant(v)?,
                            _ => return Err(PipelineError::Config(format!("cannot evaluate `{name}`"))),
                        },
                    };
                    print_winrate(&report);
                }
                Command::Run | Command::Ablate | Command::Report { .. } => unreachable!("handled above"),
            }
            println!("stages on record: {}", r.manifest.stage_names().join(", "));
        }
    }
    Ok(())
}

fn exit_code(e: &PipelineError) -> u8 {
    match e {
        PipelineError::Config(_) => 2,
        PipelineError::Stage { .. } => 3,
        PipelineError::Divergence { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
