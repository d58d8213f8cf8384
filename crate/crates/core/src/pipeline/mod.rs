//! End-to-end orchestration, evaluation, ablations and reporting.

mod ablation;
mod artifacts;
mod config;
mod eval;
mod manifest;
mod report;
mod run;

pub use ablation::{run_ablation_suite, sign_test_p, LossVerdict, RowGroup, SeedRun, SuiteReport, VariantRow};
pub use artifacts::{load_samples, read_samples, save_samples, write_samples};
pub use config::{ExperimentConfig, Method};
pub use eval::{
    best_of_n_decode, evaluate_winrate, mean_std, BestOfN, EvalConfig, GoldSolver, Responder, Sampled, SeedOutcome,
    Tally, WinRateReport,
};
pub use manifest::{file_sha256, sha256_hex, FileEntry, RunManifest, StageEntry, MANIFEST_FILE};
pub use report::{emit_report, write_report};
pub use run::{run_algorithm1, Runner, Variant};

use crate::numerics::NumericsError;
use crate::rewardmodel::RewardError;
use crate::rloptim::PpoError;
use crate::seqmodel::SeqError;
use crate::spg::SpgError;
use crate::taskworld::TaskError;

/// Failure inside one module, before it is attributed to a stage.
#[derive(Debug, thiserror::Error)]
pub enum StageFailure {
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Model(#[from] SeqError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Spg(#[from] SpgError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

impl StageFailure {
    /// True when the underlying cause is a non-finite loss.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            StageFailure::Model(SeqError::Divergence { .. })
                | StageFailure::Reward(RewardError::Divergence { .. })
                | StageFailure::Ppo(PpoError::Divergence { .. })
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage `{stage}` diverged: {source}")]
    Divergence { stage: String, source: StageFailure },
    #[error("stage `{stage}` failed: {source}")]
    Stage { stage: String, source: StageFailure },
    #[error("nothing to report: {0}")]
    EmptyReport(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    pub fn stage(stage: &str, source: impl Into<StageFailure>) -> Self {
        let source = source.into();
        let stage = stage.to_string();
        if source.is_divergence() {
            PipelineError::Divergence { stage, source }
        } else {
            PipelineError::Stage { stage, source }
        }
    }

    /// Name of the failing stage, if any.
    pub fn stage_name(&self) -> Option<&str> {
        match self {
            PipelineError::Divergence { stage, .. } | PipelineError::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

// Validation of module configs surfaces as configuration errors.
macro_rules! config_from {
    ($($t:ty),*) => {$(
        impl From<$t> for PipelineError {
            fn from(e: $t) -> Self {
                PipelineError::Config(e.to_string())
            }
        }
    )*};
}
config_from!(TaskError, SeqError, PpoError, RewardError);
