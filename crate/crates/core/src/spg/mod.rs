//! Synthetic preference generation from policy samples.

mod ablation;
mod cluster;
mod generate;
mod oracle;
mod samples;

pub use ablation::{ablation_reward_rank, ablation_rlaif, true_reward_accuracy, AblationReport};
pub use cluster::{cluster, cluster_components, ClusterSet};
pub use generate::{
    ablation_select_all, generate_synthetic_preferences, Decision, SpgConfig, SpgRecord, SpgReport,
    WinnerRule,
};
pub use oracle::{ClassifierOracle, EquivalenceOracle, ExactCanonical, OracleFailure};
pub use samples::{build_policy_samples, PolicySampleSet};

use crate::taskworld::TaskError;

#[derive(Debug, thiserror::Error)]
pub enum SpgError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Oracle(#[from] OracleFailure),
    #[error(transparent)]
    Dataset(#[from] TaskError),
}
