//! Reward models: a transformer backbone with a scalar head trained on
//! pairwise preferences, optionally regularised by a multi-view
//! information-bottleneck head over pairs of policy samples.

mod mib;
mod mlp;
mod model;
mod train;

pub use mib::{
    centered_js_mi, correlated_pairs, derangement, gaussian_mi_probe, info_nce_taped, js_bound_taped, js_mi_estimate,
    mib_loss, skl_divergence, skl_taped, GaussianRepresentation, JsCritic, MiProbeConfig, MibConfig, MibHead,
    MibTerms, MibValue, RepresentationLoss, ViewNoise,
};
pub use mlp::Mlp3;
pub use model::{pairwise_loss, pairwise_loss_from_gaps, preference_accuracy, ResponseScorer, RewardModel, RmRole};
pub use train::{train_reward, BatchRecord, EpochRecord, RewardInputs, RewardLog, RewardTrainConfig};

use crate::numerics::NumericsError;
use crate::seqmodel::SeqError;

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("representation loss requested without {0}")]
    MissingViews(&'static str),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("batch of {0} is too small; in-batch negatives need at least 2")]
    BatchTooSmall(usize),
    #[error("reward training diverged (non-finite loss) at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },
    #[error(transparent)]
    Model(#[from] SeqError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
