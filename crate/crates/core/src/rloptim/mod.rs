//! PPO fine-tuning against a reward model with a per-token KL penalty
//! toward a frozen reference policy.

mod rollout;
mod train;
mod update;

pub use rollout::{collect_rollouts, gae, whiten, Rollout, RolloutBatch, ValueHead};
pub use train::{sequence_kl, train_policy, IterRecord, PpoLog};
pub use update::{ppo_loss_taped, ppo_update, PpoTerms, UpdateStats};

use crate::numerics::{AdamConfig, NumericsError};
use crate::seqmodel::SeqError;

#[derive(Clone, Debug, PartialEq)]
pub struct PpoConfig {
    /// Clip ratio epsilon.
    pub clip: f64,
    /// KL penalty coefficient beta.
    pub beta: f64,
    pub epochs: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    /// Instructions per rollout batch.
    pub rollout_batch: usize,
    pub minibatch: usize,
    /// Number of collect-then-update iterations.
    pub iterations: usize,
    pub value_coef: f64,
    /// Stop the remaining epochs of an update once the mean per-token
    /// KL(new || old) exceeds this.
    pub kl_stop: f64,
    pub std_floor: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            beta: 0.05,
            epochs: 4,
            gamma: 1.0,
            gae_lambda: 0.95,
            rollout_batch: 32,
            minibatch: 8,
            iterations: 100,
            value_coef: 0.5,
            kl_stop: 0.02,
            std_floor: 1e-6,
            temperature: 1.0,
            max_new_tokens: 12,
            optimizer: AdamConfig::with_lr(1e-4),
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::Config(m.to_string()));
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and >= 0");
        }
        if self.rollout_batch == 0 || self.minibatch == 0 || self.max_new_tokens == 0 {
            return bad("batch sizes and max_new_tokens must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("rollout temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PpoError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("policy optimisation diverged (non-finite loss) at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error(transparent)]
    Model(#[from] SeqError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
