//! Tiny autoregressive transformer used for every policy in the pipeline
//! (SFT, PPO, retrained, reference), with sampling, exact sequence
//! log-probabilities, supervised fine-tuning, and checkpoints.

mod checkpoint;
mod policy;
mod sft;
mod transformer;

pub use checkpoint::Checkpoint;
pub use policy::{PolicyModel, PolicySampler, Role, SamplingConfig, TapedScore, Trace};
pub use sft::{demo_cross_entropy, sft_train, SftConfig, SftLog};
pub use transformer::{Decoder, Forward, ModelConfig, Step, Transformer};

use crate::numerics::NumericsError;
use crate::taskworld::ModelTag;

#[derive(Debug, thiserror::Error)]
pub enum SeqError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ModelConfig {
    pub fn write_meta(&self, ck: Checkpoint) -> Checkpoint {
        ck.with_meta("vocab", self.vocab)
            .with_meta("context_len", self.context_len)
            .with_meta("width", self.width)
            .with_meta("heads", self.heads)
            .with_meta("blocks", self.blocks)
            .with_meta("mlp", self.mlp)
    }

    pub fn read_meta(ck: &Checkpoint) -> Result<Self, SeqError> {
        Ok(Self {
            vocab: ck.meta_usize("vocab")?,
            context_len: ck.meta_usize("context_len")?,
            width: ck.meta_usize("width")?,
            heads: ck.meta_usize("heads")?,
            blocks: ck.meta_usize("blocks")?,
            mlp: ck.meta_usize("mlp")?,
        })
    }
}

impl PolicyModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        self.config()
            .write_meta(Checkpoint::new("policy"))
            .with_meta("role", self.role.name())
            .with_meta("tag", self.tag.name())
            .with_section("backbone", self.params())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, SeqError> {
        ck.expect_kind("policy")?;
        let config = ModelConfig::read_meta(ck)?;
        let role = Role::parse(ck.meta("role")?).ok_or_else(|| SeqError::Checkpoint("unknown role".into()))?;
        let tag = ModelTag::parse(ck.meta("tag")?).ok_or_else(|| SeqError::Checkpoint("unknown tag".into()))?;
        let params = ck
            .section("backbone")
            .ok_or_else(|| SeqError::Checkpoint("missing backbone section".into()))?
            .clone();
        Ok(Self {
            net: Transformer::from_params(config, params)?,
            role,
            tag,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SeqError> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SeqError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
