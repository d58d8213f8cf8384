//! Reward learning on policy (RLP) at desk scale.
//!
//! A complete RLHF laboratory on a synthetic instruction-following world:
//! supervised fine-tuning, simulated preference collection, reward learning,
//! PPO, reward retraining from policy samples (multi-view information
//! bottleneck or synthetic preference generation), and policy retraining.

pub mod numerics;
pub mod taskworld;
pub mod seqmodel;
pub mod rewardmodel;
pub mod rloptim;
pub mod spg;
pub mod pipeline;
