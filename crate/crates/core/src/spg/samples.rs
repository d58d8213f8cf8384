use crate::seqmodel::{PolicyModel, SamplingConfig};
use crate::taskworld::{Instruction, InstructionSet, ModelTag, Response};

use super::SpgError;

/// An instruction with `n` sampled responses (duplicates kept).
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySampleSet {
    pub instruction: Instruction,
    pub responses: Vec<Response>,
    pub tag: ModelTag,
}

/// Draw `n` responses per instruction of `u` with per-draw hashed seeds.
pub fn build_policy_samples(
    policy: &PolicyModel,
    u: &InstructionSet,
    n: usize,
    cfg: &SamplingConfig,
) -> Result<Vec<PolicySampleSet>, SpgError> {
    if n < 2 {
        return Err(SpgError::Config(format!("sample sets need n >= 2, got {n}")));
    }
    Ok(u.iter()
        .map(|x| PolicySampleSet {
            instruction: x.clone(),
            responses: policy.sample_set(x, n, cfg),
            tag: policy.tag,
        })
        .collect())
}
