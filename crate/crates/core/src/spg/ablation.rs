use crate::numerics::rng;
use crate::rewardmodel::ResponseScorer;
use crate::seqmodel::{PolicyModel, SamplingConfig};
use crate::taskworld::{
    true_reward, DatasetTag, Instruction, InstructionSet, PairSource, PreferenceDataset, PreferencePair, Response,
    TrueRewardSpec,
};

use super::SpgError;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    pub considered: usize,
    /// Instructions whose two samples were identical or tied.
    pub skipped: Vec<u64>,
}

/// Two policy samples per instruction labelled by the policy itself: the
/// higher mean per-token log-probability wins.
pub fn ablation_rlaif(
    policy: &PolicyModel,
    u: &InstructionSet,
    cfg: &SamplingConfig,
) -> Result<(PreferenceDataset, AblationReport), SpgError> {
    label_pairs(policy, u, cfg, "rlaif", |x, y| {
        let (total, _) = policy.sequence_logprob(x, &y.tokens);
        total / y.len().max(1) as f64
    })
}

/// Two policy samples per instruction labelled by a reward model.
pub fn ablation_reward_rank(
    policy: &PolicyModel,
    scorer: &dyn ResponseScorer,
    u: &InstructionSet,
    cfg: &SamplingConfig,
) -> Result<(PreferenceDataset, AblationReport), SpgError> {
    label_pairs(policy, u, cfg, "reward-rank", |x, y| scorer.score_response(x, &y.tokens))
}

fn label_pairs(
    policy: &PolicyModel,
    u: &InstructionSet,
    cfg: &SamplingConfig,
    variant: &str,
    score: impl Fn(&Instruction, &Response) -> f64,
) -> Result<(PreferenceDataset, AblationReport), SpgError> {
    let mut data = PreferenceDataset::new(DatasetTag::Synthetic);
    let mut report = AblationReport::default();
    let cfg = cfg.with_seed(rng::derive_seed(&[cfg.seed, rng::label(variant)]));
    for x in u.iter() {
        report.considered += 1;
        let mut ys = policy.sample_set(x, 2, &cfg);
        let (y2, y1) = (ys.pop().expect("two samples"), ys.pop().expect("two samples"));
        let (s1, s2) = (score(x, &y1), score(x, &y2));
        if y1.tokens == y2.tokens || s1 == s2 {
            report.skipped.push(x.id);
            continue;
        }
        let (chosen, rejected) = if s1 > s2 { (y1, y2) } else { (y2, y1) };
        data.push(PreferencePair {
            instruction: x.clone(),
            chosen,
            rejected,
            source: PairSource::Ablation(variant.to_string()),
        })?;
    }
    Ok((data, report))
}

/// Agreement of a dataset's labels with the noiseless true-reward ranking.
/// Pairs with equal true reward count half. `None` for an empty dataset.
pub fn true_reward_accuracy(data: &PreferenceDataset, spec: &TrueRewardSpec) -> Option<f64> {
    if data.is_empty() {
        return None;
    }
    let hits: f64 = data
        .iter()
        .map(|p| {
            let gap = true_reward(&p.instruction, &p.chosen, spec) - true_reward(&p.instruction, &p.rejected, spec);
            if gap > 0.0 {
                1.0
            } else if gap == 0.0 {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    Some(hits / data.len() as f64)
}
