use std::io::Write;

use rand::Rng as _;

use crate::numerics::rng;
use crate::rewardmodel::ResponseScorer;
use crate::taskworld::{DatasetTag, PairSource, PreferenceDataset, PreferencePair};

use super::cluster::cluster;
use super::oracle::EquivalenceOracle;
use super::{PolicySampleSet, SpgError};

/// How the chosen response is picked from the largest group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WinnerRule {
    /// Highest reward score; ties go to the smallest index.
    #[default]
    RewardArgmax,
    /// Uniform draw from the group.
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpgConfig {
    /// Minimum confidence for an instruction to yield a pair.
    pub gamma: f64,
    pub winner: WinnerRule,
    pub seed: u64,
}

impl Default for SpgConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            winner: WinnerRule::RewardArgmax,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Accepted,
    BelowThreshold,
    /// Every sample falls in the largest group, so there is no rejected side.
    NoComplement,
}

impl Decision {
    pub fn name(self) -> &'static str {
        match self {
            Decision::Accepted => "accepted",
            Decision::BelowThreshold => "below-threshold",
            Decision::NoComplement => "no-complement",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpgRecord {
    pub instruction_id: u64,
    pub confidence: f64,
    pub decision: Decision,
    pub group_sizes: Vec<usize>,
    /// Sample indices of the emitted pair (chosen, rejected), when accepted.
    pub pair: Option<(usize, usize)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpgReport {
    pub records: Vec<SpgRecord>,
}

impl SpgReport {
    pub fn accepted(&self) -> usize {
        self.records.iter().filter(|r| r.decision == Decision::Accepted).count()
    }

    pub fn accepted_ids(&self) -> Vec<u64> {
        self.records
            .iter()
            .filter(|r| r.decision == Decision::Accepted)
            .map(|r| r.instruction_id)
            .collect()
    }

    pub fn write_lines<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            let sizes: Vec<String> = r.group_sizes.iter().map(usize::to_string).collect();
            writeln!(
                w,
                "id={}\tconfidence={:.4}\tdecision={}\tgroups={}",
                r.instruction_id,
                r.confidence,
                r.decision.name(),
                sizes.join(",")
            )?;
        }
        Ok(())
    }
}

/// Cluster each sample set and emit one (chosen, rejected) pair for every
/// instruction whose largest group covers at least `gamma` of its samples.
pub fn generate_synthetic_preferences(
    p: &[PolicySampleSet],
    scorer: &dyn ResponseScorer,
    oracle: &dyn EquivalenceOracle,
    cfg: &SpgConfig,
) -> Result<(PreferenceDataset, SpgReport), SpgError> {
    generate_with_source(p, scorer, oracle, cfg, PairSource::SyntheticSpg)
}

/// The same generator with `gamma = 0`: every set with a non-empty
/// complement yields a pair.
pub fn ablation_select_all(
    p: &[PolicySampleSet],
    scorer: &dyn ResponseScorer,
    oracle: &dyn EquivalenceOracle,
    cfg: &SpgConfig,
) -> Result<(PreferenceDataset, SpgReport), SpgError> {
    let cfg = SpgConfig { gamma: 0.0, ..cfg.clone() };
    generate_with_source(p, scorer, oracle, &cfg, PairSource::Ablation("select-all".into()))
}

fn generate_with_source(
    p: &[PolicySampleSet],
    scorer: &dyn ResponseScorer,
    oracle: &dyn EquivalenceOracle,
    cfg: &SpgConfig,
    source: PairSource,
) -> Result<(PreferenceDataset, SpgReport), SpgError> {
    if !(0.0..=1.0).contains(&cfg.gamma) {
        return Err(SpgError::Config(format!("gamma must lie in [0, 1], got {}", cfg.gamma)));
    }
    let mut data = PreferenceDataset::new(DatasetTag::Synthetic);
    let mut report = SpgReport::default();
    for set in p {
        if set.responses.len() < 2 {
            return Err(SpgError::Config(format!(
                "sample set for instruction {} has fewer than 2 responses",
                set.instruction.id
            )));
        }
        let x = &set.instruction;
        let groups = cluster(set, oracle)?;
        let confidence = groups.confidence();
        let complement = groups.complement();
        let decision = if confidence < cfg.gamma {
            Decision::BelowThreshold
        } else if complement.is_empty() {
            Decision::NoComplement
        } else {
            Decision::Accepted
        };
        let mut pair = None;
        if decision == Decision::Accepted {
            let mut r = rng::rng(rng::derive_seed(&[cfg.seed, rng::label("spg-pair"), x.id]));
            let best = groups.largest_group();
            let w = match cfg.winner {
                WinnerRule::RewardArgmax => {
                    let mut w = best[0];
                    let mut top = scorer.score_response(x, &set.responses[w].tokens);
                    for &i in &best[1..] {
                        let s = scorer.score_response(x, &set.responses[i].tokens);
                        if s > top {
                            (w, top) = (i, s);
                        }
                    }
                    w
                }
                WinnerRule::Uniform => best[r.random_range(0..best.len())],
            };
            let l = complement[r.random_range(0..complement.len())];
            data.push(PreferencePair {
                instruction: x.clone(),
                chosen: set.responses[w].clone(),
                rejected: set.responses[l].clone(),
                source: source.clone(),
            })?;
            pair = Some((w, l));
        }
        report.records.push(SpgRecord {
            instruction_id: x.id,
            confidence,
            decision,
            group_sizes: groups.sizes(),
            pair,
        });
    }
    Ok((data, report))
}
