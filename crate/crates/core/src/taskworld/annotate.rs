use rand::Rng as _;

use super::records::{DatasetTag, PairSource, PreferenceDataset, PreferencePair, Response};
use super::reward::{annotator_score, TrueRewardSpec};
use super::task::{Instruction, InstructionSet};
use super::TaskError;
use crate::numerics::{logistic, rng};

/// Anything that can draw a response for an instruction from a seed.
pub trait Sampler {
    fn sample_response(&self, x: &Instruction, seed: u64) -> Response;
}

/// Probability that the annotator prefers `y1` over `y2`.
pub fn preference_probability(x: &Instruction, y1: &Response, y2: &Response, spec: &TrueRewardSpec) -> f64 {
    let gap = annotator_score(x, y1, spec) - annotator_score(x, y2, spec);
    logistic(gap / spec.tau)
}

/// Simulated Bradley–Terry judgement between two distinct responses.
///
/// The pair is put in a fixed token order before the coin is drawn, so for
/// a given seed swapping the arguments never changes the winner.
pub fn annotate(
    x: &Instruction,
    y1: &Response,
    y2: &Response,
    spec: &TrueRewardSpec,
    seed: u64,
) -> Result<PreferencePair, TaskError> {
    if y1.tokens == y2.tokens {
        return Err(TaskError::IdenticalResponses(x.id));
    }
    let (a, b) = if y1.tokens < y2.tokens { (y1, y2) } else { (y2, y1) };
    let p = preference_probability(x, a, b, spec);
    let u: f64 = rng::rng(seed).random();
    let (chosen, rejected) = if u < p { (a, b) } else { (b, a) };
    Ok(PreferencePair {
        instruction: x.clone(),
        chosen: chosen.clone(),
        rejected: rejected.clone(),
        source: PairSource::SimulatedAnnotator,
    })
}

/// Extra draws allowed when the two samples coincide.
pub const PAIR_RETRIES: usize = 4;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CollectionReport {
    pub requested: usize,
    pub collected: usize,
    /// Ids of instructions whose samples kept colliding.
    pub skipped: Vec<u64>,
}

/// Sample two responses per instruction and have the annotator rank them.
pub fn collect_preferences<S: Sampler + ?Sized>(
    model: &S,
    split: &InstructionSet,
    spec: &TrueRewardSpec,
    seed: u64,
) -> Result<(PreferenceDataset, CollectionReport), TaskError> {
    spec.validate()?;
    if split.is_empty() {
        return Err(TaskError::Config("cannot collect preferences on an empty split".into()));
    }
    let mut data = PreferenceDataset::new(DatasetTag::Human);
    let mut report = CollectionReport {
        requested: split.len(),
        ..Default::default()
    };
    let tag = rng::label("collect");
    for x in split.iter() {
        let mut drawn = None;
        for attempt in 0..=PAIR_RETRIES as u64 {
            let y1 = model.sample_response(x, rng::derive_seed(&[seed, tag, x.id, attempt, 0]));
            let y2 = model.sample_response(x, rng::derive_seed(&[seed, tag, x.id, attempt, 1]));
            if y1.tokens != y2.tokens {
                drawn = Some((y1, y2));
                break;
            }
        }
        match drawn {
            Some((y1, y2)) => {
                let judge_seed = rng::derive_seed(&[seed, rng::label("annotate"), x.id]);
                data.push(annotate(x, &y1, &y2, spec, judge_seed)?)?;
                report.collected += 1;
            }
            None => report.skipped.push(x.id),
        }
    }
    Ok((data, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskworld::records::ModelTag;
    use crate::taskworld::task::{gold_answer, TaskFamily};
    use crate::taskworld::vocab::Token;

    fn x() -> Instruction {
        Instruction::new(5, TaskFamily::Copy, 0, vec![Token::letter(0), Token::letter(1)])
    }

    fn r(t: &[u8]) -> Response {
        Response::new(t.iter().map(|&v| Token(v)).collect(), ModelTag::Sft)
    }

    #[test]
    fn swapping_arguments_keeps_the_winner() {
        let spec = TrueRewardSpec::default();
        let (y1, y2) = (r(&[11, 0]), r(&[11, 12, 0]));
        for seed in 0..50 {
            let a = annotate(&x(), &y1, &y2, &spec, seed).unwrap();
            let b = annotate(&x(), &y2, &y1, &spec, seed).unwrap();
            assert_eq!(a.chosen, b.chosen);
        }
    }

    #[test]
    fn identical_pair_is_rejected() {
        let spec = TrueRewardSpec::default();
        assert!(annotate(&x(), &r(&[11]), &r(&[11]), &spec, 0).is_err());
    }

    struct Fixed(Response);

    impl Sampler for Fixed {
        fn sample_response(&self, _: &Instruction, _: u64) -> Response {
            self.0.clone()
        }
    }

    #[test]
    fn degenerate_sampler_skips_everything() {
        let spec = TrueRewardSpec::default();
        let set = InstructionSet {
            split: crate::taskworld::Split::Preference,
            items: (0..20).map(|i| Instruction::new(i, TaskFamily::Copy, 0, vec![Token::letter(0)])).collect(),
        };
        let (d, rep) = collect_preferences(&Fixed(gold_answer(&set.items[0])), &set, &spec, 1).unwrap();
        assert!(d.is_empty());
        assert_eq!(rep.skipped.len(), 20);
        assert_eq!(rep.collected, 0);
    }
}
