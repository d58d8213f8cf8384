use super::records::Response;
use super::task::{gold_content, Instruction};
use super::vocab::Token;
use super::TaskError;

/// Weights of the programmatic reward and the simulated annotator.
#[derive(Clone, Debug, PartialEq)]
pub struct TrueRewardSpec {
    pub correctness_weight: f64,
    /// Penalty per emitted non-terminator token, scaled by `max_response_len`.
    pub brevity_weight: f64,
    /// Bonus for ending with the terminator.
    pub format_weight: f64,
    /// Annotator noise temperature.
    pub tau: f64,
    /// Extra annotator preference for longer responses, in the same length
    /// units as the brevity penalty. Zero gives a well-specified annotator.
    pub verbosity_bias: f64,
    pub max_response_len: usize,
}

impl Default for TrueRewardSpec {
    fn default() -> Self {
        Self {
            correctness_weight: 4.0,
            brevity_weight: 1.0,
            format_weight: 1.0,
            tau: 1.0,
            verbosity_bias: 0.0,
            max_response_len: 12,
        }
    }
}

impl TrueRewardSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        let weights = [
            self.correctness_weight,
            self.brevity_weight,
            self.format_weight,
            self.verbosity_bias,
        ];
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(TaskError::Config("reward weights must be finite".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(TaskError::Config("annotator tau must be positive".into()));
        }
        if self.max_response_len == 0 {
            return Err(TaskError::Config("max_response_len must be positive".into()));
        }
        Ok(())
    }
}

/// Canonical content of a response: tokens before the first terminator with
/// padding removed. Two responses are semantically equivalent exactly when
/// their canonical forms agree.
pub fn canonical(tokens: &[Token]) -> Vec<Token> {
    tokens
        .iter()
        .copied()
        .take_while(|t| *t != Token::EOS)
        .filter(|t| *t != Token::FILL)
        .collect()
}

pub fn is_terminated(tokens: &[Token]) -> bool {
    tokens.contains(&Token::EOS)
}

/// Fraction of positions where the canonical content matches gold, over the
/// longer of the two.
pub fn correctness(x: &Instruction, tokens: &[Token]) -> f64 {
    let c = canonical(tokens);
    let g = gold_content(x);
    let denom = c.len().max(g.len());
    if denom == 0 {
        return 0.0;
    }
    let hits = c.iter().zip(&g).filter(|(a, b)| a == b).count();
    hits as f64 / denom as f64
}

fn emitted_len(tokens: &[Token]) -> usize {
    tokens.iter().filter(|t| **t != Token::EOS).count()
}

pub fn true_reward_tokens(x: &Instruction, tokens: &[Token], spec: &TrueRewardSpec) -> f64 {
    let brevity = emitted_len(tokens) as f64 / spec.max_response_len as f64;
    let format = if is_terminated(tokens) { 1.0 } else { 0.0 };
    spec.correctness_weight * correctness(x, tokens) - spec.brevity_weight * brevity
        + spec.format_weight * format
}

/// Ground-truth reward r*(x, y). Depends only on the tokens.
pub fn true_reward(x: &Instruction, y: &Response, spec: &TrueRewardSpec) -> f64 {
    true_reward_tokens(x, &y.tokens, spec)
}

/// The score the simulated annotator compares: r* plus the optional length
/// bias.
pub fn annotator_score(x: &Instruction, y: &Response, spec: &TrueRewardSpec) -> f64 {
    let len = emitted_len(&y.tokens) as f64 / spec.max_response_len as f64;
    true_reward(x, y, spec) + spec.verbosity_bias * len
}
