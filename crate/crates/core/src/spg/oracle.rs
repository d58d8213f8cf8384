use crate::taskworld::{canonical, Instruction, Token};

/// The oracle could not reach a verdict. Distinct from "not equivalent".
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("equivalence oracle `{oracle}` unavailable: {reason}")]
pub struct OracleFailure {
    pub oracle: String,
    pub reason: String,
}

/// Directional semantic entailment between two responses to one instruction.
/// Implementations must be shareable across threads.
pub trait EquivalenceOracle: Sync {
    fn name(&self) -> &str;

    /// Whether response `a` entails response `b` under instruction `x`.
    fn entails(&self, x: &Instruction, a: &[Token], b: &[Token]) -> Result<bool, OracleFailure>;

    /// Entailment in both directions.
    fn equivalent(&self, x: &Instruction, a: &[Token], b: &[Token]) -> Result<bool, OracleFailure> {
        Ok(self.entails(x, a, b)? && self.entails(x, b, a)?)
    }
}

/// Two responses are equivalent iff their canonical forms are equal.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExactCanonical;

impl EquivalenceOracle for ExactCanonical {
    fn name(&self) -> &str {
        "exact-canonical"
    }

    fn entails(&self, _x: &Instruction, a: &[Token], b: &[Token]) -> Result<bool, OracleFailure> {
        Ok(canonical(a) == canonical(b))
    }
}

/// Wraps an external entailment classifier. The closure returns `None`
/// when the classifier cannot answer.
pub struct ClassifierOracle<F> {
    name: String,
    classify: F,
}

impl<F> ClassifierOracle<F>
where
    F: Fn(&Instruction, &[Token], &[Token]) -> Option<bool> + Sync,
{
    pub fn new(name: impl Into<String>, classify: F) -> Self {
        Self {
            name: name.into(),
            classify,
        }
    }
}

impl<F> EquivalenceOracle for ClassifierOracle<F>
where
    F: Fn(&Instruction, &[Token], &[Token]) -> Option<bool> + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn entails(&self, x: &Instruction, a: &[Token], b: &[Token]) -> Result<bool, OracleFailure> {
        (self.classify)(x, a, b).ok_or_else(|| OracleFailure {
            oracle: self.name.clone(),
            reason: format!("no verdict for instruction {}", x.id),
        })
    }
}
