//! Synthetic instruction-following world.
//!
//! Instructions ask for a simple sequence transformation (copy, reverse,
//! sort, repeat-k, dedup, max-token) over a small letter alphabet. Each has
//! a unique gold answer, a programmatic reward r*, and a simulated
//! Bradley–Terry annotator that compares responses by r*.

mod annotate;
mod records;
mod reward;
mod task;
mod vocab;

pub use annotate::{annotate, collect_preferences, preference_probability, CollectionReport, Sampler, PAIR_RETRIES};
pub use records::{
    load_instructions, load_preferences, read_instructions, read_preferences, save_instructions, save_preferences,
    write_instructions, write_preferences, DatasetTag, ModelTag, PairSource, PreferenceDataset, PreferencePair,
    Response,
};
pub use reward::{annotator_score, canonical, correctness, is_terminated, true_reward, true_reward_tokens, TrueRewardSpec};
pub use task::{
    generate_splits, gold_answer, gold_content, Instruction, InstructionSet, Split, SplitCounts, Splits, TaskFamily,
    WorldConfig,
};
pub use vocab::{parse_tokens, render_tokens, Token, MAX_ALPHABET, VOCAB_SIZE};

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("family {family}: {requested} instructions requested but only {available} distinct ones exist")]
    VocabularyExhausted {
        family: &'static str,
        requested: usize,
        available: u128,
    },
    #[error("instruction {0}: both responses are identical")]
    IdenticalResponses(u64),
    #[error("instruction {0}: duplicate preference pair")]
    DuplicatePair(u64),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
