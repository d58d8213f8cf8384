use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::records::{ModelTag, Response};
use super::vocab::{Token, MAX_ALPHABET};
use super::TaskError;
use crate::numerics::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskFamily {
    Copy,
    Reverse,
    Sort,
    Repeat,
    Dedup,
    MaxToken,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 6] = [
        TaskFamily::Copy,
        TaskFamily::Reverse,
        TaskFamily::Sort,
        TaskFamily::Repeat,
        TaskFamily::Dedup,
        TaskFamily::MaxToken,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::Copy => "copy",
            TaskFamily::Reverse => "reverse",
            TaskFamily::Sort => "sort",
            TaskFamily::Repeat => "repeat",
            TaskFamily::Dedup => "dedup",
            TaskFamily::MaxToken => "max-token",
        }
    }

    fn tag(self) -> Token {
        match self {
            TaskFamily::Copy => Token::COPY,
            TaskFamily::Reverse => Token::REVERSE,
            TaskFamily::Sort => Token::SORT,
            TaskFamily::Repeat => Token::REPEAT,
            TaskFamily::Dedup => Token::DEDUP,
            TaskFamily::MaxToken => Token::MAX,
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Shape of the synthetic world.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    /// Number of content letters drawn for instruction arguments.
    pub alphabet: usize,
    pub min_args: usize,
    pub max_args: usize,
    /// Maximum response length in tokens, terminator included.
    pub max_response_len: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            alphabet: MAX_ALPHABET,
            min_args: 2,
            max_args: 4,
            max_response_len: 12,
        }
    }
}

impl WorldConfig {
    /// Longest rendered prompt: tag, optional repeat count, arguments, separator.
    pub fn max_prompt_len(&self) -> usize {
        self.max_args + 3
    }

    pub fn context_len(&self) -> usize {
        self.max_prompt_len() + self.max_response_len
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.alphabet == 0 || self.alphabet > MAX_ALPHABET {
            return Err(TaskError::Config(format!("alphabet must be in 1..={MAX_ALPHABET}")));
        }
        if self.min_args == 0 || self.min_args > self.max_args {
            return Err(TaskError::Config("need 1 <= min_args <= max_args".into()));
        }
        // longest gold answer is repeat-3 of three arguments, plus terminator
        let longest = (3 * self.max_args.min(3)).max(self.max_args) + 1;
        if self.max_response_len < longest {
            return Err(TaskError::Config(format!(
                "max_response_len {} cannot hold the longest gold answer ({longest})",
                self.max_response_len
            )));
        }
        Ok(())
    }

    fn arg_len_range(&self, family: TaskFamily) -> (usize, usize) {
        match family {
            TaskFamily::Repeat => (1, self.max_args.min(3)),
            _ => (self.min_args, self.max_args),
        }
    }

    /// Number of distinct instructions of a family.
    fn template_space(&self, family: TaskFamily) -> u128 {
        let (lo, hi) = self.arg_len_range(family);
        let a = self.alphabet as u128;
        if family == TaskFamily::Dedup {
            // arguments use at most ceil(len/2) distinct letters
            return (lo..=hi)
                .map(|l| sequences_with_few_letters(a, l, l.div_ceil(2).max(1)))
                .fold(0, u128::saturating_add);
        }
        let seqs: u128 = (lo..=hi).map(|l| a.saturating_pow(l as u32)).fold(0, u128::saturating_add);
        match family {
            TaskFamily::Repeat => seqs.saturating_mul(2),
            _ => seqs,
        }
    }
}

/// Sequences of length `len` over `a` letters that use at most `k` distinct
/// letters: sum over j of C(a, j) times the surjections onto j letters.
fn sequences_with_few_letters(a: u128, len: usize, k: usize) -> u128 {
    let mut total = 0u128;
    for j in 1..=k.min(len) {
        let j128 = j as u128;
        if j128 > a {
            break;
        }
        let mut choose = 1u128;
        for i in 0..j128 {
            choose = choose * (a - i) / (i + 1);
        }
        // inclusion-exclusion count of surjections from len positions onto j letters
        let mut onto: i128 = 0;
        let mut c: i128 = 1;
        for i in 0..=j {
            let term = c * ((j - i) as i128).pow(len as u32);
            onto += if i % 2 == 0 { term } else { -term };
            c = c * (j - i) as i128 / (i + 1) as i128;
        }
        total = total.saturating_add(choose.saturating_mul(onto as u128));
    }
    total
}

/// A task prompt with its structured arguments.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub id: u64,
    pub family: TaskFamily,
    /// Repeat count for the repeat family, 0 otherwise.
    pub repeat: u8,
    pub args: Vec<Token>,
    /// Rendered prompt fed to the models.
    pub prompt: Vec<Token>,
}

impl Instruction {
    pub fn new(id: u64, family: TaskFamily, repeat: u8, args: Vec<Token>) -> Self {
        let mut prompt = vec![family.tag()];
        if family == TaskFamily::Repeat {
            prompt.push(if repeat == 3 { Token::K3 } else { Token::K2 });
        }
        prompt.extend_from_slice(&args);
        prompt.push(Token::SEP);
        Self {
            id,
            family,
            repeat,
            args,
            prompt,
        }
    }

    /// Family label including the repeat count, e.g. `repeat-3`.
    pub fn family_tag(&self) -> String {
        match self.family {
            TaskFamily::Repeat => format!("repeat-{}", self.repeat),
            f => f.name().to_string(),
        }
    }

    pub fn parse_family_tag(tag: &str) -> Option<(TaskFamily, u8)> {
        match tag {
            "repeat-2" => Some((TaskFamily::Repeat, 2)),
            "repeat-3" => Some((TaskFamily::Repeat, 3)),
            _ => TaskFamily::ALL
                .into_iter()
                .find(|f| *f != TaskFamily::Repeat && f.name() == tag)
                .map(|f| (f, 0)),
        }
    }

    fn content_key(&self) -> (TaskFamily, u8, Vec<Token>) {
        (self.family, self.repeat, self.args.clone())
    }
}

/// The unique correct content (without terminator) for an instruction.
pub fn gold_content(x: &Instruction) -> Vec<Token> {
    match x.family {
        TaskFamily::Copy => x.args.clone(),
        TaskFamily::Reverse => x.args.iter().rev().copied().collect(),
        TaskFamily::Sort => {
            let mut v = x.args.clone();
            v.sort();
            v
        }
        TaskFamily::Repeat => x.args.repeat(x.repeat as usize),
        TaskFamily::Dedup => {
            let mut seen = HashSet::new();
            x.args.iter().copied().filter(|t| seen.insert(*t)).collect()
        }
        TaskFamily::MaxToken => x.args.iter().max().copied().into_iter().collect(),
    }
}

/// Gold content followed by the terminator.
pub fn gold_answer(x: &Instruction) -> Response {
    let mut tokens = gold_content(x);
    tokens.push(Token::EOS);
    Response::new(tokens, ModelTag::Reference)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Sft,
    Preference,
    Unlabeled,
    Eval,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Sft, Split::Preference, Split::Unlabeled, Split::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Split::Sft => "sft",
            Split::Preference => "preference",
            Split::Unlabeled => "unlabeled",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstructionSet {
    pub split: Split,
    pub items: Vec<Instruction>,
}

impl InstructionSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Instruction> {
        self.items.iter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub sft: usize,
    pub preference: usize,
    pub unlabeled: usize,
    pub eval: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            sft: 200,
            preference: 200,
            unlabeled: 400,
            eval: 100,
        }
    }
}

impl SplitCounts {
    fn get(&self, s: Split) -> usize {
        match s {
            Split::Sft => self.sft,
            Split::Preference => self.preference,
            Split::Unlabeled => self.unlabeled,
            Split::Eval => self.eval,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub sft: InstructionSet,
    pub preference: InstructionSet,
    pub unlabeled: InstructionSet,
    pub eval: InstructionSet,
}

impl Splits {
    pub fn get(&self, s: Split) -> &InstructionSet {
        match s {
            Split::Sft => &self.sft,
            Split::Preference => &self.preference,
            Split::Unlabeled => &self.unlabeled,
            Split::Eval => &self.eval,
        }
    }
}

const MAX_DRAW_ATTEMPTS: usize = 10_000;

/// Draw four disjoint, family-balanced instruction splits.
///
/// Instruction contents are unique across all splits, and ids are assigned
/// sequentially in split order.
pub fn generate_splits(seed: u64, counts: SplitCounts, world: &WorldConfig) -> Result<Splits, TaskError> {
    world.validate()?;
    for s in Split::ALL {
        if counts.get(s) == 0 {
            return Err(TaskError::Config(format!("split {} must be nonempty", s.name())));
        }
    }
    // per-family demand across all splits, balanced up to one
    for (fi, family) in TaskFamily::ALL.into_iter().enumerate() {
        let demand: usize = Split::ALL
            .iter()
            .map(|&s| {
                let n = counts.get(s);
                n / 6 + usize::from(fi < n % 6)
            })
            .sum();
        let space = world.template_space(family);
        if demand as u128 > space {
            return Err(TaskError::VocabularyExhausted {
                family: family.name(),
                requested: demand,
                available: space,
            });
        }
    }

    let mut used = HashSet::new();
    let mut next_id = 0u64;
    let mut out = Vec::new();
    for split in Split::ALL {
        let mut r = rng::rng(rng::derive_seed(&[seed, rng::label("splits"), rng::label(split.name())]));
        let offset = r.random_range(0..6);
        let n = counts.get(split);
        let mut items = Vec::with_capacity(n);
        for i in 0..n {
            let family = TaskFamily::ALL[(i + offset) % 6];
            let mut attempts = 0;
            let x = loop {
                let cand = draw_instruction(next_id, family, world, &mut r);
                if used.insert(cand.content_key()) {
                    break cand;
                }
                attempts += 1;
                if attempts >= MAX_DRAW_ATTEMPTS {
                    return Err(TaskError::VocabularyExhausted {
                        family: family.name(),
                        requested: n,
                        available: world.template_space(family),
                    });
                }
            };
            next_id += 1;
            items.push(x);
        }
        out.push(InstructionSet { split, items });
    }
    let mut it = out.into_iter();
    Ok(Splits {
        sft: it.next().unwrap(),
        preference: it.next().unwrap(),
        unlabeled: it.next().unwrap(),
        eval: it.next().unwrap(),
    })
}

fn draw_instruction(id: u64, family: TaskFamily, world: &WorldConfig, r: &mut rng::Rng) -> Instruction {
    let (lo, hi) = world.arg_len_range(family);
    let len = r.random_range(lo..=hi);
    let repeat = if family == TaskFamily::Repeat {
        r.random_range(2..=3)
    } else {
        0
    };
    let args: Vec<Token> = if family == TaskFamily::Dedup {
        // small pool so duplicates are common
        let mut letters: Vec<usize> = (0..world.alphabet).collect();
        letters.shuffle(r);
        let pool = &letters[..len.div_ceil(2).max(1).min(world.alphabet)];
        (0..len).map(|_| Token::letter(pool[r.random_range(0..pool.len())])).collect()
    } else {
        (0..len).map(|_| Token::letter(r.random_range(0..world.alphabet))).collect()
    };
    Instruction::new(id, family, repeat, args)
}
