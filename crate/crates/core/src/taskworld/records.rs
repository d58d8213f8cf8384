//! Responses, preference pairs, and their line-record files.
//!
//! Record files are UTF-8 text. The first line is a `#` header naming the
//! record kind, format version, and set tag. Each following line is one
//! record: tab-separated `key=value` fields, token sequences rendered as
//! space-separated symbol names.
//!
//! Instruction files (`# rlp-instructions v1 split=<split>`) carry
//! `id`, `family`, `args`, `prompt`. Preference files
//! (`# rlp-preferences v1 set=<D|D-hat>`) carry `id`, `family`, `args`,
//! `source`, `chosen`, `rejected`, `chosen_from`, `rejected_from`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use super::task::{Instruction, InstructionSet, Split};
use super::vocab::{parse_tokens, render_tokens, Token};
use super::TaskError;

/// Which model produced a response.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelTag {
    Sft,
    Ppo,
    RlpUml,
    RlpSpg,
    Reference,
    Other,
}

impl ModelTag {
    pub const ALL: [ModelTag; 6] = [
        ModelTag::Sft,
        ModelTag::Ppo,
        ModelTag::RlpUml,
        ModelTag::RlpSpg,
        ModelTag::Reference,
        ModelTag::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelTag::Sft => "sft",
            ModelTag::Ppo => "ppo",
            ModelTag::RlpUml => "rlp-uml",
            ModelTag::RlpSpg => "rlp-spg",
            ModelTag::Reference => "reference",
            ModelTag::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<ModelTag> {
        ModelTag::ALL.into_iter().find(|t| t.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Response {
    pub tokens: Vec<Token>,
    pub source: ModelTag,
}

impl Response {
    pub fn new(tokens: Vec<Token>, source: ModelTag) -> Self {
        Self { tokens, source }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl fmt::Display for Response {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_tokens(&self.tokens))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum PairSource {
    SimulatedAnnotator,
    SyntheticSpg,
    /// Pairs produced by an ablation variant, named by the variant.
    Ablation(String),
}

impl PairSource {
    pub fn name(&self) -> String {
        match self {
            PairSource::SimulatedAnnotator => "simulated-annotator".into(),
            PairSource::SyntheticSpg => "synthetic-spg".into(),
            PairSource::Ablation(v) => format!("ablation:{v}"),
        }
    }

    pub fn parse(s: &str) -> Option<PairSource> {
        match s {
            "simulated-annotator" => Some(PairSource::SimulatedAnnotator),
            "synthetic-spg" => Some(PairSource::SyntheticSpg),
            _ => s
                .strip_prefix("ablation:")
                .filter(|v| !v.is_empty() && !v.contains(char::is_whitespace))
                .map(|v| PairSource::Ablation(v.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    pub instruction: Instruction,
    pub chosen: Response,
    pub rejected: Response,
    pub source: PairSource,
}

/// Human-simulated preferences `D` or synthetic preferences `D-hat`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetTag {
    Human,
    Synthetic,
}

impl DatasetTag {
    pub fn name(self) -> &'static str {
        match self {
            DatasetTag::Human => "D",
            DatasetTag::Synthetic => "D-hat",
        }
    }

    pub fn parse(s: &str) -> Option<DatasetTag> {
        match s {
            "D" => Some(DatasetTag::Human),
            "D-hat" => Some(DatasetTag::Synthetic),
            _ => None,
        }
    }
}

type PairKey = (u64, Vec<Token>, Vec<Token>);

/// Preference pairs with no repeated (instruction, chosen, rejected) triple.
#[derive(Clone, Debug)]
pub struct PreferenceDataset {
    pub tag: DatasetTag,
    pairs: Vec<PreferencePair>,
    seen: HashSet<PairKey>,
}

impl PartialEq for PreferenceDataset {
    fn eq(&self, other: &Self) -> bool {
        self.tag == other.tag && self.pairs == other.pairs
    }
}

impl PreferenceDataset {
    pub fn new(tag: DatasetTag) -> Self {
        Self {
            tag,
            pairs: Vec::new(),
            seen: HashSet::new(),
        }
    }

    pub fn push(&mut self, pair: PreferencePair) -> Result<(), TaskError> {
        if pair.chosen.tokens == pair.rejected.tokens {
            return Err(TaskError::IdenticalResponses(pair.instruction.id));
        }
        let key = (
            pair.instruction.id,
            pair.chosen.tokens.clone(),
            pair.rejected.tokens.clone(),
        );
        if !self.seen.insert(key) {
            return Err(TaskError::DuplicatePair(pair.instruction.id));
        }
        self.pairs.push(pair);
        Ok(())
    }

    pub fn pairs(&self) -> &[PreferencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PreferencePair> {
        self.pairs.iter()
    }
}

fn instruction_fields(x: &Instruction) -> String {
    format!(
        "id={}\tfamily={}\targs={}",
        x.id,
        x.family_tag(),
        render_tokens(&x.args)
    )
}

pub fn write_instructions<W: Write>(mut w: W, set: &InstructionSet) -> Result<(), TaskError> {
    writeln!(w, "# rlp-instructions v1 split={}", set.split.name())?;
    for x in set.iter() {
        writeln!(w, "{}\tprompt={}", instruction_fields(x), render_tokens(&x.prompt))?;
    }
    Ok(())
}

pub fn write_preferences<W: Write>(mut w: W, data: &PreferenceDataset) -> Result<(), TaskError> {
    writeln!(w, "# rlp-preferences v1 set={}", data.tag.name())?;
    for p in data.iter() {
        writeln!(
            w,
            "{}\tsource={}\tchosen={}\trejected={}\tchosen_from={}\trejected_from={}",
            instruction_fields(&p.instruction),
            p.source.name(),
            render_tokens(&p.chosen.tokens),
            render_tokens(&p.rejected.tokens),
            p.chosen.source.name(),
            p.rejected.source.name(),
        )?;
    }
    Ok(())
}

struct Record<'a> {
    line: usize,
    fields: HashMap<&'a str, &'a str>,
}

impl<'a> Record<'a> {
    fn parse(line: usize, text: &'a str) -> Result<Self, TaskError> {
        let mut fields = HashMap::new();
        for part in text.split('\t') {
            let (k, v) = part.split_once('=').ok_or_else(|| parse_err(line, format!("field without '=': {part:?}")))?;
            if fields.insert(k, v).is_some() {
                return Err(parse_err(line, format!("repeated field {k}")));
            }
        }
        Ok(Self { line, fields })
    }

    fn get(&self, key: &str) -> Result<&'a str, TaskError> {
        self.fields
            .get(key)
            .copied()
            .ok_or_else(|| parse_err(self.line, format!("missing field {key}")))
    }

    fn tokens(&self, key: &str) -> Result<Vec<Token>, TaskError> {
        parse_tokens(self.get(key)?).ok_or_else(|| parse_err(self.line, format!("bad token sequence in {key}")))
    }

    fn instruction(&self) -> Result<Instruction, TaskError> {
        let id = self
            .get("id")?
            .parse()
            .map_err(|_| parse_err(self.line, "bad id".into()))?;
        let (family, repeat) = Instruction::parse_family_tag(self.get("family")?)
            .ok_or_else(|| parse_err(self.line, "unknown family".into()))?;
        Ok(Instruction::new(id, family, repeat, self.tokens("args")?))
    }

    fn model(&self, key: &str) -> Result<ModelTag, TaskError> {
        ModelTag::parse(self.get(key)?).ok_or_else(|| parse_err(self.line, format!("unknown model tag in {key}")))
    }
}

fn parse_err(line: usize, msg: String) -> TaskError {
    TaskError::Parse { line, msg }
}

/// Split a file into its header value for `key` and numbered body lines.
fn read_body<R: BufRead>(r: R, kind: &str, key: &str) -> Result<(String, Vec<(usize, String)>), TaskError> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.ok_or_else(|| parse_err(1, "empty file".into()))?;
    let prefix = format!("# {kind} v1 {key}=");
    let tag = header
        .strip_prefix(&prefix)
        .ok_or_else(|| parse_err(1, format!("expected header {prefix:?}")))?
        .to_string();
    let mut body = Vec::new();
    for (i, l) in lines.enumerate() {
        let l = l?;
        if !l.is_empty() {
            body.push((i + 2, l));
        }
    }
    Ok((tag, body))
}

pub fn read_instructions<R: BufRead>(r: R) -> Result<InstructionSet, TaskError> {
    let (tag, body) = read_body(r, "rlp-instructions", "split")?;
    let split = Split::parse(&tag).ok_or_else(|| parse_err(1, format!("unknown split {tag}")))?;
    let mut items = Vec::with_capacity(body.len());
    for (n, l) in &body {
        let rec = Record::parse(*n, l)?;
        let x = rec.instruction()?;
        if rec.tokens("prompt")? != x.prompt {
            return Err(parse_err(*n, "prompt does not match family and args".into()));
        }
        items.push(x);
    }
    Ok(InstructionSet { split, items })
}

pub fn read_preferences<R: BufRead>(r: R) -> Result<PreferenceDataset, TaskError> {
    let (tag, body) = read_body(r, "rlp-preferences", "set")?;
    let tag = DatasetTag::parse(&tag).ok_or_else(|| parse_err(1, format!("unknown set {tag}")))?;
    let mut data = PreferenceDataset::new(tag);
    for (n, l) in &body {
        let rec = Record::parse(*n, l)?;
        let source = PairSource::parse(rec.get("source")?).ok_or_else(|| parse_err(*n, "unknown source".into()))?;
        data.push(PreferencePair {
            instruction: rec.instruction()?,
            chosen: Response::new(rec.tokens("chosen")?, rec.model("chosen_from")?),
            rejected: Response::new(rec.tokens("rejected")?, rec.model("rejected_from")?),
            source,
        })?;
    }
    Ok(data)
}

pub fn save_instructions(path: &Path, set: &InstructionSet) -> Result<(), TaskError> {
    let mut buf = Vec::new();
    write_instructions(&mut buf, set)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_instructions(path: &Path) -> Result<InstructionSet, TaskError> {
    read_instructions(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn save_preferences(path: &Path, data: &PreferenceDataset) -> Result<(), TaskError> {
    let mut buf = Vec::new();
    write_preferences(&mut buf, data)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_preferences(path: &Path) -> Result<PreferenceDataset, TaskError> {
    read_preferences(std::io::BufReader::new(std::fs::File::open(path)?))
}
