//! Policy sample file (`P`).
//!
//! Header `# rlp-samples v1 model=<tag>`, then one line per sampled
//! response: `id`, `family`, `args`, `index`, `response`. Lines of one
//! instruction are contiguous and indexed from 0.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::spg::PolicySampleSet;
use crate::taskworld::{parse_tokens, render_tokens, Instruction, ModelTag, Response, TaskError};

pub fn write_samples<W: Write>(mut w: W, p: &[PolicySampleSet]) -> Result<(), TaskError> {
    let tag = p.first().map_or(ModelTag::Other, |s| s.tag);
    writeln!(w, "# rlp-samples v1 model={}", tag.name())?;
    for s in p {
        let x = &s.instruction;
        for (k, y) in s.responses.iter().enumerate() {
            writeln!(
                w,
                "id={}\tfamily={}\targs={}\tindex={k}\tresponse={}",
                x.id,
                x.family_tag(),
                render_tokens(&x.args),
                render_tokens(&y.tokens)
            )?;
        }
    }
    Ok(())
}

fn bad(line: usize, msg: impl Into<String>) -> TaskError {
    TaskError::Parse { line, msg: msg.into() }
}

pub fn read_samples<R: BufRead>(r: R) -> Result<Vec<PolicySampleSet>, TaskError> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.ok_or_else(|| bad(1, "empty file"))?;
    let tag = header
        .strip_prefix("# rlp-samples v1 model=")
        .and_then(ModelTag::parse)
        .ok_or_else(|| bad(1, "expected `# rlp-samples v1 model=<tag>` header"))?;
    let mut out: Vec<PolicySampleSet> = Vec::new();
    for (i, l) in lines.enumerate() {
        let n = i + 2;
        let l = l?;
        if l.is_empty() {
            continue;
        }
        let mut f = std::collections::HashMap::new();
        for part in l.split('\t') {
            let (k, v) = part.split_once('=').ok_or_else(|| bad(n, format!("field without '=': {part:?}")))?;
            f.insert(k, v);
        }
        let get = |k: &str| f.get(k).copied().ok_or_else(|| bad(n, format!("missing field {k}")));
        let toks = |k: &str| get(k).and_then(|v| parse_tokens(v).ok_or_else(|| bad(n, format!("bad tokens in {k}"))));
        let id: u64 = get("id")?.parse().map_err(|_| bad(n, "bad id"))?;
        let index: usize = get("index")?.parse().map_err(|_| bad(n, "bad index"))?;
        let (family, repeat) = Instruction::parse_family_tag(get("family")?).ok_or_else(|| bad(n, "unknown family"))?;
        let y = Response::new(toks("response")?, tag);
        match out.last_mut() {
            Some(s) if s.instruction.id == id => {
                if index != s.responses.len() {
                    return Err(bad(n, format!("expected index {}, got {index}", s.responses.len())));
                }
                s.responses.push(y);
            }
            _ => {
                if index != 0 {
                    return Err(bad(n, "sample set must start at index 0"));
                }
                out.push(PolicySampleSet {
                    instruction: Instruction::new(id, family, repeat, toks("args")?),
                    responses: vec![y],
                    tag,
                });
            }
        }
    }
    Ok(out)
}

pub fn save_samples(path: &Path, p: &[PolicySampleSet]) -> Result<(), TaskError> {
    let mut buf = Vec::new();
    write_samples(&mut buf, p)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_samples(path: &Path) -> Result<Vec<PolicySampleSet>, TaskError> {
    read_samples(std::io::BufReader::new(std::fs::File::open(path)?))
}
