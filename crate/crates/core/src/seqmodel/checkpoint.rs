//! Binary checkpoint files.
//!
//! Layout: an ASCII header of newline-terminated lines
//!
//! ```text
//! RLPCKPT 1
//! kind <kind>
//! meta <key> <value>          (zero or more)
//! param <section> <name> <d0>x<d1>...   (one per tensor, in payload order)
//! end
//! ```
//!
//! followed by every tensor's values as little-endian `f64`, row-major, in
//! the order of the `param` lines. Scalars are written with shape `-`.

use std::io::{BufRead, Write};

use crate::numerics::{ParamSet, Tensor};

use super::SeqError;

const MAGIC: &str = "RLPCKPT 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub sections: Vec<(String, ParamSet)>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            meta: Vec::new(),
            sections: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn with_section(mut self, name: &str, params: &ParamSet) -> Self {
        self.sections.push((name.to_string(), params.clone()));
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str, SeqError> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| SeqError::Checkpoint(format!("missing meta {key}")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize, SeqError> {
        self.meta(key)?
            .parse()
            .map_err(|_| SeqError::Checkpoint(format!("meta {key} is not an integer")))
    }

    pub fn section(&self, name: &str) -> Option<&ParamSet> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), SeqError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(SeqError::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)))
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), SeqError> {
        let mut header = format!("{MAGIC}\nkind {}\n", self.kind);
        for (k, v) in &self.meta {
            check_word(k)?;
            check_word(v)?;
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for (section, params) in &self.sections {
            check_word(section)?;
            for (name, t) in params.names().iter().zip(params.tensors()) {
                check_word(name)?;
                let dims = if t.shape().is_empty() {
                    "-".to_string()
                } else {
                    t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
                };
                header.push_str(&format!("param {section} {name} {dims}\n"));
            }
        }
        header.push_str("end\n");
        w.write_all(header.as_bytes())?;
        for (_, params) in &self.sections {
            for t in params.tensors() {
                let mut buf = Vec::with_capacity(t.len() * 8);
                for v in t.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(mut r: R) -> Result<Self, SeqError> {
        let mut line = String::new();
        let mut next_line = |r: &mut R| -> Result<String, SeqError> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(SeqError::Checkpoint("truncated header".into()));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut r)? != MAGIC {
            return Err(SeqError::Checkpoint("not a checkpoint file".into()));
        }
        let kind = next_line(&mut r)?
            .strip_prefix("kind ")
            .ok_or_else(|| SeqError::Checkpoint("missing kind".into()))?
            .to_string();
        let mut ck = Checkpoint::new(&kind);
        let mut shapes: Vec<(String, String, Vec<usize>)> = Vec::new();
        loop {
            let l = next_line(&mut r)?;
            let parts: Vec<&str> = l.split(' ').collect();
            match parts.as_slice() {
                ["end"] => break,
                ["meta", k, v] => ck.meta.push((k.to_string(), v.to_string())),
                ["param", s, n, dims] => {
                    let shape = if *dims == "-" {
                        Vec::new()
                    } else {
                        dims.split('x')
                            .map(|d| d.parse().map_err(|_| SeqError::Checkpoint(format!("bad dims {dims}"))))
                            .collect::<Result<_, _>>()?
                    };
                    shapes.push((s.to_string(), n.to_string(), shape));
                }
                _ => return Err(SeqError::Checkpoint(format!("bad header line {l:?}"))),
            }
        }
        for (section, name, shape) in shapes {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)
                .map_err(|_| SeqError::Checkpoint("truncated payload".into()))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)?;
            if ck.sections.last().map(|(s, _)| s != &section).unwrap_or(true) {
                ck.sections.push((section.clone(), ParamSet::new()));
            }
            ck.sections.last_mut().unwrap().1.add(name, t);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(SeqError::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SeqError> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SeqError> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn check_word(s: &str) -> Result<(), SeqError> {
    if s.is_empty() || s.contains(char::is_whitespace) {
        Err(SeqError::Checkpoint(format!("header field {s:?} must be a single word")))
    } else {
        Ok(())
    }
}
