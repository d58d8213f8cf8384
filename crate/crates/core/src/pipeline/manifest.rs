//! Run manifest: what each stage wrote, where, and its content hash.
//!
//! Stored as `manifest.txt` in the run directory, one tab-separated record
//! per line:
//!
//! ```text
//! # rlp-manifest v1
//! version     <crate version>
//! fingerprint <sha256 of the stage-relevant config>
//! method      <method>
//! seed        <seed>
//! config      <path> <sha256>
//! stage       <name> <unix seconds>
//! file        <stage> <label> <path> <sha256>
//! ```
//!
//! Paths are relative to the run directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use super::PipelineError;

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FileEntry {
    pub label: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageEntry {
    pub name: String,
    pub completed: u64,
    pub files: Vec<FileEntry>,
}

impl StageEntry {
    pub fn file(&self, label: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.label == label)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunManifest {
    pub version: String,
    pub fingerprint: String,
    pub method: String,
    pub seed: u64,
    pub config: FileEntry,
    pub stages: Vec<StageEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

pub(crate) fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageEntry> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn stage_names(&self) -> Vec<&str> {
        self.stages.iter().map(|s| s.name.as_str()).collect()
    }

    /// Insert or replace a stage record.
    pub fn record(&mut self, entry: StageEntry) {
        match self.stages.iter_mut().find(|s| s.name == entry.name) {
            Some(s) => *s = entry,
            None => self.stages.push(entry),
        }
    }

    /// Absolute path of a stage output.
    pub fn path(&self, root: &Path, stage: &str, label: &str) -> Option<PathBuf> {
        self.stage(stage)?.file(label).map(|f| root.join(&f.path))
    }

    /// True when every file of the stage exists with its recorded hash.
    pub fn stage_intact(&self, root: &Path, stage: &str) -> bool {
        self.stage(stage).is_some_and(|s| {
            s.files
                .iter()
                .all(|f| file_sha256(&root.join(&f.path)).is_ok_and(|h| h == f.sha256))
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# rlp-manifest v1\n");
        let _ = writeln!(s, "version\t{}", self.version);
        let _ = writeln!(s, "fingerprint\t{}", self.fingerprint);
        let _ = writeln!(s, "method\t{}", self.method);
        let _ = writeln!(s, "seed\t{}", self.seed);
        let _ = writeln!(s, "config\t{}\t{}", self.config.path.display(), self.config.sha256);
        for st in &self.stages {
            let _ = writeln!(s, "stage\t{}\t{}", st.name, st.completed);
            for f in &st.files {
                let _ = writeln!(s, "file\t{}\t{}\t{}\t{}", st.name, f.label, f.path.display(), f.sha256);
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut lines = text.lines();
        if lines.next() != Some("# rlp-manifest v1") {
            return Err(PipelineError::Manifest("missing `# rlp-manifest v1` header".into()));
        }
        let mut m = RunManifest {
            version: String::new(),
            fingerprint: String::new(),
            method: String::new(),
            seed: 0,
            config: FileEntry {
                label: "config".into(),
                path: PathBuf::new(),
                sha256: String::new(),
            },
            stages: Vec::new(),
        };
        for (i, line) in lines.enumerate() {
            let bad = || PipelineError::Manifest(format!("line {}: malformed record {line:?}", i + 2));
            let f: Vec<&str> = line.split('\t').collect();
            match f.as_slice() {
                [] | [""] => {}
                ["version", v] => m.version = v.to_string(),
                ["fingerprint", v] => m.fingerprint = v.to_string(),
                ["method", v] => m.method = v.to_string(),
                ["seed", v] => m.seed = v.parse().map_err(|_| bad())?,
                ["config", p, h] => {
                    m.config.path = PathBuf::from(p);
                    m.config.sha256 = h.to_string();
                }
                ["stage", name, t] => m.stages.push(StageEntry {
                    name: name.to_string(),
                    completed: t.parse().map_err(|_| bad())?,
                    files: Vec::new(),
                }),
                ["file", stage, label, p, h] => {
                    let st = m.stages.iter_mut().find(|s| s.name == *stage).ok_or_else(bad)?;
                    st.files.push(FileEntry {
                        label: label.to_string(),
                        path: PathBuf::from(p),
                        sha256: h.to_string(),
                    });
                }
                _ => return Err(bad()),
            }
        }
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        Self::parse(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)
    }

    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        std::fs::write(dir.join(MANIFEST_FILE), self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_form_parses_back() {
        let m = RunManifest {
            version: "0.1.0".into(),
            fingerprint: "ab".into(),
            method: "ppo".into(),
            seed: 7,
            config: FileEntry {
                label: "config".into(),
                path: "config.txt".into(),
                sha256: "cd".into(),
            },
            stages: vec![StageEntry {
                name: "data".into(),
                completed: 12,
                files: vec![FileEntry {
                    label: "eval".into(),
                    path: "data/eval.txt".into(),
                    sha256: "ef".into(),
                }],
            }],
        };
        assert_eq!(RunManifest::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn file_for_unknown_stage_is_rejected() {
        let text = "# rlp-manifest v1\nfile\tsft\tckpt\tsft.ckpt\t00\n";
        assert!(RunManifest::parse(text).is_err());
    }
}
