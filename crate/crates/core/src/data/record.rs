use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeAnnotation {
    pub code: String,
    /// Character spans `[start, end)`.
    #[serde(default)]
    pub evidence: Vec<[usize; 2]>,
}

/// One annotated document as stored in corpus JSONL files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentRecord {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub codes: Vec<CodeAnnotation>,
}

impl DocumentRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        let len = self.text.chars().count();
        let mut seen = BTreeSet::new();
        for c in &self.codes {
            if c.code.is_empty() {
                return Err(format!("document `{}` has an empty code", self.id));
            }
            if !seen.insert(&c.code) {
                return Err(format!("document `{}` repeats code `{}`", self.id, c.code));
            }
            for &[s, e] in &c.evidence {
                if s >= e || e > len {
                    return Err(format!(
                        "span [{s}, {e}) of code `{}` is invalid for text of {len} characters",
                        c.code
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn code_names(&self) -> impl Iterator<Item = &str> {
        self.codes.iter().map(|c| c.code.as_str())
    }
}

/// Reads records from JSONL text. Blank lines are skipped.
pub fn parse_corpus(reader: impl BufRead) -> Result<Vec<DocumentRecord>> {
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocumentRecord = serde_json::from_str(&line).map_err(|e| Error::Data {
            line: line_no,
            msg: e.to_string(),
        })?;
        rec.validate().map_err(|msg| Error::Data { line: line_no, msg })?;
        if !ids.insert(rec.id.clone()) {
            return Err(Error::Data {
                line: line_no,
                msg: format!("duplicate id `{}`", rec.id),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<DocumentRecord>> {
    parse_corpus(BufReader::new(fs::File::open(path)?))
}

pub fn write_corpus(path: &Path, records: &[DocumentRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
