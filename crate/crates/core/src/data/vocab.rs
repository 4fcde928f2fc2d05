use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use super::record::DocumentRecord;
use super::tokenize::split;
use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const START: &str = "<s>";
pub const END: &str = "</s>";
pub const MASK: &str = "<mask>";
pub const RESERVED: [&str; 4] = [UNK, START, END, MASK];
pub const UNK_ID: usize = 0;
pub const START_ID: usize = 1;
pub const END_ID: usize = 2;
pub const MASK_ID: usize = 3;

/// Token ids of the reference input for a document of `n` tokens: the
/// start marker, `n - 2` mask tokens and the end marker.
pub fn baseline_tokens(n: usize) -> Vec<usize> {
    match n {
        0 => Vec::new(),
        1 => vec![MASK_ID],
        _ => {
            let mut t = vec![MASK_ID; n];
            t[0] = START_ID;
            t[n - 1] = END_ID;
            t
        }
    }
}

/// Token vocabulary. Ids 0..4 are the reserved markers, then tokens by
/// descending training frequency with ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Config(format!("vocabulary must start with {RESERVED:?}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn build<'a>(records: impl IntoIterator<Item = &'a DocumentRecord>, min_count: usize, max_size: Option<usize>) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for r in records {
            for p in split(&r.text) {
                *counts.entry(p.text).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let room = max_size.map(|m| m.saturating_sub(tokens.len())).unwrap_or(usize::MAX);
        tokens.extend(ranked.into_iter().take(room).map(|(t, _)| t));
        Self::from_tokens(tokens).expect("reserved prefix and unique tokens")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index[token]
    }

    /// Id of `token`, or the unknown id.
    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn mask_id(&self) -> usize {
        self.id(MASK)
    }

    pub fn start_id(&self) -> usize {
        self.id(START)
    }

    pub fn end_id(&self) -> usize {
        self.id(END)
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}
