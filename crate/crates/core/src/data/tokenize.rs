use std::collections::BTreeMap;

use super::record::DocumentRecord;
use super::vocab::{Vocab, END, START};

/// A raw token: lowercased surface and its character span.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Piece {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Splits on whitespace; alphanumeric runs become words and runs of any
/// other non-space characters become punctuation tokens.
pub fn split(text: &str) -> Vec<Piece> {
    #[derive(PartialEq, Clone, Copy)]
    enum Kind {
        Word,
        Punct,
    }
    let mut out: Vec<Piece> = Vec::new();
    let mut cur: Option<(Kind, usize, String)> = None;
    let flush = |cur: &mut Option<(Kind, usize, String)>, end: usize, out: &mut Vec<Piece>| {
        if let Some((_, start, text)) = cur.take() {
            out.push(Piece { text, start, end });
        }
    };
    let mut n = 0;
    for (i, ch) in text.chars().enumerate() {
        n = i + 1;
        if ch.is_whitespace() {
            flush(&mut cur, i, &mut out);
            continue;
        }
        let kind = if ch.is_alphanumeric() { Kind::Word } else { Kind::Punct };
        match &mut cur {
            Some((k, _, s)) if *k == kind => s.extend(ch.to_lowercase()),
            _ => {
                flush(&mut cur, i, &mut out);
                cur = Some((kind, i, ch.to_lowercase().collect()));
            }
        }
    }
    flush(&mut cur, n, &mut out);
    out
}

/// True when the surface has no ASCII letter or digit.
pub fn is_special(surface: &str) -> bool {
    !surface.chars().any(|c| c.is_ascii_alphanumeric())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodeEvidence {
    pub code: String,
    /// Token indices overlapping any evidence span, ascending.
    pub tokens: Vec<usize>,
    /// Token indices per evidence span; spans left with no tokens after
    /// truncation are dropped.
    pub spans: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedDocument {
    pub id: String,
    pub ids: Vec<usize>,
    /// Surface forms; the start and end markers have empty surfaces.
    pub surfaces: Vec<String>,
    /// Character spans; markers get zero-width spans at the text edges.
    pub offsets: Vec<(usize, usize)>,
    pub special: Vec<bool>,
    pub codes: Vec<CodeEvidence>,
    pub truncated: bool,
}

impl TokenizedDocument {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn evidence(&self, code: &str) -> Option<&CodeEvidence> {
        self.codes.iter().find(|c| c.code == code)
    }
}

/// Tokenizes, maps to ids, adds start/end markers, truncates content to
/// `max_len - 2` tokens and aligns evidence spans by character overlap.
pub fn tokenize_and_align(record: &DocumentRecord, vocab: &Vocab, max_len: usize) -> TokenizedDocument {
    let pieces = split(&record.text);
    let keep = max_len.saturating_sub(2);
    let truncated = pieces.len() > keep;
    let pieces = &pieces[..pieces.len().min(keep)];
    let text_len = record.text.chars().count();

    let mut ids = vec![vocab.id(START)];
    let mut surfaces = vec![String::new()];
    let mut offsets = vec![(0, 0)];
    for p in pieces {
        ids.push(vocab.lookup(&p.text));
        surfaces.push(p.text.clone());
        offsets.push((p.start, p.end));
    }
    ids.push(vocab.id(END));
    surfaces.push(String::new());
    offsets.push((text_len, text_len));
    let special = surfaces.iter().map(|s| is_special(s)).collect();

    let codes = record
        .codes
        .iter()
        .map(|c| {
            let mut all = BTreeMap::new();
            let mut spans = Vec::new();
            for &[s, e] in &c.evidence {
                let hit: Vec<usize> = pieces
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| p.start < e && s < p.end)
                    .map(|(i, _)| i + 1)
                    .collect();
                for &i in &hit {
                    all.insert(i, ());
                }
                if !hit.is_empty() {
                    spans.push(hit);
                }
            }
            CodeEvidence {
                code: c.code.clone(),
                tokens: all.into_keys().collect(),
                spans,
            }
        })
        .collect();
    TokenizedDocument {
        id: record.id.clone(),
        ids,
        surfaces,
        offsets,
        special,
        codes,
        truncated,
    }
}
