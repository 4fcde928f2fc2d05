//! Corpus ingestion, tokenization with character offsets, evidence
//! alignment and synthetic corpus generation.

mod record;
mod synth;
mod tokenize;
mod vocab;

pub use record::{load_corpus, parse_corpus, write_corpus, CodeAnnotation, DocumentRecord};
pub use synth::{generate_synthetic, CodeSampling, SynthConfig, SynthManifest, SyntheticCorpus, PUNCTUATION, SPLIT_FILES};
pub use tokenize::{is_special, split, tokenize_and_align, CodeEvidence, Piece, TokenizedDocument};
pub use vocab::{baseline_tokens, Vocab, END, END_ID, MASK, MASK_ID, RESERVED, START, START_ID, UNK, UNK_ID};

/// Tokenized documents with a fixed code list defining class indices.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub codes: Vec<String>,
    pub docs: Vec<TokenizedDocument>,
}

impl Dataset {
    pub fn new(codes: Vec<String>, records: &[DocumentRecord], vocab: &Vocab, max_len: usize) -> Self {
        let docs = records.iter().map(|r| tokenize_and_align(r, vocab, max_len)).collect();
        Self { codes, docs }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.codes.len()
    }

    pub fn class_index(&self, code: &str) -> Option<usize> {
        self.codes.iter().position(|c| c == code)
    }

    /// Binary label vector of document `d`; codes outside the list are ignored.
    pub fn labels(&self, d: usize) -> Vec<f64> {
        let mut y = vec![0.0; self.codes.len()];
        for c in &self.docs[d].codes {
            if let Some(j) = self.class_index(&c.code) {
                y[j] = 1.0;
            }
        }
        y
    }

    /// Evidence token indices for document `d` and class `j`, if annotated.
    pub fn evidence(&self, d: usize, j: usize) -> Option<&CodeEvidence> {
        self.docs[d].evidence(&self.codes[j])
    }

    pub fn has_evidence(&self) -> bool {
        self.docs.iter().any(|d| d.codes.iter().any(|c| !c.tokens.is_empty()))
    }
}

/// Sorted union of code names across record sets.
pub fn code_list<'a>(records: impl IntoIterator<Item = &'a DocumentRecord>) -> Vec<String> {
    let set: std::collections::BTreeSet<String> = records
        .into_iter()
        .flat_map(|r| r.codes.iter().map(|c| c.code.clone()))
        .collect();
    set.into_iter().collect()
}
