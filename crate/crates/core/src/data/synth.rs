//! Synthetic corpora with planted evidence.
//!
//! Each code owns a trigger phrase. A document samples a code subset and
//! contains every chosen code's trigger once, at a random position, with
//! the trigger's character span recorded as evidence. The remaining tokens
//! are distractors: Zipf-distributed filler words, punctuation-only tokens
//! and, with `decoy_rate`, lone words borrowed from triggers of codes the
//! document does not have.

use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use super::record::{write_corpus, CodeAnnotation, DocumentRecord};
use crate::error::{Error, Result};

pub const PUNCTUATION: [&str; 12] = [".", ",", ";", ":", "(", ")", "-", "/", "*", "[", "]", "+"];

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ne", "ru", "sa", "ti", "vo", "be", "du", "fa", "go", "hi", "ju", "pe", "zo",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CodeSampling {
    /// Each code independently with probability `p`.
    Bernoulli { p: f64 },
    /// Exactly `k` distinct codes, uniformly.
    Exactly { k: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Number of distinct filler words.
    pub vocab_size: usize,
    pub codes: usize,
    /// Words per generated trigger phrase.
    pub trigger_len: usize,
    /// Explicit trigger phrases, one per code; generated when empty.
    pub triggers: Vec<Vec<String>>,
    pub train_docs: usize,
    pub val_docs: usize,
    pub test_docs: usize,
    /// Content length range in tokens, inclusive.
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of the non-trigger length filled with distractors.
    pub noise_rate: f64,
    /// Fraction of distractors that are punctuation-only.
    pub punct_rate: f64,
    /// Fraction of distractors that are decoy trigger words.
    pub decoy_rate: f64,
    pub code_sampling: CodeSampling,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1500,
            codes: 10,
            trigger_len: 2,
            triggers: Vec::new(),
            train_docs: 2000,
            val_docs: 200,
            test_docs: 200,
            min_len: 24,
            max_len: 48,
            noise_rate: 1.0,
            punct_rate: 0.2,
            decoy_rate: 0.05,
            code_sampling: CodeSampling::Bernoulli { p: 0.2 },
            seed: 0,
        }
    }
}

/// Pronounceable word for index `i`, unique per index.
fn word(i: usize) -> String {
    let mut n = i;
    let mut s = String::new();
    loop {
        s.push_str(SYLLABLES[n % SYLLABLES.len()]);
        n /= SYLLABLES.len();
        if n == 0 {
            break;
        }
        n -= 1;
    }
    s
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.codes == 0 || self.vocab_size == 0 {
            return fail("codes and vocab_size must be positive".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail(format!("invalid length range {}..={}", self.min_len, self.max_len));
        }
        for (name, r) in [("noise_rate", self.noise_rate), ("punct_rate", self.punct_rate), ("decoy_rate", self.decoy_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return fail(format!("{name} must lie in [0, 1], got {r}"));
            }
        }
        if self.punct_rate + self.decoy_rate > 1.0 {
            return fail("punct_rate + decoy_rate exceeds 1".into());
        }
        let max_codes = match self.code_sampling {
            CodeSampling::Bernoulli { p } => {
                if !(0.0..=1.0).contains(&p) {
                    return fail(format!("code probability must lie in [0, 1], got {p}"));
                }
                self.codes
            }
            CodeSampling::Exactly { k } => {
                if k > self.codes {
                    return fail(format!("cannot pick {k} of {} codes", self.codes));
                }
                k
            }
        };
        let triggers = self.trigger_phrases()?;
        let mut lens: Vec<usize> = triggers.iter().map(Vec::len).collect();
        lens.sort_unstable_by(|a, b| b.cmp(a));
        let worst: usize = lens.iter().take(max_codes).sum();
        if worst > self.max_len {
            return fail(format!(
                "trigger phrases need up to {worst} tokens but documents hold {}",
                self.max_len
            ));
        }
        Ok(())
    }

    /// Trigger phrases per code, disjoint from each other and from filler.
    pub fn trigger_phrases(&self) -> Result<Vec<Vec<String>>> {
        if !self.triggers.is_empty() {
            if self.triggers.len() != self.codes {
                return Err(Error::Config(format!(
                    "{} trigger phrases given for {} codes",
                    self.triggers.len(),
                    self.codes
                )));
            }
            let mut seen = std::collections::BTreeSet::new();
            for t in &self.triggers {
                if t.is_empty() {
                    return Err(Error::Config("empty trigger phrase".into()));
                }
                for w in t {
                    if !seen.insert(w.to_lowercase()) {
                        return Err(Error::Config(format!("trigger word `{w}` is shared between codes")));
                    }
                }
            }
            return Ok(self.triggers.clone());
        }
        if self.trigger_len == 0 {
            return Err(Error::Config("trigger_len must be positive".into()));
        }
        Ok((0..self.codes)
            .map(|j| {
                (0..self.trigger_len)
                    .map(|k| word(self.vocab_size + j * self.trigger_len + k))
                    .collect()
            })
            .collect())
    }

    pub fn code_names(&self) -> Vec<String> {
        (0..self.codes).map(|j| format!("C{j:02}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub codes: Vec<String>,
    pub triggers: Vec<Vec<String>>,
    pub train: Vec<DocumentRecord>,
    pub val: Vec<DocumentRecord>,
    pub test: Vec<DocumentRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: SynthConfig,
    pub seed: u64,
    pub codes: Vec<String>,
    pub triggers: Vec<Vec<String>>,
    pub files: Vec<String>,
    pub documents: [usize; 3],
}

enum Slot {
    Word(String),
    Trigger(usize),
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    triggers: Vec<Vec<String>>,
    codes: Vec<String>,
    filler: Zipf<f64>,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn pick_codes(&mut self) -> Vec<usize> {
        match self.cfg.code_sampling {
            CodeSampling::Bernoulli { p } => (0..self.cfg.codes).filter(|_| self.rng.random::<f64>() < p).collect(),
            CodeSampling::Exactly { k } => {
                let mut all: Vec<usize> = (0..self.cfg.codes).collect();
                all.shuffle(&mut self.rng);
                let mut chosen = all[..k].to_vec();
                chosen.sort_unstable();
                chosen
            }
        }
    }

    fn distractor(&mut self, present: &[usize]) -> String {
        let u: f64 = self.rng.random();
        if u < self.cfg.punct_rate {
            return PUNCTUATION.choose(&mut self.rng).unwrap().to_string();
        }
        if u < self.cfg.punct_rate + self.cfg.decoy_rate {
            let absent: Vec<usize> = (0..self.cfg.codes).filter(|j| !present.contains(j)).collect();
            if let Some(&j) = absent.choose(&mut self.rng) {
                return self.triggers[j].choose(&mut self.rng).unwrap().clone();
            }
        }
        let rank = self.filler.sample(&mut self.rng) as usize;
        word(rank.clamp(1, self.cfg.vocab_size) - 1)
    }

    fn document(&mut self, id: String) -> DocumentRecord {
        let chosen = self.pick_codes();
        let len = self.rng.random_range(self.cfg.min_len..=self.cfg.max_len);
        let trig_tokens: usize = chosen.iter().map(|&j| self.triggers[j].len()).sum();
        let free = len.saturating_sub(trig_tokens);
        let n_noise = (self.cfg.noise_rate * free as f64).round() as usize;
        let mut slots: Vec<Slot> = (0..n_noise).map(|_| Slot::Word(self.distractor(&chosen))).collect();
        let mut order = chosen.clone();
        order.shuffle(&mut self.rng);
        for j in order {
            let at = self.rng.random_range(0..=slots.len());
            slots.insert(at, Slot::Trigger(j));
        }
        let mut text = String::new();
        let mut chars = 0;
        let mut spans = vec![None; self.cfg.codes];
        let push = |w: &str, text: &mut String, chars: &mut usize| -> (usize, usize) {
            if !text.is_empty() {
                text.push(' ');
                *chars += 1;
            }
            let start = *chars;
            text.push_str(w);
            *chars += w.chars().count();
            (start, *chars)
        };
        for slot in &slots {
            match slot {
                Slot::Word(w) => {
                    push(w, &mut text, &mut chars);
                }
                Slot::Trigger(j) => {
                    let mut start = None;
                    let mut end = 0;
                    for w in &self.triggers[*j] {
                        let (s, e) = push(w, &mut text, &mut chars);
                        start.get_or_insert(s);
                        end = e;
                    }
                    spans[*j] = Some([start.unwrap(), end]);
                }
            }
        }
        let codes = chosen
            .iter()
            .map(|&j| CodeAnnotation {
                code: self.codes[j].clone(),
                evidence: vec![spans[j].expect("trigger placed")],
            })
            .collect();
        DocumentRecord { id, text, codes }
    }
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let triggers = config.trigger_phrases()?;
    let codes = config.code_names();
    let mut g = Generator {
        cfg: config,
        triggers: triggers.clone(),
        codes: codes.clone(),
        filler: Zipf::new(config.vocab_size as f64, 1.0).map_err(|e| Error::Config(e.to_string()))?,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let mut split = |name: &str, n: usize| -> Vec<DocumentRecord> {
        (0..n).map(|i| g.document(format!("{name}-{i:05}"))).collect()
    };
    let train = split("train", config.train_docs);
    let val = split("val", config.val_docs);
    let test = split("test", config.test_docs);
    Ok(SyntheticCorpus {
        codes,
        triggers,
        train,
        val,
        test,
    })
}

pub const SPLIT_FILES: [&str; 3] = ["train.jsonl", "val.jsonl", "test.jsonl"];

impl SyntheticCorpus {
    /// Writes the three splits and `manifest.json`; returns written paths.
    pub fn write(&self, dir: &Path, config: &SynthConfig) -> Result<Vec<std::path::PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for (name, docs) in SPLIT_FILES.iter().zip([&self.train, &self.val, &self.test]) {
            let p = dir.join(name);
            write_corpus(&p, docs)?;
            paths.push(p);
        }
        let manifest = SynthManifest {
            config: config.clone(),
            seed: config.seed,
            codes: self.codes.clone(),
            triggers: self.triggers.clone(),
            files: SPLIT_FILES.iter().map(|s| s.to_string()).collect(),
            documents: [self.train.len(), self.val.len(), self.test.len()],
        };
        let p = dir.join("manifest.json");
        fs::write(&p, serde_json::to_string_pretty(&manifest)?)?;
        paths.push(p);
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_are_unique() {
        let w: std::collections::BTreeSet<String> = (0..5000).map(word).collect();
        assert_eq!(w.len(), 5000);
    }

    #[test]
    fn noise_free_documents_are_their_trigger() {
        let cfg = SynthConfig {
            noise_rate: 0.0,
            code_sampling: CodeSampling::Exactly { k: 1 },
            train_docs: 20,
            val_docs: 0,
            test_docs: 0,
            ..Default::default()
        };
        let c = generate_synthetic(&cfg).unwrap();
        for d in &c.train {
            assert_eq!(d.codes.len(), 1);
            let j: usize = d.codes[0].code[1..].parse().unwrap();
            assert_eq!(d.text, c.triggers[j].join(" "));
            assert_eq!(d.codes[0].evidence, vec![[0, d.text.chars().count()]]);
        }
    }

    #[test]
    fn seeded() {
        let cfg = SynthConfig {
            train_docs: 30,
            val_docs: 5,
            test_docs: 5,
            ..Default::default()
        };
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate_synthetic(&cfg).unwrap().train, generate_synthetic(&other).unwrap().train);
    }

    #[test]
    fn rejects_triggers_longer_than_documents() {
        let cfg = SynthConfig {
            min_len: 1,
            max_len: 3,
            trigger_len: 4,
            ..Default::default()
        };
        assert!(generate_synthetic(&cfg).is_err());
        let cfg = SynthConfig {
            triggers: vec![vec!["a".into()], vec!["a".into()]],
            codes: 2,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn evidence_spans_cover_triggers() {
        let cfg = SynthConfig {
            train_docs: 50,
            val_docs: 0,
            test_docs: 0,
            ..Default::default()
        };
        let c = generate_synthetic(&cfg).unwrap();
        for d in &c.train {
            d.validate().unwrap();
            for a in &d.codes {
                let j: usize = a.code[1..].parse().unwrap();
                let [s, e] = a.evidence[0];
                let span: String = d.text.chars().skip(s).take(e - s).collect();
                assert_eq!(span, c.triggers[j].join(" "));
            }
        }
    }
}
