use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xmc_core::attribution::{AttributionSettings, Method, PerturbationBudget};
use xmc_core::data::{code_list, generate_synthetic, load_corpus, Dataset, DocumentRecord, SynthConfig, Vocab, SPLIT_FILES};
use xmc_core::metrics::{FaithfulnessConfig, PlausibilityConfig};
use xmc_core::model::ModelConfig;
use xmc_core::training::{Strategy, TrainConfig};
use xmc_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding `train.jsonl`, `val.jsonl` and `test.jsonl`.
    /// When absent the synthetic corpus below is generated in memory.
    pub dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub min_count: usize,
    pub max_vocab: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            synth: SynthConfig::default(),
            min_count: 1,
            max_vocab: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionConfig {
    pub methods: Vec<Method>,
    pub intgrad_steps: usize,
    pub rollout_renormalize: bool,
    pub budget: PerturbationBudget,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        let s = AttributionSettings::default();
        Self {
            methods: vec![Method::Attention, Method::InputXGrad, Method::AttInGrad, Method::Rand],
            intgrad_steps: s.intgrad_steps,
            rollout_renormalize: s.rollout_renormalize,
            budget: s.budget,
        }
    }
}

impl AttributionConfig {
    pub fn settings(&self) -> AttributionSettings {
        AttributionSettings {
            intgrad_steps: self.intgrad_steps,
            rollout_renormalize: self.rollout_renormalize,
            budget: self.budget.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub plausibility: PlausibilityConfig,
    /// Tune the decision boundary on the validation split; otherwise use
    /// `plausibility.threshold`.
    pub tune_threshold: bool,
    pub faithfulness: FaithfulnessConfig,
    /// Methods scored for faithfulness; all explained methods when absent.
    pub faithfulness_methods: Option<Vec<Method>>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            plausibility: PlausibilityConfig::default(),
            tune_threshold: true,
            faithfulness: FaithfulnessConfig::default(),
            faithfulness_methods: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    /// `vocab_size` and `classes` are taken from the corpus.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub attribution: AttributionConfig,
    pub metrics: MetricsConfig,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig {
                max_len: 128,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            attribution: AttributionConfig::default(),
            metrics: MetricsConfig::default(),
            output: PathBuf::from("runs/default"),
        }
    }
}

fn config_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}: {e}", path.display()))
}

impl RunConfig {
    /// Parses a config file. Unknown keys are rejected.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let text = std::fs::read_to_string(path).map_err(|e| config_error(path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| config_error(path, e))?;
        let cfg = serde_json::from_value(raw.clone()).map_err(|e| config_error(path, e))?;
        Ok((cfg, raw))
    }

    /// Applies a strategy override. Learning rate and epochs follow the
    /// strategy unless the config file set them.
    pub fn set_strategy(&mut self, strategy: Strategy, raw: Option<&serde_json::Value>) {
        let given = |k: &str| raw.and_then(|r| r.get("train")).and_then(|t| t.get(k)).is_some();
        let preset = TrainConfig::for_strategy(strategy);
        self.train.strategy = strategy;
        if !given("learning_rate") {
            self.train.learning_rate = preset.learning_rate;
        }
        if !given("epochs") {
            self.train.epochs = preset.epochs;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.metrics.plausibility.validate()?;
        if self.metrics.faithfulness.k_faith == 0 {
            return Err(Error::Config("k_faith must be at least 1".into()));
        }
        if self.attribution.methods.is_empty() {
            return Err(Error::Config("no attribution methods configured".into()));
        }
        if self.data.dir.is_none() {
            self.data.synth.validate()?;
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of everything but the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Loaded corpus with the vocabulary built on its training split.
pub struct Corpus {
    pub codes: Vec<String>,
    pub vocab: Vocab,
    pub splits: [Vec<DocumentRecord>; 3],
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

impl Corpus {
    pub fn load(cfg: &DataConfig) -> Result<Self> {
        let (codes, splits) = match &cfg.dir {
            Some(dir) => {
                let load = |name: &str| load_corpus(&dir.join(name));
                let splits = [load(SPLIT_FILES[0])?, load(SPLIT_FILES[1])?, load(SPLIT_FILES[2])?];
                (code_list(splits.iter().flatten()), splits)
            }
            None => {
                let c = generate_synthetic(&cfg.synth)?;
                (c.codes, [c.train, c.val, c.test])
            }
        };
        if splits[0].is_empty() {
            return Err(Error::Data {
                line: 0,
                msg: "training split is empty".into(),
            });
        }
        let vocab = Vocab::build(splits[0].iter(), cfg.min_count, cfg.max_vocab);
        Ok(Self { codes, vocab, splits })
    }

    /// Model config with vocabulary size and class count taken from the corpus.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab.len(),
            classes: self.codes.len(),
            ..base.clone()
        }
    }

    pub fn dataset(&self, split: &str, max_len: usize) -> Result<Dataset> {
        let i = SPLITS
            .iter()
            .position(|s| *s == split)
            .ok_or_else(|| Error::Config(format!("unknown split `{split}`")))?;
        Ok(Dataset::new(self.codes.clone(), &self.splits[i], &self.vocab, max_len))
    }

    /// Fails when a checkpoint does not fit this corpus.
    pub fn check_model(&self, cfg: &ModelConfig) -> Result<()> {
        if cfg.vocab_size != self.vocab.len() || cfg.classes != self.codes.len() {
            return Err(Error::Data {
                line: 0,
                msg: format!(
                    "checkpoint expects {} tokens and {} codes, corpus gives {} and {}",
                    cfg.vocab_size,
                    cfg.classes,
                    self.vocab.len(),
                    self.codes.len()
                ),
            });
        }
        Ok(())
    }
}
