use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use xmc_core::attribution::{read_jsonl, write_jsonl, AttributionVector};
use xmc_core::data::{generate_synthetic, Dataset, SPLIT_FILES};
use xmc_core::evaluation::{analyzed_pairs, evidence_pairs, explain_dataset, faithfulness};
use xmc_core::metrics::{
    analysis_suite, pearson, plausibility, prediction_metrics, tune_code_threshold, tune_threshold, AnalysisReport,
    PlausibilityReport,
};
use xmc_core::model::{self, ModelConfig, ModelParameters};
use xmc_core::training::{predict_all, train_run, Strategy};
use xmc_core::{Error, Result};

use crate::config::{Corpus, RunConfig};
use crate::manifest::Outputs;
use crate::table::{aggregate, write_rows, MetricRow};
use crate::CommonArgs;

/// A resolved invocation: configuration, output root and seeds.
pub struct Run {
    pub cfg: RunConfig,
    pub raw: Option<Value>,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
}

impl Run {
    pub fn new(a: &CommonArgs) -> Result<Self> {
        let (mut cfg, raw) = match &a.config {
            Some(p) => {
                let (c, r) = RunConfig::load(p)?;
                (c, Some(r))
            }
            None => (RunConfig::default(), None),
        };
        if let Some(s) = a.strategy {
            cfg.set_strategy(s, raw.as_ref());
        }
        if let Some(s) = a.seed {
            cfg.train.seed = s;
        }
        if let Some(out) = &a.out {
            cfg.output = out.clone();
        }
        if let Some(m) = a.methods()? {
            cfg.attribution.methods = m;
        }
        cfg.validate()?;
        let seeds = a.seeds.clone().unwrap_or_else(|| vec![cfg.train.seed]);
        if seeds.is_empty() {
            return Err(Error::Config("no seeds given".into()));
        }
        Ok(Self {
            out: cfg.output.clone(),
            cfg,
            raw,
            seeds,
        })
    }

    /// Runs `body` with tracked outputs; on failure every output is removed.
    fn execute(&self, command: &str, body: impl FnOnce(&mut Outputs) -> Result<()>) -> Result<()> {
        let mut o = Outputs::new(&self.out)?;
        let result = (|| {
            let p = o.file(&format!("{command}.config.json"), "config")?;
            std::fs::write(p, serde_json::to_vec_pretty(&self.cfg)?)?;
            body(&mut o)
        })();
        match result {
            Ok(()) => {
                o.finish(command, &self.cfg.hash(), &self.seeds)?;
                Ok(())
            }
            Err(e) => {
                o.abort();
                Err(e)
            }
        }
    }

    fn strategy(&self) -> &'static str {
        self.cfg.train.strategy.name()
    }
}

/// `file`, or `dir/{prefix}-seed{seed}.xmc` when `path` is a directory.
pub fn model_path(path: &Path, prefix: &str, seed: u64) -> PathBuf {
    if path.is_dir() {
        path.join(format!("{prefix}-seed{seed}.xmc"))
    } else {
        path.to_path_buf()
    }
}

fn load_checked(path: &Path, corpus: &Corpus) -> Result<(ModelConfig, ModelParameters)> {
    let (c, p) = model::io::load(path)?;
    corpus.check_model(&c)?;
    Ok((c, p))
}

fn labels(data: &Dataset) -> Vec<Vec<f64>> {
    (0..data.len()).map(|d| data.labels(d)).collect()
}

pub fn synth(a: &CommonArgs) -> Result<()> {
    let mut run = Run::new(a)?;
    if let Some(s) = a.seed {
        run.cfg.data.synth.seed = s;
        run.seeds = vec![s];
    } else {
        run.seeds = vec![run.cfg.data.synth.seed];
    }
    let synth = run.cfg.data.synth.clone();
    run.execute("synth", |o| {
        let corpus = generate_synthetic(&synth)?;
        for f in SPLIT_FILES.iter().chain(&["manifest.json"]) {
            o.file(f, "corpus")?;
        }
        corpus.write(o.root(), &synth)?;
        o.lap("synth");
        Ok(())
    })
}

pub fn train(a: &CommonArgs) -> Result<()> {
    let run = Run::new(a)?;
    run.execute("train", |o| {
        let corpus = Corpus::load(&run.cfg.data)?;
        let mcfg = corpus.model_config(&run.cfg.model);
        let max_len = mcfg.max_len;
        let (train, val, test) = (
            corpus.dataset("train", max_len)?,
            corpus.dataset("val", max_len)?,
            corpus.dataset("test", max_len)?,
        );
        corpus.vocab.save(&o.file("vocab.txt", "vocab")?)?;
        o.lap("data");
        let strategy = run.strategy();
        let mut rows = Vec::new();
        for &seed in &run.seeds {
            let mut tc = run.cfg.train.clone();
            tc.seed = seed;
            let init = if tc.strategy == Strategy::Tm {
                Some(match &a.model {
                    Some(p) => load_checked(&model_path(p, "model", seed), &corpus)?.1,
                    None => {
                        let mut base = run.cfg.clone();
                        base.set_strategy(Strategy::Baseline, run.raw.as_ref());
                        base.train.seed = seed;
                        let log = o.file(&format!("baseline-train-log-seed{seed}.jsonl"), "train-log")?;
                        let mut w = BufWriter::new(File::create(log)?);
                        let outcome = train_run(&train, Some(&val), &mcfg, &base.train, None, Some(&mut w))?;
                        model::io::save(
                            &o.file(&format!("baseline-seed{seed}.xmc"), "checkpoint")?,
                            &mcfg,
                            &outcome.params,
                        )?;
                        outcome.params
                    }
                })
            } else {
                None
            };
            let log = o.file(&format!("train-log-seed{seed}.jsonl"), "train-log")?;
            let mut w = BufWriter::new(File::create(log)?);
            let outcome = train_run(&train, Some(&val), &mcfg, &tc, init.as_ref(), Some(&mut w))?;
            model::io::save(&o.file(&format!("model-seed{seed}.xmc"), "checkpoint")?, &mcfg, &outcome.params)?;
            o.lap(&format!("train-seed{seed}"));

            let threshold = tune_code_threshold(&predict_all(&outcome.params, &mcfg, &val)?, &labels(&val));
            let report = prediction_metrics(&predict_all(&outcome.params, &mcfg, &test)?, &labels(&test), threshold);
            let row = |split: &str, metric: &str, v: f64| MetricRow::new(seed, strategy, "model", split, metric, v);
            rows.push(row("val", "code_threshold", threshold));
            rows.push(row("test", "micro_f1", report.micro_f1));
            rows.push(row("test", "macro_f1", report.macro_f1));
            rows.push(row("test", "map", report.map));
            if tc.strategy == Strategy::Pgd {
                rows.push(row("train", "pgd_max_abs_delta", outcome.pgd.max_abs_delta));
                rows.push(row("train", "pgd_violations", outcome.pgd.violations as f64));
            }
            if let Some(f) = outcome.tm_masked_fraction {
                rows.push(row("train", "tm_masked_fraction", f));
            }
            log::info!("seed {seed}: test micro-F1 {:.4}", report.micro_f1);
        }
        if run.seeds.len() > 1 {
            rows.extend(aggregate(&rows));
        }
        write_rows(&o.file("train-metrics.csv", "metrics")?, &rows)?;
        Ok(())
    })
}

pub fn explain(a: &CommonArgs) -> Result<()> {
    let run = Run::new(a)?;
    let model_root = a.model.clone().unwrap_or_else(|| run.out.clone());
    run.execute("explain", |o| {
        let corpus = Corpus::load(&run.cfg.data)?;
        let settings = run.cfg.attribution.settings();
        for &seed in &run.seeds {
            let (mcfg, params) = load_checked(&model_path(&model_root, "model", seed), &corpus)?;
            for split in ["val", "test"] {
                let data = corpus.dataset(split, mcfg.max_len)?;
                for &method in &run.cfg.attribution.methods {
                    let vectors = explain_dataset(&params, &mcfg, &data, method, &settings, seed)?;
                    let rel = format!("attributions/seed{seed}/{split}/{}.jsonl", method.name());
                    write_jsonl(&o.file(&rel, "attributions")?, &vectors)?;
                    o.lap(&format!("explain-{}", method.name()));
                }
            }
        }
        Ok(())
    })
}

/// Method names to evaluate: explicit `--method` values, else every
/// attribution file found for the first seed.
fn method_names(a: &CommonArgs, dir: &Path) -> Result<Vec<String>> {
    if !a.method.is_empty() {
        return Ok(a.method.clone());
    }
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::Data {
            line: 0,
            msg: format!("{}: {e}", dir.display()),
        })?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension()? == "jsonl").then(|| p.file_stem()?.to_str().map(str::to_string))?
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Data {
            line: 0,
            msg: format!("no attribution files in {}", dir.display()),
        });
    }
    Ok(names)
}

fn read_vectors(path: &Path) -> Result<Vec<AttributionVector>> {
    if !path.exists() {
        return Err(Error::Data {
            line: 0,
            msg: format!("missing attribution file {}", path.display()),
        });
    }
    read_jsonl(path)
}

fn strip_rows(mut r: PlausibilityReport) -> PlausibilityReport {
    r.rows.clear();
    r
}

fn stripped(mut a: AnalysisReport) -> AnalysisReport {
    a.plausibility = strip_rows(a.plausibility);
    a.zeroed = strip_rows(a.zeroed);
    a.true_positive = strip_rows(a.true_positive);
    a.false_negative = strip_rows(a.false_negative);
    a
}

pub fn evaluate(a: &CommonArgs) -> Result<()> {
    let run = Run::new(a)?;
    let attr_dir = a.attributions.clone().unwrap_or_else(|| run.out.join("attributions"));
    let model_root = a.model.clone().unwrap_or_else(|| run.out.clone());
    run.execute("evaluate", |o| {
        let corpus = Corpus::load(&run.cfg.data)?;
        let methods = method_names(a, &attr_dir.join(format!("seed{}", run.seeds[0])).join("test"))?;
        let fm = run
            .cfg
            .metrics
            .faithfulness_methods
            .as_ref()
            .map(|v| v.iter().map(|m| m.name().to_string()).collect::<Vec<_>>());
        let strategy = run.strategy();
        let mut rows = Vec::new();
        let mut per_method: Vec<(String, Vec<Value>)> = methods.iter().map(|m| (m.clone(), Vec::new())).collect();
        let mut special = vec![Vec::new(); methods.len()];
        let mut f1s = vec![Vec::new(); methods.len()];
        let mut comps = vec![Vec::new(); methods.len()];
        for &seed in &run.seeds {
            let path = model_path(&model_root, "model", seed);
            let model = if a.model.is_some() || path.exists() {
                Some(load_checked(&path, &corpus)?)
            } else {
                log::warn!("no checkpoint at {}; model-based metrics skipped", path.display());
                None
            };
            let max_len = model.as_ref().map_or(run.cfg.model.max_len, |(c, _)| c.max_len);
            let (val, test) = (corpus.dataset("val", max_len)?, corpus.dataset("test", max_len)?);
            let mut code_threshold = None;
            let mut test_probs = None;
            if let Some((mcfg, params)) = &model {
                let t = tune_code_threshold(&predict_all(params, mcfg, &val)?, &labels(&val));
                let probs = predict_all(params, mcfg, &test)?;
                let r = prediction_metrics(&probs, &labels(&test), t);
                let row = |split: &str, metric: &str, v: f64| MetricRow::new(seed, strategy, "model", split, metric, v);
                rows.push(row("val", "code_threshold", t));
                rows.push(row("test", "micro_f1", r.micro_f1));
                rows.push(row("test", "macro_f1", r.macro_f1));
                rows.push(row("test", "map", r.map));
                code_threshold = Some(t);
                test_probs = Some(probs);
                o.lap("prediction");
            }
            for (mi, method) in methods.iter().enumerate() {
                let seed_dir = attr_dir.join(format!("seed{seed}"));
                let vectors = read_vectors(&seed_dir.join("test").join(format!("{method}.jsonl")))?;
                let pairs = evidence_pairs(&test, &vectors)?;
                let mut pcfg = run.cfg.metrics.plausibility.clone();
                let val_path = seed_dir.join("val").join(format!("{method}.jsonl"));
                if run.cfg.metrics.tune_threshold {
                    if val_path.exists() {
                        let val_pairs = evidence_pairs(&val, &read_jsonl(&val_path)?)?;
                        pcfg.threshold = tune_threshold(&val_pairs, pcfg.normalization)?;
                    } else {
                        log::warn!("no validation attributions for `{method}`; using threshold {}", pcfg.threshold);
                    }
                }
                let row = |split: &str, metric: &str, v: f64| MetricRow::new(seed, strategy, method, split, metric, v);
                rows.push(row("val", "threshold", pcfg.threshold));
                let report = plausibility(&pairs, &pcfg)?;
                for (name, v) in report.metrics() {
                    rows.push(row("test", name, v));
                }
                f1s[mi].push(report.f1);
                let probs = test_probs.clone().unwrap_or_else(|| vec![vec![1.0; test.classes()]; test.len()]);
                let analysis = analysis_suite(&analyzed_pairs(&test, &vectors, &probs)?, &pcfg, code_threshold.unwrap_or(0.5))?;
                rows.push(row("test", "entropy", analysis.entropy));
                rows.push(row("test", "special_top5", analysis.special_top5));
                for (name, v) in analysis.zeroed.metrics() {
                    rows.push(row("test", &format!("zeroed_{name}"), v));
                }
                special[mi].push(analysis.special_top5);
                let mut faith = Value::Null;
                if let Some((mcfg, params)) = &model {
                    if fm.as_ref().is_none_or(|f| f.contains(method)) {
                        let fr = faithfulness(params, mcfg, &test, &vectors, &run.cfg.metrics.faithfulness)?;
                        rows.push(row("test", "comprehensiveness", fr.comprehensiveness));
                        rows.push(row("test", "sufficiency", fr.sufficiency));
                        comps[mi].push(fr.comprehensiveness);
                        faith = json!({
                            "comprehensiveness": fr.comprehensiveness,
                            "sufficiency": fr.sufficiency,
                            "evaluated": fr.evaluated,
                            "skipped": fr.skipped,
                        });
                    }
                }
                let deltas: serde_json::Map<String, Value> =
                    analysis.zeroing_deltas().into_iter().map(|(n, d)| (n.to_string(), json!(d))).collect();
                let model_based = model.is_some();
                per_method[mi].1.push(json!({
                    "seed": seed,
                    "threshold": pcfg.threshold,
                    "code_threshold": code_threshold,
                    "tp_fn_split": model_based,
                    "analysis": stripped(analysis),
                    "zeroing_deltas": deltas,
                    "faithfulness": faith,
                }));
                o.lap(&format!("evaluate-{method}"));
            }
        }
        if run.seeds.len() > 1 {
            rows.extend(aggregate(&rows));
        }
        write_rows(&o.file("metrics.csv", "metrics")?, &rows)?;
        let mut report = serde_json::Map::new();
        for (mi, (method, seeds)) in per_method.into_iter().enumerate() {
            let comp = (comps[mi].len() == special[mi].len()).then(|| pearson(&special[mi], &comps[mi])).flatten();
            report.insert(
                method,
                json!({
                    "seeds": seeds,
                    "pearson_special_top5_f1": pearson(&special[mi], &f1s[mi]),
                    "pearson_special_top5_comprehensiveness": comp,
                }),
            );
        }
        let p = o.file("analysis.json", "analysis")?;
        std::fs::write(p, serde_json::to_vec_pretty(&Value::Object(report))?)?;
        Ok(())
    })
}

pub fn report(a: &CommonArgs) -> Result<()> {
    let run = Run::new(a)?;
    let attr_dir = a.attributions.clone().unwrap_or_else(|| run.out.join("attributions"));
    run.execute("report", |o| {
        let corpus = Corpus::load(&run.cfg.data)?;
        let seed = run.seeds[0];
        let dir = attr_dir.join(format!("seed{seed}")).join("test");
        let methods = method_names(a, &dir)?;
        let mut attributions = Vec::new();
        for m in &methods {
            attributions.push((m.clone(), read_vectors(&dir.join(format!("{m}.jsonl")))?));
        }
        let test = corpus.dataset("test", run.cfg.model.max_len)?;
        let metrics_path = run.out.join("metrics.csv");
        let rows = if metrics_path.exists() {
            crate::table::read_rows(&metrics_path)?
        } else {
            log::warn!("{} not found; summary tables left empty", metrics_path.display());
            Vec::new()
        };
        crate::report::write(o, &test, &attributions, &rows, a.docs)?;
        o.lap("report");
        Ok(())
    })
}
