use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use xmc_core::attribution::{write_jsonl, AttributionVector};
use xmc_core::data::{generate_synthetic, Dataset, SynthConfig, Vocab};

const SMALL: &str = r#"{
  "data": {"synth": {"train_docs": 60, "val_docs": 20, "test_docs": 20, "codes": 3, "vocab_size": 120}},
  "model": {"vocab_size": 2000, "embed_dim": 8, "encoder_layers": 1, "heads": 2, "classes": 10, "max_len": 64, "dropout": 0.2},
  "train": {"epochs": 1},
  "attribution": {"methods": ["attention", "inputxgrad", "attingrad", "rand"]}
}"#;

fn xmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmc"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = xmc(args);
    assert!(
        out.status.success(),
        "xmc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn oracle_explainer_scores_perfect_f1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let synth: SynthConfig = serde_json::from_value(
        serde_json::from_str::<serde_json::Value>(SMALL).unwrap()["data"]["synth"].clone(),
    )
    .unwrap();
    let corpus = generate_synthetic(&synth).unwrap();
    let vocab = Vocab::build(corpus.train.iter(), 1, None);
    for (split, docs) in [("val", &corpus.val), ("test", &corpus.test)] {
        let data = Dataset::new(corpus.codes.clone(), docs, &vocab, 64);
        let mut vectors = Vec::new();
        for doc in &data.docs {
            for ev in doc.codes.iter().filter(|e| !e.tokens.is_empty()) {
                let mut scores = vec![0.0; doc.len()];
                for &i in &ev.tokens {
                    scores[i] = 1.0;
                }
                vectors.push(AttributionVector {
                    doc_id: doc.id.clone(),
                    code: ev.code.clone(),
                    method: "oracle".into(),
                    seed: 0,
                    scores,
                });
            }
        }
        assert!(!vectors.is_empty());
        let dir = out.join("attributions/seed0").join(split);
        fs::create_dir_all(&dir).unwrap();
        write_jsonl(&dir.join("oracle.jsonl"), &vectors).unwrap();
    }
    ok(&["evaluate", "--config", s(&cfg), "--out", s(&out), "--seed", "0"]);
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("seed,strategy,method,split,metric,value\n"));
    for metric in ["precision", "recall", "f1", "span_recall", "cover"] {
        let line = format!("0,baseline,oracle,test,{metric},1.0\n");
        assert!(csv.contains(&line), "missing `{line}` in\n{csv}");
    }
    assert!(csv.contains("0,baseline,oracle,test,empty,0.0\n"));
    assert!(out.join("analysis.json").exists());
}

#[test]
fn training_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        ok(&["train", "--config", s(&cfg), "--strategy", "baseline", "--seed", "7", "--out", s(out)]);
    }
    let ma = fs::read(a.join("model-seed7.xmc")).unwrap();
    assert_eq!(ma, fs::read(b.join("model-seed7.xmc")).unwrap());
    assert_eq!(
        fs::read(a.join("train-metrics.csv")).unwrap(),
        fs::read(b.join("train-metrics.csv")).unwrap()
    );
}

fn files_under(root: &Path) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    out
}

#[test]
fn pipeline_emits_every_declared_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("run");
    let o = s(&out);
    ok(&["synth", "--config", s(&cfg), "--out", &format!("{o}/corpus")]);
    ok(&["train", "--config", s(&cfg), "--seeds", "1,2", "--out", o]);
    ok(&["explain", "--config", s(&cfg), "--seeds", "1,2", "--out", o]);
    ok(&["evaluate", "--config", s(&cfg), "--seeds", "1,2", "--out", o]);
    ok(&["report", "--config", s(&cfg), "--seeds", "1,2", "--out", o, "--docs", "3"]);

    let mut referenced = Vec::new();
    for command in ["train", "explain", "evaluate", "report"] {
        let m: serde_json::Value =
            serde_json::from_slice(&fs::read(out.join(format!("{command}.manifest.json"))).unwrap()).unwrap();
        assert_eq!(m["seeds"], serde_json::json!([1, 2]));
        assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
        for a in m["artifacts"].as_array().unwrap() {
            referenced.push(a["path"].as_str().unwrap().to_string());
        }
    }
    let unique: BTreeSet<String> = referenced.iter().cloned().collect();
    assert_eq!(unique.len(), referenced.len(), "an artifact is listed twice");
    let mut on_disk = files_under(&out);
    on_disk.retain(|f| !f.starts_with("corpus/") && !f.ends_with(".manifest.json"));
    assert_eq!(on_disk, unique);

    for f in ["model-seed1.xmc", "train-log-seed2.jsonl", "vocab.txt", "metrics.csv", "analysis.json", "report/index.html"] {
        assert!(unique.contains(f), "{f} not produced");
    }
    for split in ["val", "test"] {
        for m in ["attention", "inputxgrad", "attingrad", "rand"] {
            assert!(unique.contains(&format!("attributions/seed2/{split}/{m}.jsonl")));
        }
    }
    let train = fs::read_to_string(out.join("train-metrics.csv")).unwrap();
    assert!(train.contains("\nmean,baseline,model,test,micro_f1,"));
    assert!(train.contains("\nstd,baseline,model,test,micro_f1,"));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    for m in ["comprehensiveness", "sufficiency", "zeroed_f1", "entropy", "special_top5"] {
        assert!(metrics.contains(&format!(",attingrad,test,{m},")), "{m} missing");
    }
    let index = fs::read_to_string(out.join("report/index.html")).unwrap();
    assert!(index.contains("&plusmn;"));
    let doc = unique.iter().find(|f| f.starts_with("report/doc-")).unwrap();
    let page = fs::read_to_string(out.join(doc)).unwrap();
    assert!(page.contains("class=\"tok ev\""));

    let corpus = files_under(&out.join("corpus"));
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "manifest.json", "synth.config.json"] {
        assert!(corpus.contains(f));
    }
}

fn code(args: &[&str]) -> (i32, String) {
    let o = xmc(args);
    (o.status.code().unwrap(), String::from_utf8_lossy(&o.stderr).into_owned())
}

#[test]
fn failures_map_to_exit_codes_and_clean_up() {
    let tmp = tempfile::tempdir().unwrap();

    let bad = write_config(tmp.path(), r#"{"train": {"epochs": 1, "lr": 0.1}}"#);
    let out = tmp.path().join("bad");
    let (c, err) = code(&["train", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(c, 2);
    assert!(err.starts_with("error code=2 kind=config:"), "{err}");
    assert_eq!(err.lines().count(), 1);

    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("missing");
    let (c, err) = code(&["evaluate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(c, 3, "{err}");
    assert!(err.starts_with("error code=3 kind=data:"));
    assert!(!out.exists(), "partial outputs left behind");

    let data = tmp.path().join("data");
    fs::create_dir_all(&data).unwrap();
    for f in ["train.jsonl", "val.jsonl", "test.jsonl"] {
        fs::write(data.join(f), "{\"id\": \"d\", \"text\": \"ab\", \"codes\": [}\n").unwrap();
    }
    let dcfg = write_config(
        tmp.path(),
        &format!(r#"{{"data": {{"dir": "{}"}}, "train": {{"epochs": 1}}}}"#, s(&data)),
    );
    let (c, err) = code(&["train", "--config", s(&dcfg), "--out", s(&tmp.path().join("d"))]);
    assert_eq!(c, 3, "{err}");

    let ncfg = write_config(
        tmp.path(),
        &SMALL.replace(r#""train": {"epochs": 1}"#, r#""train": {"epochs": 1, "learning_rate": 1e300}"#),
    );
    let out = tmp.path().join("nan");
    let (c, err) = code(&["train", "--config", s(&ncfg), "--out", s(&out)]);
    assert_eq!(c, 4, "{err}");
    assert!(err.starts_with("error code=4 kind=numeric:"));
    assert!(!out.exists());
}
