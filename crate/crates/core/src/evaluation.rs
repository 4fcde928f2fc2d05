//! Glue between a trained model, a tokenized dataset, attributions and the
//! metric suites.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::attribution::{explain, pair_seed, AttributionSettings, AttributionVector, Method};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{
    comprehensiveness, sufficiency, AnalyzedPair, ExplainedPair, FaithfulnessConfig, FaithfulnessReport,
    FaithfulnessRow,
};
use crate::model::{probabilities, ModelConfig, ModelParameters};

/// Gold classes of document `d` that keep at least one evidence token.
pub fn explained_classes(data: &Dataset, d: usize) -> Vec<usize> {
    (0..data.classes())
        .filter(|&j| data.evidence(d, j).is_some_and(|e| !e.tokens.is_empty()))
        .collect()
}

/// Attributions for every annotated (document, code) pair.
pub fn explain_dataset(
    params: &ModelParameters,
    config: &ModelConfig,
    data: &Dataset,
    method: Method,
    settings: &AttributionSettings,
    seed: u64,
) -> Result<Vec<AttributionVector>> {
    let per_doc: Vec<Vec<AttributionVector>> = data
        .docs
        .par_iter()
        .enumerate()
        .map(|(d, doc)| {
            let classes = explained_classes(data, d);
            if classes.is_empty() {
                return Ok(Vec::new());
            }
            let scores = explain(params, config, &doc.ids, &classes, method, settings, pair_seed(seed, d, 0))?;
            classes
                .into_iter()
                .zip(scores)
                .map(|(j, s)| {
                    let v = AttributionVector {
                        doc_id: doc.id.clone(),
                        code: data.codes[j].clone(),
                        method: method.name().to_string(),
                        seed,
                        scores: s,
                    };
                    v.validate()?;
                    Ok(v)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_doc.into_iter().flatten().collect())
}

/// Resolves attribution vectors against a dataset: `(doc index, class)`.
pub fn locate(data: &Dataset, vectors: &[AttributionVector]) -> Result<Vec<(usize, usize)>> {
    let by_id: HashMap<&str, usize> = data.docs.iter().enumerate().map(|(i, d)| (d.id.as_str(), i)).collect();
    vectors
        .iter()
        .map(|v| {
            let d = *by_id
                .get(v.doc_id.as_str())
                .ok_or_else(|| Error::Config(format!("attribution for unknown document `{}`", v.doc_id)))?;
            let j = data
                .class_index(&v.code)
                .ok_or_else(|| Error::Config(format!("attribution for unknown code `{}`", v.code)))?;
            if v.scores.len() != data.docs[d].len() {
                return Err(Error::ShapeMismatch {
                    op: "attribution",
                    lhs: vec![v.scores.len()],
                    rhs: vec![data.docs[d].len()],
                });
            }
            Ok((d, j))
        })
        .collect()
}

/// Explanations paired with their evidence; pairs without evidence are dropped.
pub fn evidence_pairs(data: &Dataset, vectors: &[AttributionVector]) -> Result<Vec<ExplainedPair>> {
    let at = locate(data, vectors)?;
    Ok(vectors
        .iter()
        .zip(at)
        .filter_map(|(v, (d, j))| {
            data.evidence(d, j)
                .filter(|e| !e.tokens.is_empty())
                .map(|e| ExplainedPair::new(&v.doc_id, v.scores.clone(), e))
        })
        .collect())
}

/// Evidence pairs with special-token flags and predicted probabilities
/// (`probs[d][j]`).
pub fn analyzed_pairs(data: &Dataset, vectors: &[AttributionVector], probs: &[Vec<f64>]) -> Result<Vec<AnalyzedPair>> {
    let at = locate(data, vectors)?;
    Ok(vectors
        .iter()
        .zip(at)
        .filter_map(|(v, (d, j))| {
            data.evidence(d, j).filter(|e| !e.tokens.is_empty()).map(|e| AnalyzedPair {
                pair: ExplainedPair::new(&v.doc_id, v.scores.clone(), e),
                special: data.docs[d].special.clone(),
                probability: probs[d][j],
            })
        })
        .collect())
}

/// Comprehensiveness and sufficiency of every explanation on the model.
pub fn faithfulness(
    params: &ModelParameters,
    config: &ModelConfig,
    data: &Dataset,
    vectors: &[AttributionVector],
    cfg: &FaithfulnessConfig,
) -> Result<FaithfulnessReport> {
    let at = locate(data, vectors)?;
    let rows = vectors
        .par_iter()
        .zip(at)
        .map(|(v, (d, j))| {
            let tokens = &data.docs[d].ids;
            let f = |t: &[usize]| Ok(probabilities(t, params, config)?[j]);
            Ok(FaithfulnessRow {
                doc_id: v.doc_id.clone(),
                code: v.code.clone(),
                comprehensiveness: comprehensiveness(tokens, &v.scores, cfg, f)?,
                sufficiency: sufficiency(tokens, &v.scores, cfg, f)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FaithfulnessReport::from_rows(rows))
}
