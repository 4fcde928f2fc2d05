use serde::{Deserialize, Serialize};

use super::plausibility::{plausibility, top_k, ExplainedPair, PlausibilityConfig, PlausibilityReport};
use crate::error::{Error, Result};

/// Entropy of `scores / Σ scores` divided by `ln N`. `None` for an all-zero
/// vector. A single token has entropy 0.
pub fn normalized_entropy(scores: &[f64]) -> Option<f64> {
    let total: f64 = scores.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    if scores.len() < 2 {
        return Some(0.0);
    }
    if scores.iter().all(|&s| s == scores[0]) {
        return Some(1.0);
    }
    let h: f64 = scores
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    Some((h / (scores.len() as f64).ln()).clamp(0.0, 1.0))
}

/// Fraction of the `k` top-scored tokens that are special.
pub fn special_top_k_fraction(scores: &[f64], special: &[bool], k: usize) -> f64 {
    let top = top_k(scores, k);
    if top.is_empty() {
        return 0.0;
    }
    top.iter().filter(|&&i| special[i]).count() as f64 / top.len() as f64
}

/// Copy of `scores` with special-token entries set to zero.
pub fn zero_special(scores: &[f64], special: &[bool]) -> Vec<f64> {
    scores
        .iter()
        .zip(special)
        .map(|(&s, &sp)| if sp { 0.0 } else { s })
        .collect()
}

/// Pearson correlation; `None` with fewer than three points or no spread.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some((cov / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

/// An explanation with the facts the analyses need.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyzedPair {
    pub pair: ExplainedPair,
    pub special: Vec<bool>,
    /// Predicted probability of the explained code.
    pub probability: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    /// Mean normalized entropy over non-zero explanations.
    pub entropy: f64,
    pub all_zero: usize,
    /// Mean fraction of special tokens among the top five.
    pub special_top5: f64,
    pub plausibility: PlausibilityReport,
    pub zeroed: PlausibilityReport,
    pub true_positive: PlausibilityReport,
    pub false_negative: PlausibilityReport,
    pub true_positive_pairs: usize,
    pub false_negative_pairs: usize,
}

impl AnalysisReport {
    /// `zeroed - plausibility` per metric.
    pub fn zeroing_deltas(&self) -> Vec<(&'static str, f64)> {
        self.plausibility
            .metrics()
            .iter()
            .zip(self.zeroed.metrics())
            .map(|((n, a), (_, b))| (*n, b - a))
            .collect()
    }
}

/// Entropy, special-token share, metrics after special-token zeroing and
/// the split by whether the code was predicted at `code_threshold`.
pub fn analysis_suite(
    pairs: &[AnalyzedPair],
    cfg: &PlausibilityConfig,
    code_threshold: f64,
) -> Result<AnalysisReport> {
    if let Some(p) = pairs.iter().find(|p| p.special.len() != p.pair.scores.len()) {
        return Err(Error::ShapeMismatch {
            op: "analysis_suite",
            lhs: vec![p.pair.scores.len()],
            rhs: vec![p.special.len()],
        });
    }
    let entropies: Vec<f64> = pairs.iter().filter_map(|p| normalized_entropy(&p.pair.scores)).collect();
    let all_zero = pairs.len() - entropies.len();
    if all_zero > 0 {
        log::warn!("{all_zero} all-zero explanations excluded from the entropy mean");
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let special: Vec<f64> = pairs
        .iter()
        .map(|p| special_top_k_fraction(&p.pair.scores, &p.special, 5))
        .collect();
    let base: Vec<ExplainedPair> = pairs.iter().map(|p| p.pair.clone()).collect();
    let zeroed: Vec<ExplainedPair> = pairs
        .iter()
        .map(|p| ExplainedPair {
            scores: zero_special(&p.pair.scores, &p.special),
            ..p.pair.clone()
        })
        .collect();
    let (tp, fneg): (Vec<&AnalyzedPair>, Vec<&AnalyzedPair>) =
        pairs.iter().partition(|p| p.probability >= code_threshold);
    let sub = |s: &[&AnalyzedPair]| -> Result<PlausibilityReport> {
        if s.is_empty() {
            return Ok(PlausibilityReport::default());
        }
        let v: Vec<ExplainedPair> = s.iter().map(|p| p.pair.clone()).collect();
        plausibility(&v, cfg)
    };
    Ok(AnalysisReport {
        entropy: mean(&entropies),
        all_zero,
        special_top5: mean(&special),
        plausibility: plausibility(&base, cfg)?,
        zeroed: plausibility(&zeroed, cfg)?,
        true_positive: sub(&tp)?,
        false_negative: sub(&fneg)?,
        true_positive_pairs: tp.len(),
        false_negative_pairs: fneg.len(),
    })
}
