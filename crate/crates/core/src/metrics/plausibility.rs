use serde::{Deserialize, Serialize};

use crate::data::CodeEvidence;
use crate::error::{Error, Result};

/// Per-(document, code) rescaling applied before thresholding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Divide by the vector sum.
    #[default]
    Sum,
    /// Divide by the vector maximum.
    Max,
    /// Use raw scores.
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    #[default]
    Micro,
    Macro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlausibilityConfig {
    pub threshold: f64,
    pub k_rank: usize,
    pub normalization: Normalization,
    pub averaging: Averaging,
}

impl Default for PlausibilityConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            k_rank: 5,
            normalization: Normalization::Sum,
            averaging: Averaging::Micro,
        }
    }
}

impl PlausibilityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must lie in [0, 1], got {}", self.threshold)));
        }
        if self.k_rank == 0 {
            return Err(Error::Config("k_rank must be at least 1".into()));
        }
        Ok(())
    }
}

/// Scores of one explanation with its annotated evidence tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainedPair {
    pub doc_id: String,
    pub code: String,
    pub scores: Vec<f64>,
    /// Evidence token indices, ascending and unique.
    pub evidence: Vec<usize>,
    /// Token indices of each annotated span.
    pub spans: Vec<Vec<usize>>,
}

impl ExplainedPair {
    pub fn new(doc_id: &str, scores: Vec<f64>, evidence: &CodeEvidence) -> Self {
        Self {
            doc_id: doc_id.to_string(),
            code: evidence.code.clone(),
            scores,
            evidence: evidence.tokens.clone(),
            spans: evidence.spans.clone(),
        }
    }

    pub fn check(&self) -> Result<()> {
        let len = self.scores.len();
        if let Some(&index) = self.evidence.iter().chain(self.spans.iter().flatten()).find(|&&i| i >= len) {
            return Err(Error::EvidenceOutOfRange {
                doc: self.doc_id.clone(),
                code: self.code.clone(),
                index,
                len,
            });
        }
        if let Some(v) = self.scores.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Numeric(format!(
                "attribution for {}/{} has invalid score {v}",
                self.doc_id, self.code
            )));
        }
        Ok(())
    }

    fn is_evidence(&self) -> Vec<bool> {
        let mut m = vec![false; self.scores.len()];
        for &i in &self.evidence {
            m[i] = true;
        }
        m
    }
}

pub fn normalize(scores: &[f64], mode: Normalization) -> Vec<f64> {
    let d = match mode {
        Normalization::None => 1.0,
        Normalization::Sum => scores.iter().sum(),
        Normalization::Max => scores.iter().copied().fold(0.0, f64::max),
    };
    if d > 0.0 {
        scores.iter().map(|s| s / d).collect()
    } else {
        scores.to_vec()
    }
}

fn check_all(pairs: &[ExplainedPair]) -> Result<()> {
    pairs.iter().try_for_each(ExplainedPair::check)
}

/// Normalized scores with their evidence labels, pooled over all pairs.
fn pooled(pairs: &[ExplainedPair], mode: Normalization) -> Vec<(f64, bool)> {
    pairs
        .iter()
        .flat_map(|p| normalize(&p.scores, mode).into_iter().zip(p.is_evidence()))
        .collect()
}

fn f1_of(tp: usize, predicted: usize, gold: usize) -> f64 {
    if predicted + gold == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (predicted + gold) as f64
    }
}

/// Decision boundary maximizing pooled token micro-F1 over every distinct
/// normalized score plus `{0, 1}`; ties go to the smaller value.
pub fn tune_threshold(pairs: &[ExplainedPair], mode: Normalization) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Config("threshold tuning needs at least one explanation".into()));
    }
    check_all(pairs)?;
    let mut pool = pooled(pairs, mode);
    if pool.iter().all(|(s, _)| *s == 0.0) {
        log::warn!("all attribution scores are zero; using threshold 1");
        return Ok(1.0);
    }
    let gold = pool.iter().filter(|(_, e)| *e).count();
    pool.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut candidates: Vec<f64> = pool.iter().map(|(s, _)| *s).chain([0.0, 1.0]).collect();
    candidates.sort_by(|a, b| b.total_cmp(a));
    candidates.dedup();
    let (mut at, mut predicted, mut tp) = (0, 0, 0);
    let mut best = (f64::NEG_INFINITY, 1.0);
    for c in candidates {
        while at < pool.len() && pool[at].0 >= c {
            predicted += 1;
            tp += pool[at].1 as usize;
            at += 1;
        }
        let f = f1_of(tp, predicted, gold);
        if f >= best.0 {
            best = (f, c);
        }
    }
    Ok(best.1)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub doc_id: String,
    pub code: String,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
    pub spans_hit: usize,
    pub spans: usize,
    pub precision_at_k: f64,
    pub recall_at_k: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub empty: f64,
    pub span_recall: f64,
    pub cover: f64,
}

/// Token-level P/R/F1 with the empty-explanation rate, span recall and
/// span coverage at boundary `cfg.threshold`.
pub fn classification_metrics(pairs: &[ExplainedPair], cfg: &PlausibilityConfig) -> Result<ClassificationMetrics> {
    check_all(pairs)?;
    let (mut tp, mut pred, mut gold, mut empty) = (0usize, 0usize, 0usize, 0usize);
    let (mut spans, mut hit_spans, mut cover_sum) = (0usize, 0usize, 0.0);
    let (mut p_sum, mut r_sum) = (0.0, 0.0);
    for p in pairs {
        let on: Vec<bool> = normalize(&p.scores, cfg.normalization)
            .iter()
            .map(|&s| s >= cfg.threshold)
            .collect();
        let ev = p.is_evidence();
        let t = on.iter().zip(&ev).filter(|(a, b)| **a && **b).count();
        let k = on.iter().filter(|a| **a).count();
        tp += t;
        pred += k;
        gold += p.evidence.len();
        empty += (k == 0) as usize;
        p_sum += if k > 0 { t as f64 / k as f64 } else { 0.0 };
        r_sum += if p.evidence.is_empty() { 0.0 } else { t as f64 / p.evidence.len() as f64 };
        for s in &p.spans {
            spans += 1;
            let h = s.iter().filter(|&&i| on[i]).count();
            if h > 0 {
                hit_spans += 1;
                cover_sum += h as f64 / s.len() as f64;
            }
        }
    }
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    let (precision, recall) = match cfg.averaging {
        Averaging::Micro => (ratio(tp as f64, pred as f64), ratio(tp as f64, gold as f64)),
        Averaging::Macro => (ratio(p_sum, pairs.len() as f64), ratio(r_sum, pairs.len() as f64)),
    };
    Ok(ClassificationMetrics {
        precision,
        recall,
        f1: ratio(2.0 * precision * recall, precision + recall),
        empty: ratio(empty as f64, pairs.len() as f64),
        span_recall: ratio(hit_spans as f64, spans as f64),
        cover: ratio(cover_sum, hit_spans as f64),
    })
}

/// Area under the pooled precision-recall curve, trapezoidal over every
/// distinct normalized score, starting at recall 0 with the precision of
/// the highest threshold.
pub fn auprc(pairs: &[ExplainedPair], mode: Normalization) -> Result<f64> {
    check_all(pairs)?;
    let mut pool = pooled(pairs, mode);
    let gold = pool.iter().filter(|(_, e)| *e).count();
    if gold == 0 {
        log::warn!("no evidence tokens; AUPRC undefined, reporting 0");
        return Ok(0.0);
    }
    pool.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut i) = (0usize, 0usize);
    let mut curve: Vec<(f64, f64)> = Vec::new();
    while i < pool.len() {
        let s = pool[i].0;
        while i < pool.len() && pool[i].0 == s {
            tp += pool[i].1 as usize;
            i += 1;
        }
        curve.push((tp as f64 / gold as f64, tp as f64 / i as f64));
    }
    let mut area = 0.0;
    let mut prev = (0.0, curve[0].1);
    for &(r, p) in &curve {
        area += (r - prev.0) * (p + prev.1) / 2.0;
        prev = (r, p);
    }
    Ok(area)
}

/// Indices of the `k` highest scores, ties broken by lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub precision_at_k: f64,
    pub recall_at_k: f64,
    pub iou: f64,
}

fn ranking_row(p: &ExplainedPair, k: usize) -> (f64, f64, f64) {
    let top = top_k(&p.scores, k);
    let ev = p.is_evidence();
    let hits = top.iter().filter(|&&i| ev[i]).count();
    let union = top.len() + p.evidence.len() - hits;
    let r = if p.evidence.is_empty() { 0.0 } else { hits as f64 / p.evidence.len() as f64 };
    let iou = if union == 0 { 0.0 } else { hits as f64 / union as f64 };
    (hits as f64 / k as f64, r, iou)
}

/// Mean P@K, R@K and top-K IOU over pairs.
pub fn ranking_metrics(pairs: &[ExplainedPair], k: usize) -> Result<RankingMetrics> {
    check_all(pairs)?;
    if k == 0 {
        return Err(Error::Config("k_rank must be at least 1".into()));
    }
    if pairs.is_empty() {
        return Ok(RankingMetrics::default());
    }
    let mut m = RankingMetrics::default();
    for p in pairs {
        let (a, b, c) = ranking_row(p, k);
        m.precision_at_k += a;
        m.recall_at_k += b;
        m.iou += c;
    }
    let n = pairs.len() as f64;
    m.precision_at_k /= n;
    m.recall_at_k /= n;
    m.iou /= n;
    Ok(m)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auprc: f64,
    pub empty: f64,
    pub span_recall: f64,
    pub cover: f64,
    pub iou: f64,
    pub precision_at_k: f64,
    pub recall_at_k: f64,
    pub pairs: usize,
    pub rows: Vec<PairRow>,
}

impl PlausibilityReport {
    /// `(name, value)` for every aggregate metric in a fixed order.
    pub fn metrics(&self) -> [(&'static str, f64); 10] {
        [
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("auprc", self.auprc),
            ("empty", self.empty),
            ("span_recall", self.span_recall),
            ("cover", self.cover),
            ("iou", self.iou),
            ("precision_at_k", self.precision_at_k),
            ("recall_at_k", self.recall_at_k),
        ]
    }
}

/// All plausibility metrics at a fixed boundary.
pub fn plausibility(pairs: &[ExplainedPair], cfg: &PlausibilityConfig) -> Result<PlausibilityReport> {
    cfg.validate()?;
    let c = classification_metrics(pairs, cfg)?;
    let r = ranking_metrics(pairs, cfg.k_rank)?;
    let rows = pairs
        .iter()
        .map(|p| {
            let on: Vec<bool> = normalize(&p.scores, cfg.normalization)
                .iter()
                .map(|&s| s >= cfg.threshold)
                .collect();
            let (pk, rk, iou) = ranking_row(p, cfg.k_rank);
            PairRow {
                doc_id: p.doc_id.clone(),
                code: p.code.clone(),
                true_positives: p.evidence.iter().filter(|&&i| on[i]).count(),
                predicted: on.iter().filter(|a| **a).count(),
                gold: p.evidence.len(),
                spans_hit: p.spans.iter().filter(|s| s.iter().any(|&i| on[i])).count(),
                spans: p.spans.len(),
                precision_at_k: pk,
                recall_at_k: rk,
                iou,
            }
        })
        .collect();
    Ok(PlausibilityReport {
        precision: c.precision,
        recall: c.recall,
        f1: c.f1,
        auprc: auprc(pairs, cfg.normalization)?,
        empty: c.empty,
        span_recall: c.span_recall,
        cover: c.cover,
        iou: r.iou,
        precision_at_k: r.precision_at_k,
        recall_at_k: r.recall_at_k,
        pairs: pairs.len(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(scores: &[f64], evidence: &[usize], spans: &[&[usize]]) -> ExplainedPair {
        ExplainedPair {
            doc_id: "d".into(),
            code: "c".into(),
            scores: scores.to_vec(),
            evidence: evidence.to_vec(),
            spans: spans.iter().map(|s| s.to_vec()).collect(),
        }
    }

    fn cfg(threshold: f64, normalization: Normalization) -> PlausibilityConfig {
        PlausibilityConfig {
            threshold,
            normalization,
            ..Default::default()
        }
    }

    #[test]
    fn separable_threshold_is_smallest_above_negatives() {
        let pairs = vec![
            pair(&[0.9, 0.1, 0.9, 0.1], &[0, 2], &[&[0], &[2]]),
            pair(&[0.1, 0.9, 0.1], &[1], &[&[1]]),
        ];
        let t = tune_threshold(&pairs, Normalization::None).unwrap();
        assert_eq!(t, 0.9);
        let m = classification_metrics(&pairs, &cfg(t, Normalization::None)).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        assert_eq!(auprc(&pairs, Normalization::Max).unwrap(), 1.0);
    }

    #[test]
    fn identical_scores_give_all_positive_f1() {
        let pairs = vec![pair(&[0.5, 0.5, 0.5, 0.5], &[1], &[&[1]])];
        let t = tune_threshold(&pairs, Normalization::None).unwrap();
        let m = classification_metrics(&pairs, &cfg(t, Normalization::None)).unwrap();
        assert!((m.f1 - 2.0 * 0.25 / 1.25).abs() < 1e-15);
    }

    #[test]
    fn all_zero_scores_use_threshold_one() {
        let pairs = vec![pair(&[0.0, 0.0], &[1], &[&[1]])];
        assert_eq!(tune_threshold(&pairs, Normalization::Max).unwrap(), 1.0);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let pairs = vec![pair(&[0.0, 1.0, 1.0, 0.0], &[1, 2], &[&[1, 2]])];
        let r = plausibility(&pairs, &cfg(0.5, Normalization::Max)).unwrap();
        for (name, v) in r.metrics() {
            let want = match name {
                "empty" => 0.0,
                "precision_at_k" => 2.0 / 5.0,
                "iou" => 2.0 / 4.0,
                _ => 1.0,
            };
            assert!((v - want).abs() < 1e-15, "{name}: {v}");
        }
    }

    #[test]
    fn empty_rate_counts_pairs() {
        let pairs = vec![
            pair(&[0.1, 0.2], &[1], &[&[1]]),
            pair(&[0.1, 0.9], &[1], &[&[1]]),
        ];
        let m = classification_metrics(&pairs, &cfg(0.5, Normalization::None)).unwrap();
        assert_eq!(m.empty, 0.5);
    }

    #[test]
    fn handcrafted_two_documents() {
        // doc a, code x: predicted {0,1,2}; evidence {1,2,3}, spans [1,2] and [3]
        // doc a, code y: predicted {4};     evidence {0},     span [0]
        // doc b, code x: predicted {};      evidence {2},     span [2]
        let pairs = vec![
            pair(&[0.6, 0.7, 0.8, 0.1, 0.0], &[1, 2, 3], &[&[1, 2], &[3]]),
            pair(&[0.1, 0.0, 0.2, 0.3, 0.9], &[0], &[&[0]]),
            pair(&[0.2, 0.1, 0.4], &[2], &[&[2]]),
        ];
        let m = classification_metrics(&pairs, &cfg(0.5, Normalization::None)).unwrap();
        let (tp, pred, gold) = (2.0, 4.0, 5.0);
        assert!((m.precision - tp / pred).abs() < 1e-12);
        assert!((m.recall - tp / gold).abs() < 1e-12);
        let f1 = 2.0 * (tp / pred) * (tp / gold) / (tp / pred + tp / gold);
        assert!((m.f1 - f1).abs() < 1e-12);
        assert!((m.empty - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.span_recall - 1.0 / 4.0).abs() < 1e-12);
        assert!((m.cover - 1.0).abs() < 1e-12);
        let macro_cfg = PlausibilityConfig {
            averaging: Averaging::Macro,
            ..cfg(0.5, Normalization::None)
        };
        let mm = classification_metrics(&pairs, &macro_cfg).unwrap();
        assert!((mm.precision - (2.0 / 3.0) / 3.0).abs() < 1e-12);
        assert!((mm.recall - (2.0 / 3.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_of_overlapping_sets() {
        let p = pair(&[0.0, 0.9, 0.8, 0.7, 0.0, 0.0], &[2, 3, 4], &[&[2, 3, 4]]);
        let r = ranking_metrics(&[p], 3).unwrap();
        assert_eq!(r.iou, 0.5);
        assert!((r.precision_at_k - 2.0 / 3.0).abs() < 1e-15);
        let q = pair(&[0.0, 0.9, 0.8, 0.7, 0.0], &[1, 2, 3, 4], &[&[1, 2, 3, 4]]);
        assert_eq!(ranking_metrics(&[q], 3).unwrap().precision_at_k, 1.0);
    }

    #[test]
    fn ties_rank_lower_index_first() {
        assert_eq!(top_k(&[0.5, 0.5, 0.9, 0.5], 3), vec![2, 0, 1]);
    }

    #[test]
    fn out_of_range_evidence_names_pair() {
        let p = pair(&[0.1, 0.2], &[2], &[&[2]]);
        match classification_metrics(&[p], &PlausibilityConfig::default()) {
            Err(Error::EvidenceOutOfRange { doc, code, index, len }) => {
                assert_eq!((doc.as_str(), code.as_str(), index, len), ("d", "c", 2, 2));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn normalization_modes() {
        assert_eq!(normalize(&[1.0, 3.0], Normalization::Sum), vec![0.25, 0.75]);
        assert_eq!(normalize(&[1.0, 4.0], Normalization::Max), vec![0.25, 1.0]);
        assert_eq!(normalize(&[0.0, 0.0], Normalization::Max), vec![0.0, 0.0]);
    }
}
