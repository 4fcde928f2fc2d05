use serde::{Deserialize, Serialize};

use super::plausibility::top_k;
use crate::error::{Error, Result};

/// Outputs at or below this are skipped to avoid dividing by zero.
pub const MIN_OUTPUT: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaithfulnessConfig {
    pub k_faith: usize,
    pub mask_id: usize,
}

impl Default for FaithfulnessConfig {
    fn default() -> Self {
        Self {
            k_faith: 100,
            mask_id: crate::data::MASK_ID,
        }
    }
}

/// Token indices from most to least important, ties by lower index.
pub fn importance_order(scores: &[f64]) -> Vec<usize> {
    top_k(scores, scores.len())
}

fn masked(tokens: &[usize], which: &[usize], mask_id: usize) -> Vec<usize> {
    let mut t = tokens.to_vec();
    for &i in which {
        t[i] = mask_id;
    }
    t
}

fn drops(
    tokens: &[usize],
    scores: &[f64],
    cfg: &FaithfulnessConfig,
    from_top: bool,
    mut f: impl FnMut(&[usize]) -> Result<f64>,
) -> Result<Option<f64>> {
    if scores.len() != tokens.len() {
        return Err(Error::ShapeMismatch {
            op: "faithfulness",
            lhs: vec![tokens.len()],
            rhs: vec![scores.len()],
        });
    }
    if cfg.k_faith == 0 {
        return Err(Error::Config("k_faith must be at least 1".into()));
    }
    let fx = f(tokens)?;
    if fx <= MIN_OUTPUT {
        log::warn!("output {fx} too small for a faithfulness ratio; pair skipped");
        return Ok(None);
    }
    let n = tokens.len();
    let k = cfg.k_faith.min(n);
    let order = importance_order(scores);
    let mut total = 0.0;
    for step in 1..=k {
        // comprehensiveness masks the `step` most important tokens;
        // sufficiency masks the `n - k + step` least important ones
        let which = if from_top {
            &order[..step]
        } else {
            &order[k - step..]
        };
        let y = f(&masked(tokens, which, cfg.mask_id))?;
        total += ((fx - y) / fx).max(0.0);
    }
    let v = total / k as f64;
    assert!((0.0..=1.0).contains(&v), "faithfulness {v} outside [0, 1]");
    Ok(Some(v))
}

/// `(1/K) Σ_{i=0}^{K} max(0, f(X) - f(R̄_i)) / f(X)` where `R̄_i` masks the
/// `i` highest-scored tokens and `K = min(k_faith, N)`. `None` when
/// `f(X)` is too small.
pub fn comprehensiveness(
    tokens: &[usize],
    scores: &[f64],
    cfg: &FaithfulnessConfig,
    f: impl FnMut(&[usize]) -> Result<f64>,
) -> Result<Option<f64>> {
    drops(tokens, scores, cfg, true, f)
}

/// Mean normalized drop over the `K = min(k_faith, N)` largest masking
/// counts `N - K + 1 ..= N`, where `R_i` masks the `i` lowest-scored
/// tokens.
pub fn sufficiency(
    tokens: &[usize],
    scores: &[f64],
    cfg: &FaithfulnessConfig,
    f: impl FnMut(&[usize]) -> Result<f64>,
) -> Result<Option<f64>> {
    drops(tokens, scores, cfg, false, f)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessRow {
    pub doc_id: String,
    pub code: String,
    pub comprehensiveness: Option<f64>,
    pub sufficiency: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub comprehensiveness: f64,
    pub sufficiency: f64,
    pub evaluated: usize,
    pub skipped: usize,
    pub rows: Vec<FaithfulnessRow>,
}

impl FaithfulnessReport {
    pub fn from_rows(rows: Vec<FaithfulnessRow>) -> Self {
        let ok: Vec<&FaithfulnessRow> = rows
            .iter()
            .filter(|r| r.comprehensiveness.is_some() && r.sufficiency.is_some())
            .collect();
        let mean = |g: fn(&FaithfulnessRow) -> f64| {
            if ok.is_empty() {
                0.0
            } else {
                ok.iter().map(|r| g(r)).sum::<f64>() / ok.len() as f64
            }
        };
        Self {
            comprehensiveness: mean(|r| r.comprehensiveness.unwrap_or(0.0)),
            sufficiency: mean(|r| r.sufficiency.unwrap_or(0.0)),
            evaluated: ok.len(),
            skipped: rows.len() - ok.len(),
            rows,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(w: &'static [f64]) -> impl FnMut(&[usize]) -> Result<f64> {
        move |t: &[usize]| {
            let s: f64 = t.iter().zip(w).map(|(&id, w)| if id == 0 { 0.0 } else { *w }).sum();
            Ok(1.0 / (1.0 + (-s).exp()))
        }
    }

    const W: &[f64] = &[1.5, -0.5, 0.8, 0.2, 2.0];
    const TOKENS: [usize; 5] = [7, 8, 9, 10, 11];
    const SCORES: [f64; 5] = [0.3, 0.1, 0.6, 0.1, 0.9];

    fn oracle(from_top: bool) -> f64 {
        let mut f = toy(W);
        let fx = f(&TOKENS).unwrap();
        // ranking by hand: 4, 2, 0, 1, 3
        let order = [4, 2, 0, 1, 3];
        let k = 3;
        let mut total = 0.0;
        if from_top {
            for i in 0..=k {
                let mut t = TOKENS;
                for &o in &order[..i] {
                    t[o] = 0;
                }
                total += ((fx - f(&t).unwrap()) / fx).max(0.0);
            }
        } else {
            for i in (5 - k + 1)..=5 {
                let mut t = TOKENS;
                for &o in &order[5 - i..] {
                    t[o] = 0;
                }
                total += ((fx - f(&t).unwrap()) / fx).max(0.0);
            }
        }
        total / k as f64
    }

    fn cfg() -> FaithfulnessConfig {
        FaithfulnessConfig { k_faith: 3, mask_id: 0 }
    }

    #[test]
    fn comprehensiveness_matches_mask_and_evaluate() {
        let c = comprehensiveness(&TOKENS, &SCORES, &cfg(), toy(W)).unwrap().unwrap();
        assert!((c - oracle(true)).abs() < 1e-12);
    }

    #[test]
    fn sufficiency_matches_mask_and_evaluate() {
        let s = sufficiency(&TOKENS, &SCORES, &cfg(), toy(W)).unwrap().unwrap();
        assert!((s - oracle(false)).abs() < 1e-12);
    }

    #[test]
    fn insensitive_model_scores_zero() {
        let f = |_: &[usize]| Ok(0.7);
        assert_eq!(comprehensiveness(&TOKENS, &SCORES, &cfg(), f).unwrap(), Some(0.0));
        assert_eq!(sufficiency(&TOKENS, &SCORES, &cfg(), f).unwrap(), Some(0.0));
    }

    #[test]
    fn increases_clamp_to_zero() {
        let f = |t: &[usize]| Ok(0.2 + 0.1 * t.iter().filter(|&&i| i == 0).count() as f64);
        assert_eq!(sufficiency(&TOKENS, &SCORES, &cfg(), f).unwrap(), Some(0.0));
    }

    #[test]
    fn tiny_output_is_skipped() {
        let f = |_: &[usize]| Ok(1e-12);
        assert_eq!(comprehensiveness(&TOKENS, &SCORES, &cfg(), f).unwrap(), None);
    }

    #[test]
    fn report_skips_missing_rows() {
        let rows = vec![
            FaithfulnessRow {
                comprehensiveness: Some(0.5),
                sufficiency: Some(0.1),
                ..Default::default()
            },
            FaithfulnessRow::default(),
        ];
        let r = FaithfulnessReport::from_rows(rows);
        assert_eq!((r.comprehensiveness, r.sufficiency, r.evaluated, r.skipped), (0.5, 0.1, 1, 1));
    }
}
