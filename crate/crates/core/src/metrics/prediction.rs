//! Multi-label code prediction metrics.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub map: f64,
    /// Classes without a positive example, left out of macro-F1 and mAP.
    pub excluded_classes: usize,
}

fn f1(tp: f64, fp: f64, fn_: f64) -> f64 {
    let d = 2.0 * tp + fp + fn_;
    if d == 0.0 {
        0.0
    } else {
        2.0 * tp / d
    }
}

/// Micro-averaged F1 with positives at `p >= threshold`.
pub fn micro_f1(probs: &[Vec<f64>], labels: &[Vec<f64>], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (p, y) in probs.iter().zip(labels) {
        for (&pj, &yj) in p.iter().zip(y) {
            match (pj >= threshold, yj > 0.5) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
    }
    f1(tp, fp, fn_)
}

/// Average precision of one ranking, grouping tied scores into one
/// threshold. `None` when there is no positive.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            seen += 1;
            if labels[order[i]] {
                tp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

pub fn prediction_metrics(probs: &[Vec<f64>], labels: &[Vec<f64>], threshold: f64) -> PredictionReport {
    let classes = labels.first().map_or(0, Vec::len);
    let mut f1s = Vec::new();
    let mut aps = Vec::new();
    let mut excluded = 0;
    for j in 0..classes {
        let y: Vec<bool> = labels.iter().map(|l| l[j] > 0.5).collect();
        if !y.iter().any(|&b| b) {
            excluded += 1;
            continue;
        }
        let s: Vec<f64> = probs.iter().map(|p| p[j]).collect();
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (&sj, &yj) in s.iter().zip(&y) {
            match (sj >= threshold, yj) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        f1s.push(f1(tp, fp, fn_));
        aps.push(average_precision(&s, &y).expect("has positive"));
    }
    if excluded > 0 {
        log::warn!("{excluded} classes have no positive example and are excluded from macro-F1 and mAP");
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    PredictionReport {
        micro_f1: micro_f1(probs, labels, threshold),
        macro_f1: mean(&f1s),
        map: mean(&aps),
        excluded_classes: excluded,
    }
}

/// Threshold maximizing micro-F1 over the distinct predicted values;
/// ties go to the smaller threshold. Falls back to 0.5 without data.
pub fn tune_code_threshold(probs: &[Vec<f64>], labels: &[Vec<f64>]) -> f64 {
    let mut grid: Vec<f64> = probs.iter().flatten().copied().collect();
    if grid.is_empty() {
        return 0.5;
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut best = (f64::NEG_INFINITY, 0.5);
    for &t in &grid {
        let f = micro_f1(probs, labels, t);
        if f > best.0 {
            best = (f, t);
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictor() {
        let y = vec![vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]];
        let r = prediction_metrics(&y, &y, 0.5);
        assert_eq!((r.micro_f1, r.macro_f1, r.map), (1.0, 1.0, 1.0));
    }

    #[test]
    fn constant_scores_give_prevalence() {
        let y = vec![vec![1.0], vec![0.0], vec![0.0], vec![1.0], vec![0.0]];
        let p = vec![vec![0.5]; 5];
        assert!((prediction_metrics(&p, &y, 0.5).map - 0.4).abs() < 1e-15);
    }

    #[test]
    fn handcrafted_case() {
        let p = vec![
            vec![0.9, 0.2, 0.6],
            vec![0.4, 0.8, 0.1],
            vec![0.7, 0.3, 0.55],
            vec![0.1, 0.6, 0.3],
        ];
        let y = vec![
            vec![1.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0],
            vec![0.0, 1.0, 1.0],
        ];
        let r = prediction_metrics(&p, &y, 0.5);
        // tp: (0,0),(0,2),(1,1),(3,1) = 4; fp: (2,0),(2,2) = 2; fn: (1,0),(3,2) = 2
        assert!((r.micro_f1 - 8.0 / 12.0).abs() < 1e-12);
        // class f1: c0 tp1 fp1 fn1 -> 0.5; c1 tp2 -> 1; c2 tp1 fp1 fn1 -> 0.5
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
        // AP c0: ranks .9(+) .7(-) .4(+) .1 -> 1*0.5 + 2/3*0.5; c1: .8(+) .6(+) -> 1
        // c2: .6(+) .55(-) .3(+) .1 -> 0.5 + 0.5*2/3
        let want = ((0.5 + 1.0 / 3.0) * 2.0 + 1.0) / 3.0;
        assert!((r.map - want).abs() < 1e-12);
    }

    #[test]
    fn threshold_tuning_picks_best() {
        let p = vec![vec![0.3], vec![0.6], vec![0.2]];
        let y = vec![vec![1.0], vec![1.0], vec![0.0]];
        assert_eq!(tune_code_threshold(&p, &y), 0.3);
    }
}
