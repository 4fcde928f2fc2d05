use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PROB_CLAMP: f64 = 1e-12;
pub const KL_FLOOR: f64 = 1e-8;

/// Mean binary cross-entropy over classes with probabilities clamped to
/// `[1e-12, 1 - 1e-12]`.
pub fn bce_loss(probs: &[f64], y: &[f64]) -> Result<f64> {
    if probs.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "bce",
            lhs: vec![probs.len()],
            rhs: vec![y.len()],
        });
    }
    let total: f64 = probs
        .iter()
        .zip(y)
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / y.len() as f64)
}

/// [`bce_loss`] recorded on the tape for a `J x 1` probability node.
pub fn bce_node(tape: &mut Tape, probs: NodeId, y: &[f64]) -> Result<NodeId> {
    let j = tape.value(probs).len();
    if j != y.len() {
        return Err(Error::ShapeMismatch {
            op: "bce",
            lhs: tape.value(probs).shape().to_vec(),
            rhs: vec![y.len(), 1],
        });
    }
    let p = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_p = tape.log(p)?;
    let q = tape.affine(p, -1.0, 1.0)?;
    let log_q = tape.log(q)?;
    let t = tape.constant(Tensor::from_parts(j, 1, y.to_vec()));
    let u = tape.constant(Tensor::from_parts(j, 1, y.iter().map(|v| 1.0 - v).collect()));
    let a = tape.mul(t, log_p)?;
    let b = tape.mul(u, log_q)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    tape.scale(m, -1.0)
}

/// Attention target over `n` tokens: uniform over `evidence`, `1e-8`
/// elsewhere, renormalized. `None` for an empty evidence set.
pub fn kl_target(n: usize, evidence: &[usize]) -> Option<Vec<f64>> {
    if evidence.is_empty() {
        return None;
    }
    let mut t = vec![KL_FLOOR; n];
    let w = 1.0 / evidence.len() as f64;
    for &i in evidence {
        t[i] = w;
    }
    let z: f64 = t.iter().sum();
    Some(t.into_iter().map(|v| v / z).collect())
}

/// `KL(target || a) = sum t log(t / a)`.
pub fn kl_divergence(target: &[f64], a: &[f64]) -> f64 {
    target
        .iter()
        .zip(a)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &q)| t * (t / q.max(f64::MIN_POSITIVE)).ln())
        .sum()
}

/// Weighted sum of `KL(target_j || A_j)` over the given `(class, target)`
/// rows of the attention matrix.
pub fn supervised_attention_loss(attention: &Tensor, targets: &[(usize, Vec<f64>)], weight: f64) -> f64 {
    weight
        * targets
            .iter()
            .map(|(j, t)| kl_divergence(t, attention.row(*j)))
            .sum::<f64>()
}

/// Tape version of [`supervised_attention_loss`] on a `J x N` attention node.
pub fn supervised_attention_node(
    tape: &mut Tape,
    attention: NodeId,
    targets: &[(usize, Vec<f64>)],
    weight: f64,
) -> Result<NodeId> {
    let (j, n) = (tape.value(attention).rows(), tape.value(attention).cols());
    let mut t = Tensor::zeros(&[j, n]);
    let mut entropy = 0.0;
    for (c, row) in targets {
        t.row_mut(*c).copy_from_slice(row);
        entropy += row.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    }
    let t = tape.constant(t);
    let a = tape.clamp(attention, f64::MIN_POSITIVE, 1.0)?;
    let log_a = tape.log(a)?;
    let cross = tape.mul(t, log_a)?;
    let cross = tape.sum(cross)?;
    tape.affine(cross, -weight, weight * entropy)
}

/// Linear warmup from 0 to `peak` over the first `warmup_fraction` of
/// steps, then linear decay to 0 at `total`.
pub fn lr_schedule(step: usize, total: usize, warmup_fraction: f64, peak: f64) -> f64 {
    if total == 0 {
        return peak;
    }
    let step = step.min(total) as f64;
    let total = total as f64;
    let warm = (warmup_fraction * total).round();
    if warm > 0.0 && step < warm {
        peak * step / warm
    } else if total > warm {
        peak * (total - step) / (total - warm)
    } else {
        peak
    }
}
