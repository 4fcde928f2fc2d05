//! Attention- and gradient-based attributions computed from a retained
//! forward tape.

use crate::autodiff::{NodeId, ReferenceContext, Tape};
use crate::error::{Error, Result};
use crate::model::ForwardResult;
use crate::tensor::{matmul, Tensor};

/// Cross-attention row `A_j`.
pub fn attention(fr: &ForwardResult, j: usize) -> Vec<f64> {
    fr.attention.row(j).to_vec()
}

/// Head-mean self-attention of one layer plus identity, optionally
/// row-normalized.
pub fn rollout_layer(heads: &[Tensor], renormalize: bool) -> Tensor {
    let n = heads[0].rows();
    let mut m = Tensor::zeros(&[n, n]);
    for h in heads {
        m.add_assign(h).expect("square heads");
    }
    m.scale(1.0 / heads.len() as f64);
    for i in 0..n {
        m.data_mut()[i * n + i] += 1.0;
    }
    if renormalize {
        for i in 0..n {
            let row = m.row_mut(i);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    m
}

/// Accumulated rollout `Ã = Ā_L ⋯ Ā_1` (identity for a model with no layers).
pub fn rollout_matrix(stack: &[Vec<Tensor>], n: usize, renormalize: bool) -> Tensor {
    let mut acc: Option<Tensor> = None;
    for heads in stack {
        let a = rollout_layer(heads, renormalize);
        acc = Some(match acc {
            None => a,
            Some(prev) => matmul(&a, &prev, false, false).expect("square"),
        });
    }
    acc.unwrap_or_else(|| {
        let mut eye = Tensor::zeros(&[n, n]);
        for i in 0..n {
            eye.data_mut()[i * n + i] = 1.0;
        }
        eye
    })
}

/// `A_j · Ã`.
pub fn rollout(fr: &ForwardResult, j: usize, renormalize: bool) -> Vec<f64> {
    let n = fr.tokens_len();
    let r = rollout_matrix(&fr.self_attention, n, renormalize);
    let a = Tensor::row_vector(attention(fr, j));
    matmul(&a, &r, false, false).expect("conformable").into_data()
}

/// `A_jn · |∂ŷ_j/∂A_jn|`.
pub fn attgrad(fr: &ForwardResult, j: usize) -> Result<Vec<f64>> {
    let g = fr.attention_gradient(j)?;
    Ok(fr.attention.row(j).iter().zip(g.row(j)).map(|(a, g)| a * g.abs()).collect())
}

/// Per-row L2 norm of `x ⊙ g`.
pub fn row_norms_of_product(x: &Tensor, g: &Tensor) -> Vec<f64> {
    (0..x.rows())
        .map(|i| x.row(i).iter().zip(g.row(i)).map(|(a, b)| (a * b) * (a * b)).sum::<f64>().sqrt())
        .collect()
}

/// Per-row L2 norm.
pub fn row_norms(t: &Tensor) -> Vec<f64> {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// `‖X_n ⊙ ∂ŷ_j/∂X_n‖₂`.
pub fn inputxgrad(fr: &ForwardResult, j: usize) -> Result<Vec<f64>> {
    let g = fr.input_gradient(j)?;
    Ok(row_norms_of_product(fr.input_value(), &g))
}

/// `A_jn · ‖X_n ⊙ ∂ŷ_j/∂X_n‖₂` from a single backward pass.
pub fn attingrad(fr: &ForwardResult, j: usize) -> Result<Vec<f64>> {
    let ixg = inputxgrad(fr, j)?;
    Ok(fr.attention.row(j).iter().zip(ixg).map(|(a, s)| a * s).collect())
}

/// Signed integrated gradients `(X - B) ⊙ mean_k ∇f(B + (k + ½)/m · (X - B))`
/// for every output returned by `grads`.
pub fn integrated_gradients(
    x: &Tensor,
    baseline: &Tensor,
    steps: usize,
    mut grads: impl FnMut(&Tensor) -> Result<Vec<Tensor>>,
) -> Result<Vec<Tensor>> {
    if steps == 0 {
        return Err(Error::Config("integrated gradients need at least one step".into()));
    }
    if x.shape() != baseline.shape() {
        return Err(Error::ShapeMismatch {
            op: "integrated_gradients",
            lhs: x.shape().to_vec(),
            rhs: baseline.shape().to_vec(),
        });
    }
    let diff = x.zip_map(baseline, |a, b| a - b)?;
    let mut total: Option<Vec<Tensor>> = None;
    for k in 0..steps {
        let alpha = (k as f64 + 0.5) / steps as f64;
        let point = baseline.zip_map(&diff, |b, d| b + alpha * d)?;
        let g = grads(&point)?;
        match total.as_mut() {
            None => total = Some(g),
            Some(t) => {
                for (acc, gi) in t.iter_mut().zip(&g) {
                    acc.add_assign(gi)?;
                }
            }
        }
    }
    total
        .expect("steps >= 1")
        .into_iter()
        .map(|t| t.zip_map(&diff, |g, d| g / steps as f64 * d))
        .collect()
}

/// Signed DeepLift contributions `m ⊙ (x - x_ref)` of input `x` on `tape`
/// to `output` (seeded by `seed`), against a reference tape of identical
/// topology.
pub fn deeplift_contributions(
    tape: &Tape,
    output: NodeId,
    seed: &Tensor,
    x: NodeId,
    reference: &Tape,
) -> Result<Tensor> {
    let ctx = ReferenceContext::from_tape(reference);
    let mut m = tape.deeplift_multipliers(output, seed, &ctx)?;
    let mult = m
        .take(x)
        .ok_or_else(|| Error::Graph("deeplift input is not a marked input".into()))?;
    let diff = tape.value(x).zip_map(reference.value(x), |a, b| a - b)?;
    mult.zip_map(&diff, |m, d| m * d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn rollout_identity_layer_is_identity() {
        let eye = t(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let r = rollout_matrix(&[vec![eye.clone(), eye.clone()]], 3, true);
        assert_eq!(r, eye);
    }

    #[test]
    fn rollout_matches_hand_products() {
        let a1 = t(&[&[0.5, 0.25, 0.25], &[0.1, 0.8, 0.1], &[0.0, 0.3, 0.7]]);
        let a2 = t(&[&[0.2, 0.2, 0.6], &[0.3, 0.3, 0.4], &[1.0, 0.0, 0.0]]);
        let norm = |m: [[f64; 3]; 3]| {
            let mut out = m;
            for (i, r) in out.iter_mut().enumerate() {
                r[i] += 1.0;
                let s: f64 = r.iter().sum();
                r.iter_mut().for_each(|v| *v /= s);
            }
            out
        };
        let grab = |x: &Tensor| -> [[f64; 3]; 3] {
            let mut m = [[0.0; 3]; 3];
            for i in 0..3 {
                for k in 0..3 {
                    m[i][k] = x.at(i, k);
                }
            }
            m
        };
        let (b1, b2) = (norm(grab(&a1)), norm(grab(&a2)));
        let mut want = [[0.0; 3]; 3];
        for i in 0..3 {
            for k in 0..3 {
                want[i][k] = (0..3).map(|p| b2[i][p] * b1[p][k]).sum();
            }
        }
        let got = rollout_matrix(&[vec![a1], vec![a2]], 3, true);
        for i in 0..3 {
            let s: f64 = got.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for k in 0..3 {
                assert!((got.at(i, k) - want[i][k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rollout_without_renormalization_keeps_identity_mass() {
        let a = t(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let r = rollout_matrix(&[vec![a]], 2, false);
        assert_eq!(r.row(0), &[1.5, 0.5]);
    }

    #[test]
    fn intgrad_linear_is_exact() {
        let w = t(&[&[0.5, -1.0], &[2.0, 0.25]]);
        let x = t(&[&[1.0, 2.0], &[-1.0, 0.5]]);
        let b = t(&[&[0.2, 0.0], &[0.0, 1.0]]);
        for steps in [1, 3, 64] {
            let got = integrated_gradients(&x, &b, steps, |_| Ok(vec![w.clone()])).unwrap();
            let want = w.zip_map(&x.zip_map(&b, |a, b| a - b).unwrap(), |w, d| w * d).unwrap();
            for (g, e) in got[0].data().iter().zip(want.data()) {
                assert!((g - e).abs() < 1e-14);
            }
        }
        let zero = integrated_gradients(&x, &x, 8, |_| Ok(vec![w.clone()])).unwrap();
        assert!(zero[0].data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn intgrad_completeness_on_tanh_model() {
        // f(X) = Σ tanh(X) ⊙ c
        let c = t(&[&[0.7, -0.4], &[1.3, 0.2]]);
        let f = |x: &Tensor| x.data().iter().zip(c.data()).map(|(a, c)| a.tanh() * c).sum::<f64>();
        let x = t(&[&[1.0, -2.0], &[0.5, 1.5]]);
        let b = Tensor::zeros(&[2, 2]);
        let got = integrated_gradients(&x, &b, 256, |p| {
            Ok(vec![p.zip_map(&c, |v, c| c * (1.0 - v.tanh().powi(2))).unwrap()])
        })
        .unwrap();
        let total: f64 = got[0].data().iter().sum();
        let want = f(&x) - f(&b);
        assert!(((total - want) / want).abs() < 1e-2);
    }

    #[test]
    fn deeplift_completeness_on_elementwise_chain() {
        let build = |x: Tensor| {
            let mut tape = Tape::new();
            let xi = tape.input(x);
            let a = tape.tanh(xi).unwrap();
            let b = tape.affine(a, 2.0, 0.1).unwrap();
            let c = tape.sigmoid(b).unwrap();
            let s = tape.sum(c).unwrap();
            (tape, xi, s)
        };
        let (tape, xi, out) = build(t(&[&[1.0, -0.5, 2.0]]));
        let (reference, _, rout) = build(t(&[&[0.0, 0.3, -1.0]]));
        let contrib = deeplift_contributions(&tape, out, &Tensor::scalar(1.0), xi, &reference).unwrap();
        let total: f64 = contrib.data().iter().sum();
        let want = tape.value(out).item().unwrap() - reference.value(rout).item().unwrap();
        assert!((total - want).abs() < 1e-8);
    }

    #[test]
    fn norms() {
        let x = t(&[&[3.0, 0.0], &[1.0, 1.0]]);
        let g = t(&[&[1.0, 5.0], &[2.0, 2.0]]);
        assert_eq!(row_norms_of_product(&x, &g), vec![3.0, 8f64.sqrt()]);
        assert_eq!(row_norms(&x), vec![3.0, 2f64.sqrt()]);
    }
}
