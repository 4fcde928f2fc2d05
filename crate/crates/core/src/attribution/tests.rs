use std::sync::Arc;

use super::*;
use crate::autodiff::LAYER_NORM_EPS;
use crate::tensor::Tensor;

fn small() -> (ModelParameters, ModelConfig) {
    let cfg = ModelConfig {
        vocab_size: 12,
        embed_dim: 4,
        encoder_layers: 2,
        heads: 2,
        classes: 3,
        max_len: 8,
        dropout: 0.0,
    };
    (ModelParameters::init(&cfg, 11).unwrap(), cfg)
}

const TOKENS: [usize; 5] = [1, 5, 7, 9, 2];

fn run(m: Method, classes: &[usize]) -> Vec<Vec<f64>> {
    let (p, c) = small();
    explain(&p, &c, &TOKENS, classes, m, &AttributionSettings::default(), 4).unwrap()
}

#[test]
fn every_method_is_non_negative_and_sized() {
    let (p, c) = small();
    let settings = AttributionSettings {
        intgrad_steps: 8,
        budget: PerturbationBudget {
            samples: 64,
            ..Default::default()
        },
        ..Default::default()
    };
    for m in Method::ALL {
        let out = explain(&p, &c, &TOKENS, &[0, 2], m, &settings, 3).unwrap();
        assert_eq!(out.len(), 2);
        for s in out {
            assert_eq!(s.len(), TOKENS.len(), "{m}");
            assert!(s.iter().all(|v| v.is_finite() && *v >= 0.0), "{m}: {s:?}");
        }
        let again = explain(&p, &c, &TOKENS, &[0, 2], m, &settings, 3).unwrap();
        assert_eq!(explain(&p, &c, &TOKENS, &[0, 2], m, &settings, 3).unwrap(), again);
    }
}

#[test]
fn method_names_round_trip() {
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, format!("\"{}\"", m.name()));
    }
    assert!("gradcam".parse::<Method>().is_err());
}

#[test]
fn attention_rows_sum_to_one_and_match_decode() {
    let (p, c) = small();
    let fr = predict(&TOKENS, &p, &c).unwrap();
    let (_, a) = crate::model::decode(&fr.hidden, &p).unwrap();
    for j in 0..3 {
        let s = attention(&fr, j);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(s, a.row(j));
    }
    for r in run(Method::Rollout, &[0, 1, 2]) {
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-8);
    }
}

#[test]
fn attingrad_factorizes() {
    let a = run(Method::Attention, &[0, 1, 2]);
    let g = run(Method::InputXGrad, &[0, 1, 2]);
    let ag = run(Method::AttInGrad, &[0, 1, 2]);
    for j in 0..3 {
        for n in 0..TOKENS.len() {
            assert_eq!(ag[j][n], a[j][n] * g[j][n]);
        }
    }
}

#[test]
fn zero_output_weights_silence_gradients() {
    let (mut p, c) = small();
    p.w_out = Arc::new(Tensor::zeros(&[4, 1]));
    let s = AttributionSettings::default();
    for m in [Method::AttGrad, Method::InputXGrad, Method::AttInGrad, Method::IntGrad, Method::Occlusion1] {
        let out = explain(&p, &c, &TOKENS, &[1], m, &s, 0).unwrap();
        assert!(out[0].iter().all(|v| *v == 0.0), "{m}: {:?}", out[0]);
    }
}

#[test]
fn zero_embedding_row_gets_zero_inputxgrad() {
    let (mut p, c) = small();
    let mut table = (*p.token_embedding).clone();
    table.row_mut(7).iter_mut().for_each(|v| *v = 0.0);
    p.token_embedding = Arc::new(table);
    let s = AttributionSettings::default();
    for m in [Method::InputXGrad, Method::AttInGrad] {
        let out = explain(&p, &c, &TOKENS, &[0], m, &s, 0).unwrap();
        assert_eq!(out[0][2], 0.0);
        assert!(out[0][1] > 0.0);
    }
}

#[test]
fn baseline_input_has_zero_path_attributions() {
    let (p, c) = small();
    let tokens = baseline_tokens(5);
    let s = AttributionSettings::default();
    for m in [Method::IntGrad, Method::DeepLift] {
        let out = explain(&p, &c, &tokens, &[0, 1], m, &s, 0).unwrap();
        assert!(out.iter().flatten().all(|v| *v == 0.0), "{m}");
    }
}

#[test]
fn intgrad_completeness_on_the_model() {
    let (p, c) = small();
    let settings = AttributionSettings {
        intgrad_steps: 256,
        ..Default::default()
    };
    let x = embed(&p, &TOKENS);
    let b = embed(&p, &baseline_tokens(TOKENS.len()));
    let signed = integrated_gradients(&x, &b, settings.intgrad_steps, |pt| {
        let fr = forward_embeddings(&p, &c, pt.clone())?;
        Ok(vec![fr.input_gradient(1)?])
    })
    .unwrap();
    let total: f64 = signed[0].data().iter().sum();
    let fx = forward_embeddings(&p, &c, x).unwrap().probabilities[1];
    let fb = forward_embeddings(&p, &c, b).unwrap().probabilities[1];
    assert!(((total - (fx - fb)) / (fx - fb)).abs() < 1e-2, "{total} vs {}", fx - fb);
}

#[test]
fn occlusion_matches_masked_reruns() {
    let (p, c) = small();
    let signed = explain_signed(&p, &c, &TOKENS, &[2], Method::Occlusion1, &AttributionSettings::default(), 0).unwrap();
    let full = crate::model::probabilities(&TOKENS, &p, &c).unwrap()[2];
    for n in 0..TOKENS.len() {
        let mut t = TOKENS.to_vec();
        t[n] = crate::data::MASK_ID;
        let y = crate::model::probabilities(&t, &p, &c).unwrap()[2];
        assert!((signed[0][n] - (full - y)).abs() < 1e-12);
    }
}

fn decoder_prob(p: &ModelParameters, value: &Tensor, a_row: &[f64]) -> f64 {
    let d = value.cols();
    let mut z = vec![0.0; d];
    for (n, &a) in a_row.iter().enumerate() {
        for k in 0..d {
            z[k] += a * value.at(n, k);
        }
    }
    let mean = z.iter().sum::<f64>() / d as f64;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    let logit: f64 = (0..d)
        .map(|k| {
            let zn = (z[k] - mean) / (var + LAYER_NORM_EPS).sqrt();
            (zn * p.decoder_norm_scale.data()[k] + p.decoder_norm_offset.data()[k]) * p.w_out.data()[k]
        })
        .sum();
    1.0 / (1.0 + (-logit).exp())
}

#[test]
fn attention_gradient_matches_finite_differences() {
    let (p, c) = small();
    let tokens = [1, 4, 6, 2];
    let fr = predict(&tokens, &p, &c).unwrap();
    let value = crate::tensor::matmul(&fr.hidden, &p.w_value, false, false).unwrap();
    let j = 1;
    let g = fr.attention_gradient(j).unwrap();
    let a = attention(&fr, j);
    assert!((decoder_prob(&p, &value, &a) - fr.probabilities[j]).abs() < 1e-12);
    let h = 1e-6;
    let fd: Vec<f64> = (0..4)
        .map(|n| {
            let (mut up, mut dn) = (a.clone(), a.clone());
            up[n] += h;
            dn[n] -= h;
            (decoder_prob(&p, &value, &up) - decoder_prob(&p, &value, &dn)) / (2.0 * h)
        })
        .collect();
    let num: f64 = fd.iter().zip(g.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(num / den < 1e-4, "{fd:?} {:?}", g.row(j));
    let ag = attgrad(&fr, j).unwrap();
    for n in 0..4 {
        assert_eq!(ag[n], a[n] * g.at(j, n).abs());
    }
}

#[test]
fn inputxgrad_matches_finite_difference_oracle() {
    let (p, c) = small();
    let tokens = [1, 8, 2];
    let x = embed(&p, &tokens);
    let fr = forward_embeddings(&p, &c, x.clone()).unwrap();
    // fourth-order central differences
    let h = 1e-5;
    let f = |i: usize, d: f64| {
        let mut t = x.clone();
        t.data_mut()[i] += d;
        forward_embeddings(&p, &c, t).unwrap().probabilities[0]
    };
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        g.data_mut()[i] = (8.0 * (f(i, h) - f(i, -h)) - (f(i, 2.0 * h) - f(i, -2.0 * h))) / (12.0 * h);
    }
    let want = row_norms_of_product(&x, &g);
    let got = inputxgrad(&fr, 0).unwrap();
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-9, "{got:?} {want:?}");
    }
}

#[test]
fn random_scores_are_uniform() {
    let a = random_scores(100_000, 9);
    assert_eq!(a, random_scores(100_000, 9));
    assert!(a.iter().all(|v| (0.0..1.0).contains(v)));
    let mut s = a.clone();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let ks = s
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - i as f64 / n).abs().max(((i + 1) as f64 / n - v).abs()))
        .fold(0.0, f64::max);
    assert!(ks < 0.01, "{ks}");
}

#[test]
fn jsonl_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.jsonl");
    let v = vec![AttributionVector {
        doc_id: "d1".into(),
        code: "C00".into(),
        method: Method::AttInGrad.name().into(),
        seed: 3,
        scores: vec![0.0, 0.25, 1.5],
    }];
    write_jsonl(&path, &v).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), v);
    std::fs::write(&path, "{\"doc_id\":\"d\",\"code\":\"c\",\"method\":\"rand\",\"seed\":0,\"scores\":[-1.0]}\n").unwrap();
    assert!(read_jsonl(&path).is_err());
}
