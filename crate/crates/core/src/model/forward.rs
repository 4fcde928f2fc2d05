use std::sync::Arc;

use rand::{Rng, RngCore};

use super::config::ModelConfig;
use super::params::ModelParameters;
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameter handles on a tape, in [`ModelParameters::tensors`] order.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub nodes: Vec<NodeId>,
}

impl ParamNodes {
    /// Adds every parameter to the tape. Trainable parameters are marked
    /// inputs; otherwise they are constants.
    pub fn load(tape: &mut Tape, params: &ModelParameters, trainable: bool) -> Self {
        let nodes = params
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.input_shared(Arc::clone(t))
                } else {
                    tape.constant_shared(Arc::clone(t))
                }
            })
            .collect();
        Self { nodes }
    }

    pub fn token_embedding(&self) -> NodeId {
        self.nodes[0]
    }
}

struct Cursor<'a> {
    nodes: &'a [NodeId],
    at: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> NodeId {
        let id = self.nodes[self.at];
        self.at += 1;
        id
    }
}

/// Dropout masks drawn from `rng` with drop probability `rate`.
pub struct Dropout<'r> {
    pub rng: &'r mut dyn RngCore,
    pub rate: f64,
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let (r, c) = (tape.value(x).rows(), tape.value(x).cols());
        let keep = 1.0 / (1.0 - self.rate);
        let data = (0..r * c)
            .map(|_| if self.rng.random::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        let mask = tape.constant(Tensor::from_parts(r, c, data));
        tape.mul(x, mask)
    }
}

/// Node handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    /// Encoder output `N x D`.
    pub hidden: NodeId,
    /// Per layer, per head `N x N` self-attention.
    pub self_attention: Vec<Vec<NodeId>>,
    /// Cross-attention `J x N`.
    pub attention: NodeId,
    /// `J x 1` decoder logits.
    pub logits: NodeId,
    /// `J x 1` probabilities.
    pub probs: NodeId,
}

fn norm_affine(tape: &mut Tape, x: NodeId, scale: NodeId, offset: NodeId) -> Result<NodeId> {
    let n = tape.layer_norm(x)?;
    let s = tape.mul(n, scale)?;
    tape.add(s, offset)
}

/// Builds the classifier on `tape` starting from the token embedding rows
/// `x` (`N x D`). Positional embeddings are added inside.
pub fn build(
    tape: &mut Tape,
    params: &ParamNodes,
    config: &ModelConfig,
    x: NodeId,
    mut dropout: Option<Dropout<'_>>,
) -> Result<ForwardNodes> {
    let n = tape.value(x).rows();
    if tape.value(x).cols() != config.embed_dim {
        return Err(Error::ShapeMismatch {
            op: "embedding",
            lhs: tape.value(x).shape().to_vec(),
            rhs: vec![n, config.embed_dim],
        });
    }
    if n == 0 || n > config.max_len {
        return Err(Error::TooLong {
            len: n,
            max_len: config.max_len,
        });
    }
    let mut p = Cursor {
        nodes: &params.nodes,
        at: 0,
    };
    let _token_table = p.next();
    let positions = p.next();
    let ids: Vec<usize> = (0..n).collect();
    let pos = tape.gather(positions, &ids)?;
    let mut h = tape.add(x, pos)?;
    let scale = 1.0 / (config.head_dim() as f64).sqrt();
    let mut stack = Vec::with_capacity(config.encoder_layers);
    for _ in 0..config.encoder_layers {
        let (s1, o1) = (p.next(), p.next());
        let a = norm_affine(tape, h, s1, o1)?;
        let mut heads = Vec::with_capacity(config.heads);
        let mut mixed: Option<NodeId> = None;
        for _ in 0..config.heads {
            let (wq, wk, wv, wo) = (p.next(), p.next(), p.next(), p.next());
            let q = tape.matmul(a, wq)?;
            let k = tape.matmul(a, wk)?;
            let v = tape.matmul(a, wv)?;
            let s = tape.matmul_nt(q, k)?;
            let s = tape.scale(s, scale)?;
            let att = tape.softmax(s)?;
            heads.push(att);
            let ctx = tape.matmul(att, v)?;
            let out = tape.matmul(ctx, wo)?;
            mixed = Some(match mixed {
                None => out,
                Some(m) => tape.add(m, out)?,
            });
        }
        stack.push(heads);
        let bias = p.next();
        let mut sub = tape.add(mixed.expect("at least one head"), bias)?;
        if let Some(d) = dropout.as_mut() {
            sub = d.apply(tape, sub)?;
        }
        h = tape.add(h, sub)?;

        let (s2, o2) = (p.next(), p.next());
        let f = norm_affine(tape, h, s2, o2)?;
        let (w1, b1, w2, b2) = (p.next(), p.next(), p.next(), p.next());
        let u = tape.matmul(f, w1)?;
        let u = tape.add(u, b1)?;
        let u = tape.gelu(u)?;
        let u = tape.matmul(u, w2)?;
        let mut u = tape.add(u, b2)?;
        if let Some(d) = dropout.as_mut() {
            u = d.apply(tape, u)?;
        }
        h = tape.add(h, u)?;
    }
    let (w_key, w_value, w_out, classes, dscale, doffset) =
        (p.next(), p.next(), p.next(), p.next(), p.next(), p.next());
    let key = tape.matmul(h, w_key)?;
    let value = tape.matmul(h, w_value)?;
    let scores = tape.matmul_nt(classes, key)?;
    let attention = tape.softmax(scores)?;
    let z = tape.matmul(attention, value)?;
    let z = norm_affine(tape, z, dscale, doffset)?;
    let logits = tape.matmul(z, w_out)?;
    let probs = tape.sigmoid(logits)?;
    Ok(ForwardNodes {
        hidden: h,
        self_attention: stack,
        attention,
        logits,
        probs,
    })
}

/// Checks token ids and length against the configuration.
pub fn check_tokens(tokens: &[usize], config: &ModelConfig) -> Result<()> {
    if tokens.is_empty() || tokens.len() > config.max_len {
        return Err(Error::TooLong {
            len: tokens.len(),
            max_len: config.max_len,
        });
    }
    if let Some((position, &id)) = tokens.iter().enumerate().find(|(_, &t)| t >= config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            position,
            id,
            vocab: config.vocab_size,
        });
    }
    Ok(())
}

/// Token embedding rows for `tokens`.
pub fn embed(params: &ModelParameters, tokens: &[usize]) -> Tensor {
    let table = &params.token_embedding;
    let d = table.cols();
    let mut data = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        data.extend_from_slice(table.row(t));
    }
    Tensor::from_parts(tokens.len(), d, data)
}

/// An inference pass with its tape kept for gradient queries.
#[derive(Clone, Debug)]
pub struct ForwardResult {
    pub probabilities: Vec<f64>,
    /// `J x N`
    pub attention: Tensor,
    /// Per layer, per head `N x N`.
    pub self_attention: Vec<Vec<Tensor>>,
    /// `N x D`
    pub hidden: Tensor,
    pub tape: Tape,
    /// The marked token embedding input `X`.
    pub input: NodeId,
    pub nodes: ForwardNodes,
}

impl ForwardResult {
    pub fn tokens_len(&self) -> usize {
        self.attention.cols()
    }

    pub fn classes(&self) -> usize {
        self.probabilities.len()
    }

    /// `J x 1` seed selecting class `j`.
    pub fn class_seed(&self, j: usize) -> Tensor {
        let mut s = Tensor::zeros(&[self.classes(), 1]);
        s.data_mut()[j] = 1.0;
        s
    }

    /// `d ŷ_j / d X`, `N x D`.
    pub fn input_gradient(&self, j: usize) -> Result<Tensor> {
        let g = self
            .tape
            .backward_wrt(self.nodes.probs, &self.class_seed(j), &[self.input])?;
        Ok(g.into_iter().next().expect("one root"))
    }

    /// `d ŷ_j / d A`, `J x N` (only row `j` can be nonzero).
    pub fn attention_gradient(&self, j: usize) -> Result<Tensor> {
        let g = self
            .tape
            .backward_wrt(self.nodes.probs, &self.class_seed(j), &[self.nodes.attention])?;
        Ok(g.into_iter().next().expect("one root"))
    }

    pub fn input_value(&self) -> &Tensor {
        self.tape.value(self.input)
    }
}

/// Inference from explicit embedding rows (used for baselines and paths).
pub fn forward_embeddings(params: &ModelParameters, config: &ModelConfig, x: Tensor) -> Result<ForwardResult> {
    let mut tape = Tape::new();
    let input = tape.input(x);
    let pn = ParamNodes::load(&mut tape, params, false);
    let nodes = build(&mut tape, &pn, config, input, None)?;
    let probabilities = tape.value(nodes.probs).data().to_vec();
    let attention = tape.value(nodes.attention).clone();
    let hidden = tape.value(nodes.hidden).clone();
    let self_attention = nodes
        .self_attention
        .iter()
        .map(|l| l.iter().map(|&h| tape.value(h).clone()).collect())
        .collect();
    Ok(ForwardResult {
        probabilities,
        attention,
        self_attention,
        hidden,
        tape,
        input,
        nodes,
    })
}

/// Deterministic inference on token ids.
pub fn predict(tokens: &[usize], params: &ModelParameters, config: &ModelConfig) -> Result<ForwardResult> {
    check_tokens(tokens, config)?;
    forward_embeddings(params, config, embed(params, tokens))
}

/// Probabilities only.
pub fn probabilities(tokens: &[usize], params: &ModelParameters, config: &ModelConfig) -> Result<Vec<f64>> {
    Ok(predict(tokens, params, config)?.probabilities)
}

/// Encoder output and self-attention stack.
pub fn encode(
    tokens: &[usize],
    params: &ModelParameters,
    config: &ModelConfig,
) -> Result<(Tensor, Vec<Vec<Tensor>>)> {
    let r = predict(tokens, params, config)?;
    Ok((r.hidden, r.self_attention))
}

/// Decoder on given contextual representations: `(ŷ, A)`.
pub fn decode(hidden: &Tensor, params: &ModelParameters) -> Result<(Vec<f64>, Tensor)> {
    let d = params.w_key.rows();
    if hidden.cols() != d || hidden.rows() == 0 {
        return Err(Error::ShapeMismatch {
            op: "decode",
            lhs: hidden.shape().to_vec(),
            rhs: vec![hidden.rows(), d],
        });
    }
    if !hidden.is_finite() {
        return Err(Error::Numeric("decoder input is not finite".into()));
    }
    let mut tape = Tape::new();
    let h = tape.constant(hidden.clone());
    let c = |t: &mut Tape, p: &Arc<Tensor>| t.constant_shared(Arc::clone(p));
    let wk = c(&mut tape, &params.w_key);
    let wv = c(&mut tape, &params.w_value);
    let wo = c(&mut tape, &params.w_out);
    let cls = c(&mut tape, &params.class_embedding);
    let s = c(&mut tape, &params.decoder_norm_scale);
    let o = c(&mut tape, &params.decoder_norm_offset);
    let key = tape.matmul(h, wk)?;
    let value = tape.matmul(h, wv)?;
    let scores = tape.matmul_nt(cls, key)?;
    let a = tape.softmax(scores)?;
    let z = tape.matmul(a, value)?;
    let z = norm_affine(&mut tape, z, s, o)?;
    let logits = tape.matmul(z, wo)?;
    let probs = tape.sigmoid(logits)?;
    Ok((tape.value(probs).data().to_vec(), tape.value(a).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gelu, sigmoid};
    use rand::SeedableRng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 13,
            embed_dim: 4,
            encoder_layers: 2,
            heads: 2,
            classes: 3,
            max_len: 8,
            dropout: 0.0,
        }
    }

    fn zero_encoder(p: &mut ModelParameters) {
        for l in &mut p.layers {
            for h in &mut l.heads {
                for w in [&mut h.query, &mut h.key, &mut h.value, &mut h.output] {
                    *w = Arc::new(Tensor::zeros(w.shape()));
                }
            }
            for w in [&mut l.ff_in, &mut l.ff_out] {
                *w = Arc::new(Tensor::zeros(w.shape()));
            }
        }
    }

    #[test]
    fn zero_encoder_passes_embeddings_through() {
        let cfg = tiny();
        let mut p = ModelParameters::init(&cfg, 1).unwrap();
        zero_encoder(&mut p);
        let tokens = [1, 5, 7, 2];
        let (h, _) = encode(&tokens, &p, &cfg).unwrap();
        for (n, &t) in tokens.iter().enumerate() {
            for d in 0..4 {
                let want = p.token_embedding.at(t, d) + p.position_embedding.at(n, d);
                assert_eq!(h.at(n, d), want);
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let cfg = tiny();
        let p = ModelParameters::init(&cfg, 2).unwrap();
        let r = predict(&[3, 4, 5, 6, 7, 8], &p, &cfg).unwrap();
        let mut all = vec![r.attention.clone()];
        all.extend(r.self_attention.iter().flatten().cloned());
        for a in all {
            for i in 0..a.rows() {
                assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        assert!(r.probabilities.iter().all(|&y| y > 0.0 && y < 1.0));
    }

    #[test]
    fn zero_output_weights_give_half() {
        let cfg = tiny();
        let mut p = ModelParameters::init(&cfg, 3).unwrap();
        p.w_out = Arc::new(Tensor::zeros(&[4, 1]));
        let r = predict(&[1, 2, 3], &p, &cfg).unwrap();
        assert!(r.probabilities.iter().all(|&y| y == 0.5));
    }

    #[test]
    fn constant_scores_give_uniform_attention() {
        let cfg = tiny();
        let mut p = ModelParameters::init(&cfg, 4).unwrap();
        p.class_embedding = Arc::new(Tensor::zeros(&[3, 4]));
        let r = predict(&[1, 2, 3, 4], &p, &cfg).unwrap();
        assert!(r.attention.data().iter().all(|&a| (a - 0.25).abs() < 1e-15));
    }

    #[test]
    fn rejects_bad_tokens() {
        let cfg = tiny();
        let p = ModelParameters::init(&cfg, 0).unwrap();
        assert!(matches!(
            predict(&[1, 13], &p, &cfg),
            Err(Error::TokenOutOfRange { position: 1, id: 13, .. })
        ));
        assert!(matches!(predict(&[1; 9], &p, &cfg), Err(Error::TooLong { .. })));
        assert!(predict(&[], &p, &cfg).is_err());
    }

    fn layer_norm_row(x: &[f64], s: &[f64], o: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mu = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        let r = 1.0 / (var + 1e-5).sqrt();
        x.iter().zip(s.iter().zip(o)).map(|(v, (a, b))| (v - mu) * r * a + b).collect()
    }

    fn softmax_row(x: &[f64]) -> Vec<f64> {
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }

    fn mm(a: &[Vec<f64>], b: &Tensor) -> Vec<Vec<f64>> {
        a.iter()
            .map(|r| (0..b.cols()).map(|c| (0..b.rows()).map(|k| r[k] * b.at(k, c)).sum()).collect())
            .collect()
    }

    #[test]
    fn decode_matches_hand_evaluation() {
        let cfg = ModelConfig {
            vocab_size: 5,
            embed_dim: 2,
            encoder_layers: 0,
            heads: 1,
            classes: 1,
            max_len: 4,
            dropout: 0.0,
        };
        let mut p = ModelParameters::init(&cfg, 0).unwrap();
        p.w_key = Arc::new(Tensor::matrix(2, 2, vec![1.0, 0.5, -0.3, 2.0]).unwrap());
        p.w_value = Arc::new(Tensor::matrix(2, 2, vec![0.2, -1.0, 0.7, 0.4]).unwrap());
        p.w_out = Arc::new(Tensor::matrix(2, 1, vec![1.5, -0.5]).unwrap());
        p.class_embedding = Arc::new(Tensor::matrix(1, 2, vec![0.3, -0.8]).unwrap());
        p.decoder_norm_scale = Arc::new(Tensor::matrix(1, 2, vec![1.2, 0.9]).unwrap());
        p.decoder_norm_offset = Arc::new(Tensor::matrix(1, 2, vec![0.1, -0.2]).unwrap());
        let h = vec![vec![0.5, -1.0], vec![1.5, 0.25], vec![-0.75, 0.6]];
        let (y, a) = decode(&Tensor::from_rows(&h).unwrap(), &p).unwrap();

        let k = mm(&h, &p.w_key);
        let v = mm(&h, &p.w_value);
        let c = p.class_embedding.row(0);
        let s: Vec<f64> = k.iter().map(|kr| kr[0] * c[0] + kr[1] * c[1]).collect();
        let att = softmax_row(&s);
        let z: Vec<f64> = (0..2).map(|d| (0..3).map(|n| att[n] * v[n][d]).sum()).collect();
        let zn = layer_norm_row(&z, p.decoder_norm_scale.data(), p.decoder_norm_offset.data());
        let want = sigmoid(zn[0] * 1.5 + zn[1] * -0.5);
        assert!((y[0] - want).abs() < 1e-9);
        for n in 0..3 {
            assert!((a.at(0, n) - att[n]).abs() < 1e-9);
        }
    }

    #[test]
    fn encoder_layer_matches_hand_evaluation() {
        let cfg = ModelConfig {
            vocab_size: 4,
            embed_dim: 4,
            encoder_layers: 1,
            heads: 1,
            classes: 1,
            max_len: 4,
            dropout: 0.0,
        };
        let p = ModelParameters::init(&cfg, 9).unwrap();
        let tokens = [2, 3];
        let (h, stack) = encode(&tokens, &p, &cfg).unwrap();

        let l = &p.layers[0];
        let hd = &l.heads[0];
        let x: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(n, &t)| (0..4).map(|d| p.token_embedding.at(t, d) + p.position_embedding.at(n, d)).collect())
            .collect();
        let a: Vec<Vec<f64>> = x
            .iter()
            .map(|r| layer_norm_row(r, l.attn_norm_scale.data(), l.attn_norm_offset.data()))
            .collect();
        let (q, k, v) = (mm(&a, &hd.query), mm(&a, &hd.key), mm(&a, &hd.value));
        let att: Vec<Vec<f64>> = q
            .iter()
            .map(|qr| {
                let s: Vec<f64> = k.iter().map(|kr| qr.iter().zip(kr).map(|(x, y)| x * y).sum::<f64>() / 2.0).collect();
                softmax_row(&s)
            })
            .collect();
        let ctx: Vec<Vec<f64>> = att
            .iter()
            .map(|ar| (0..4).map(|d| (0..2).map(|m| ar[m] * v[m][d]).sum()).collect())
            .collect();
        let o = mm(&ctx, &hd.output);
        let h1: Vec<Vec<f64>> = (0..2).map(|n| (0..4).map(|d| x[n][d] + o[n][d] + l.attn_out_bias.data()[d]).collect()).collect();
        let f: Vec<Vec<f64>> = h1
            .iter()
            .map(|r| layer_norm_row(r, l.ff_norm_scale.data(), l.ff_norm_offset.data()))
            .collect();
        let u: Vec<Vec<f64>> = mm(&f, &l.ff_in).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
        let u = mm(&u, &l.ff_out);
        for n in 0..2 {
            for d in 0..4 {
                assert!((h.at(n, d) - (h1[n][d] + u[n][d])).abs() < 1e-9);
            }
            for m in 0..2 {
                assert!((stack[0][0].at(n, m) - att[n][m]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn predict_is_deterministic() {
        let cfg = tiny();
        let p = ModelParameters::init(&cfg, 5).unwrap();
        let a = predict(&[1, 2, 3, 4], &p, &cfg).unwrap();
        let b = predict(&[1, 2, 3, 4], &p, &cfg).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.probabilities), bits(&b.probabilities));
        assert_eq!(bits(a.attention.data()), bits(b.attention.data()));
        a.tape.verify_replay().unwrap();
    }

    #[test]
    fn class_permutation_is_equivariant() {
        let cfg = tiny();
        let p = ModelParameters::init(&cfg, 6).unwrap();
        let perm = [2, 0, 1];
        let q = p.permute_classes(&perm);
        let tokens = [4, 5, 6, 7, 8];
        let a = predict(&tokens, &p, &cfg).unwrap();
        let b = predict(&tokens, &q, &cfg).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(b.probabilities[i], a.probabilities[src]);
            assert_eq!(b.attention.row(i), a.attention.row(src));
        }
        assert_eq!(a.hidden, b.hidden);
    }

    #[test]
    fn dropout_changes_training_pass_only() {
        let cfg = ModelConfig { dropout: 0.5, ..tiny() };
        let p = ModelParameters::init(&cfg, 7).unwrap();
        let x = embed(&p, &[1, 2, 3]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let xi = tape.input(x.clone());
        let pn = ParamNodes::load(&mut tape, &p, true);
        let nodes = build(&mut tape, &pn, &cfg, xi, Some(Dropout { rng: &mut rng, rate: 0.5 })).unwrap();
        let clean = forward_embeddings(&p, &cfg, x).unwrap();
        assert_ne!(tape.value(nodes.probs).data(), &clean.probabilities[..]);
    }
}
