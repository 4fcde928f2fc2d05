use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    /// `D x d_head`
    pub query: Arc<Tensor>,
    pub key: Arc<Tensor>,
    pub value: Arc<Tensor>,
    /// `d_head x D`
    pub output: Arc<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub attn_norm_scale: Arc<Tensor>,
    pub attn_norm_offset: Arc<Tensor>,
    pub heads: Vec<AttentionHead>,
    pub attn_out_bias: Arc<Tensor>,
    pub ff_norm_scale: Arc<Tensor>,
    pub ff_norm_offset: Arc<Tensor>,
    pub ff_in: Arc<Tensor>,
    pub ff_in_bias: Arc<Tensor>,
    pub ff_out: Arc<Tensor>,
    pub ff_out_bias: Arc<Tensor>,
}

/// All learnable weights. Tensors are reference counted so that forward
/// tapes share them without copying.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    /// `V x D`
    pub token_embedding: Arc<Tensor>,
    /// `max_len x D`
    pub position_embedding: Arc<Tensor>,
    pub layers: Vec<EncoderLayer>,
    /// `D x D`
    pub w_key: Arc<Tensor>,
    /// `D x D`
    pub w_value: Arc<Tensor>,
    /// `D x 1`
    pub w_out: Arc<Tensor>,
    /// `J x D`
    pub class_embedding: Arc<Tensor>,
    pub decoder_norm_scale: Arc<Tensor>,
    pub decoder_norm_offset: Arc<Tensor>,
}

fn shared(t: Tensor) -> Arc<Tensor> {
    Arc::new(t)
}

impl ModelParameters {
    /// Random initialization: embeddings with std 0.02, projections with
    /// std `1/sqrt(fan_in)`, norms at identity, biases at zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let dh = config.head_dim();
        let f = config.ff_dim();
        let mut normal = |rows: usize, cols: usize, std: f64| -> Arc<Tensor> {
            let dist = Normal::new(0.0, std).expect("positive std");
            let data = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
            shared(Tensor::from_parts(rows, cols, data))
        };
        let token_embedding = normal(config.vocab_size, d, 0.02);
        let position_embedding = normal(config.max_len, d, 0.02);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let mut layers = Vec::with_capacity(config.encoder_layers);
        for _ in 0..config.encoder_layers {
            let heads = (0..config.heads)
                .map(|_| AttentionHead {
                    query: normal(d, dh, fan(d)),
                    key: normal(d, dh, fan(d)),
                    value: normal(d, dh, fan(d)),
                    output: normal(dh, d, fan(d)),
                })
                .collect();
            layers.push(EncoderLayer {
                attn_norm_scale: shared(Tensor::filled(&[1, d], 1.0)),
                attn_norm_offset: shared(Tensor::zeros(&[1, d])),
                heads,
                attn_out_bias: shared(Tensor::zeros(&[1, d])),
                ff_norm_scale: shared(Tensor::filled(&[1, d], 1.0)),
                ff_norm_offset: shared(Tensor::zeros(&[1, d])),
                ff_in: normal(d, f, fan(d)),
                ff_in_bias: shared(Tensor::zeros(&[1, f])),
                ff_out: normal(f, d, fan(f)),
                ff_out_bias: shared(Tensor::zeros(&[1, d])),
            });
        }
        Ok(Self {
            token_embedding,
            position_embedding,
            layers,
            w_key: normal(d, d, fan(d)),
            w_value: normal(d, d, fan(d)),
            w_out: normal(d, 1, fan(d)),
            class_embedding: normal(config.classes, d, fan(d)),
            decoder_norm_scale: shared(Tensor::filled(&[1, d], 1.0)),
            decoder_norm_offset: shared(Tensor::zeros(&[1, d])),
        })
    }

    /// Every tensor in the fixed serialization order: token embedding,
    /// position embedding, then per layer (attention norm scale/offset, per
    /// head query/key/value/output, attention output bias, feed-forward norm
    /// scale/offset, ff_in, ff_in_bias, ff_out, ff_out_bias), then w_key,
    /// w_value, w_out, class embedding, decoder norm scale/offset.
    pub fn tensors(&self) -> Vec<&Arc<Tensor>> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for l in &self.layers {
            out.push(&l.attn_norm_scale);
            out.push(&l.attn_norm_offset);
            for h in &l.heads {
                out.extend([&h.query, &h.key, &h.value, &h.output]);
            }
            out.extend([
                &l.attn_out_bias,
                &l.ff_norm_scale,
                &l.ff_norm_offset,
                &l.ff_in,
                &l.ff_in_bias,
                &l.ff_out,
                &l.ff_out_bias,
            ]);
        }
        out.extend([
            &self.w_key,
            &self.w_value,
            &self.w_out,
            &self.class_embedding,
            &self.decoder_norm_scale,
            &self.decoder_norm_offset,
        ]);
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.push(&mut l.attn_norm_scale);
            out.push(&mut l.attn_norm_offset);
            for h in &mut l.heads {
                out.extend([&mut h.query, &mut h.key, &mut h.value, &mut h.output]);
            }
            out.extend([
                &mut l.attn_out_bias,
                &mut l.ff_norm_scale,
                &mut l.ff_norm_offset,
                &mut l.ff_in,
                &mut l.ff_in_bias,
                &mut l.ff_out,
                &mut l.ff_out_bias,
            ]);
        }
        out.extend([
            &mut self.w_key,
            &mut self.w_value,
            &mut self.w_out,
            &mut self.class_embedding,
            &mut self.decoder_norm_scale,
            &mut self.decoder_norm_offset,
        ]);
        out
    }

    /// Expected shapes in serialization order.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<[usize; 2]> {
        let (d, dh, f) = (config.embed_dim, config.head_dim(), config.ff_dim());
        let mut out = vec![[config.vocab_size, d], [config.max_len, d]];
        for _ in 0..config.encoder_layers {
            out.extend([[1, d], [1, d]]);
            for _ in 0..config.heads {
                out.extend([[d, dh], [d, dh], [d, dh], [dh, d]]);
            }
            out.extend([[1, d], [1, d], [1, d], [d, f], [1, f], [f, d], [1, d]]);
        }
        out.extend([[d, d], [d, d], [d, 1], [config.classes, d], [1, d], [1, d]]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Rebuilds parameters from flat values laid out in serialization order.
    pub fn from_flat(config: &ModelConfig, values: &[f64]) -> Result<Self> {
        let mut params = Self::init(config, 0)?;
        let shapes = Self::expected_shapes(config);
        let total: usize = shapes.iter().map(|s| s[0] * s[1]).sum();
        if total != values.len() {
            return Err(Error::InvalidTensor(format!(
                "expected {total} parameter values, got {}",
                values.len()
            )));
        }
        let mut offset = 0;
        for (slot, shape) in params.tensors_mut().into_iter().zip(shapes) {
            let n = shape[0] * shape[1];
            *slot = Arc::new(Tensor::from_parts(
                shape[0],
                shape[1],
                values[offset..offset + n].to_vec(),
            ));
            offset += n;
        }
        Ok(params)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Permutes the rows of the class embedding: new row `i` is old row `perm[i]`.
    pub fn permute_classes(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        let c = &self.class_embedding;
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| c.row(p).to_vec()).collect();
        out.class_embedding = Arc::new(Tensor::from_rows(&rows).expect("rectangular"));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_match_expected_order() {
        let cfg = ModelConfig {
            vocab_size: 11,
            embed_dim: 4,
            encoder_layers: 2,
            heads: 2,
            classes: 3,
            max_len: 9,
            dropout: 0.0,
        };
        let p = ModelParameters::init(&cfg, 3).unwrap();
        let shapes: Vec<[usize; 2]> = p.tensors().iter().map(|t| [t.rows(), t.cols()]).collect();
        assert_eq!(shapes, ModelParameters::expected_shapes(&cfg));
        let back = ModelParameters::from_flat(&cfg, &p.to_flat()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        assert_eq!(
            ModelParameters::init(&cfg, 5).unwrap(),
            ModelParameters::init(&cfg, 5).unwrap()
        );
        assert_ne!(
            ModelParameters::init(&cfg, 5).unwrap(),
            ModelParameters::init(&cfg, 6).unwrap()
        );
    }
}
