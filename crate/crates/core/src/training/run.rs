use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Strategy, TrainConfig};
use super::loss::{bce_loss, kl_target, lr_schedule};
use super::objective::{doc_objective, tm_learn_mask, Example, Extras, MaskState};
use super::optim::AdamW;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::micro_f1;
use crate::model::{predict, ModelConfig, ModelParameters};
use crate::tensor::Tensor;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub micro_f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PgdStats {
    pub inner_runs: usize,
    pub inner_steps: usize,
    pub max_abs_delta: f64,
    pub violations: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParameters,
    pub log: Vec<EpochRecord>,
    pub pgd: PgdStats,
    /// Mean masked fraction over all learned token masks.
    pub tm_masked_fraction: Option<f64>,
}

/// Training examples with attention targets for annotated evidence.
pub fn examples(data: &Dataset) -> Vec<Example> {
    (0..data.len())
        .map(|d| {
            let doc = &data.docs[d];
            let mut targets = Vec::new();
            for j in 0..data.classes() {
                if let Some(ev) = data.evidence(d, j) {
                    match kl_target(doc.len(), &ev.tokens) {
                        Some(t) => targets.push((j, t)),
                        None => log::warn!("document `{}` code `{}` has no evidence tokens; skipped", doc.id, ev.code),
                    }
                }
            }
            Example {
                tokens: doc.ids.clone(),
                labels: data.labels(d),
                targets,
            }
        })
        .collect()
}

/// Inference probabilities for every document.
pub fn predict_all(params: &ModelParameters, cfg: &ModelConfig, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    data.docs
        .iter()
        .map(|d| Ok(predict(&d.ids, params, cfg)?.probabilities))
        .collect()
}

/// Mean clean BCE and micro-F1 at 0.5 on a dataset.
pub fn evaluate(params: &ModelParameters, cfg: &ModelConfig, data: &Dataset) -> Result<(f64, f64)> {
    let probs = predict_all(params, cfg, data)?;
    let labels: Vec<Vec<f64>> = (0..data.len()).map(|d| data.labels(d)).collect();
    let mut loss = 0.0;
    for (p, y) in probs.iter().zip(&labels) {
        loss += bce_loss(p, y)?;
    }
    Ok((loss / data.len().max(1) as f64, micro_f1(&probs, &labels, 0.5)))
}

fn check_finite(loss: f64, what: &str) -> Result<()> {
    if loss.is_finite() && loss >= 0.0 {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} loss is {loss}")))
    }
}

/// Trains from `init` (or a seeded initialization) for `tc.epochs`.
/// Token masking requires `init`, which also serves as the frozen teacher.
pub fn train_run(
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    init: Option<&ModelParameters>,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    tc.validate()?;
    cfg.validate()?;
    if train.classes() != cfg.classes {
        return Err(Error::Config(format!(
            "model has {} classes, corpus has {}",
            cfg.classes,
            train.classes()
        )));
    }
    if tc.strategy == Strategy::Supervised && !train.has_evidence() {
        return Err(Error::Config("supervised training needs evidence annotations".into()));
    }
    if tc.strategy == Strategy::Tm && init.is_none() {
        return Err(Error::Config("token masking starts from a trained baseline checkpoint".into()));
    }
    let teacher = init.filter(|_| tc.strategy == Strategy::Tm).cloned();
    let mut params = match init {
        Some(p) => p.clone(),
        None => ModelParameters::init(cfg, tc.seed)?,
    };
    let data = examples(train);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_0001);
    let batches_per_epoch = data.len().div_ceil(tc.batch_size);
    let total_steps = tc.epochs * batches_per_epoch;
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut opt = AdamW::new(&sizes, tc.weight_decay);
    let mut log = Vec::new();
    let mut pgd = PgdStats::default();
    let mut masked = (0.0, 0usize);
    let mut step = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut train_probs = Vec::with_capacity(data.len());
        let mut train_labels = Vec::with_capacity(data.len());
        for batch in order.chunks(tc.batch_size) {
            let masks: Vec<Option<MaskState>> = if tc.strategy == Strategy::Tm && tc.lambda_tm != 0.0 {
                batch
                    .iter()
                    .map(|&i| {
                        let m = tm_learn_mask(&params, cfg, &data[i].tokens, tc.beta, tc.tm_mask_steps, tc.tm_mask_lr)?;
                        masked.0 += m.masked_fraction();
                        masked.1 += 1;
                        Ok(Some(m))
                    })
                    .collect::<Result<_>>()?
            } else {
                vec![None; batch.len()]
            };
            let mut acc: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            let mut batch_loss = 0.0;
            for (&i, mask) in batch.iter().zip(&masks) {
                let ex = &data[i];
                let extras = Extras {
                    teacher: teacher.as_ref(),
                    mask: mask.as_ref(),
                };
                let g = doc_objective(&params, cfg, tc, ex, extras, &mut rng)?;
                check_finite(g.loss, tc.strategy.name())?;
                if let Some(o) = &g.pgd {
                    pgd.inner_runs += 1;
                    pgd.inner_steps += o.steps;
                    pgd.max_abs_delta = pgd.max_abs_delta.max(o.max_abs);
                    pgd.violations += o.violations;
                }
                batch_loss += g.loss;
                for (a, d) in acc.iter_mut().zip(&g.params).skip(1) {
                    a.add_assign(d)?;
                }
                let table = &mut acc[0];
                for (n, &t) in ex.tokens.iter().enumerate() {
                    for (a, v) in table.row_mut(t).iter_mut().zip(g.input.row(n)) {
                        *a += v;
                    }
                }
                train_probs.push(g.probabilities);
                train_labels.push(ex.labels.clone());
            }
            let k = 1.0 / batch.len() as f64;
            for a in &mut acc {
                a.scale(k);
            }
            step += 1;
            let lr = lr_schedule(step, total_steps, tc.warmup_fraction, tc.learning_rate);
            let grads: Vec<&[f64]> = acc.iter().map(|t| t.data()).collect();
            let mut slots = params.tensors_mut();
            let mut values: Vec<&mut [f64]> = slots.iter_mut().map(|t| Arc::make_mut(t).data_mut()).collect();
            opt.update(&mut values, &grads, lr);
            epoch_loss += batch_loss;
        }
        if !params.is_finite() {
            return Err(Error::Numeric(format!("parameters diverged in epoch {epoch}")));
        }
        let mut records = vec![EpochRecord {
            epoch,
            split: "train".into(),
            loss: epoch_loss / data.len().max(1) as f64,
            micro_f1: micro_f1(&train_probs, &train_labels, 0.5),
        }];
        if let Some(v) = val {
            let (loss, f1) = evaluate(&params, cfg, v)?;
            records.push(EpochRecord {
                epoch,
                split: "val".into(),
                loss,
                micro_f1: f1,
            });
        }
        for r in records {
            log::info!("epoch {} {} loss {:.5} micro-F1 {:.4}", r.epoch, r.split, r.loss, r.micro_f1);
            if let Some(w) = log_sink.as_mut() {
                serde_json::to_writer(&mut *w, &r)?;
                w.write_all(b"\n")?;
            }
            log.push(r);
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        pgd,
        tm_masked_fraction: (masked.1 > 0).then(|| masked.0 / masked.1 as f64),
    })
}
