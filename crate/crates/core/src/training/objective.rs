//! Per-document losses and gradients for every training strategy.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use super::config::{IgrMode, Strategy, TrainConfig};
use super::loss::{bce_node, supervised_attention_node};
use super::optim::AdamW;
use crate::autodiff::{NodeId, Tape};
use crate::data::baseline_tokens;
use crate::error::{Error, Result};
use crate::model::{build, embed, forward_embeddings, Dropout, ForwardNodes, ModelConfig, ModelParameters, ParamNodes};
use crate::tensor::Tensor;

/// One training document.
#[derive(Clone, Debug)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub labels: Vec<f64>,
    /// `(class, attention target)` for annotated codes with evidence.
    pub targets: Vec<(usize, Vec<f64>)>,
}

/// Loss and gradients of one document. `params[0]` (the token table) is
/// left empty; its gradient is `input` scattered by token id.
#[derive(Clone, Debug)]
pub struct DocGrad {
    pub loss: f64,
    pub params: Vec<Tensor>,
    pub input: Tensor,
    pub probabilities: Vec<f64>,
    pub pgd: Option<PgdOutcome>,
}

/// Frozen state some strategies need besides the trained parameters.
#[derive(Clone, Copy, Debug, Default)]
pub struct Extras<'a> {
    pub teacher: Option<&'a ModelParameters>,
    pub mask: Option<&'a MaskState>,
}

/// The reference input `B` for `n` tokens.
pub fn baseline_embeddings(params: &ModelParameters, n: usize) -> Tensor {
    embed(params, &baseline_tokens(n))
}

fn pass(
    tape: &mut Tape,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    x: NodeId,
    rng: &mut dyn RngCore,
) -> Result<ForwardNodes> {
    let dropout = (cfg.dropout > 0.0).then_some(Dropout { rng, rate: cfg.dropout });
    build(tape, pn, cfg, x, dropout)
}

fn split_grads(tape: &Tape, loss: NodeId, pn: &ParamNodes, x: NodeId) -> Result<(Vec<Tensor>, Tensor)> {
    let mut wrt = pn.nodes[1..].to_vec();
    wrt.push(x);
    let mut g = tape.backward_wrt(loss, &Tensor::scalar(1.0), &wrt)?;
    let input = g.pop().expect("input gradient");
    let mut params = Vec::with_capacity(g.len() + 1);
    params.push(Tensor::zeros(&[0, 0]));
    params.extend(g);
    Ok((params, input))
}

/// Loss and `dL/dX` of the clean BCE objective on explicit embeddings,
/// without dropout.
pub fn input_loss_grad(params: &ModelParameters, cfg: &ModelConfig, x: &Tensor, labels: &[f64]) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let xi = tape.input(x.clone());
    let pn = ParamNodes::load(&mut tape, params, false);
    let f = build(&mut tape, &pn, cfg, xi, None)?;
    let l = bce_node(&mut tape, f.probs, labels)?;
    let g = tape.backward_wrt(l, &Tensor::scalar(1.0), &[xi])?;
    Ok((tape.value(l).item()?, g.into_iter().next().expect("one root")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PgdOutcome {
    pub delta: Tensor,
    /// Largest `|delta|` seen at any inner step.
    pub max_abs: f64,
    /// Inner steps where `|delta| > epsilon` somewhere.
    pub violations: usize,
    pub steps: usize,
}

/// Maximizes a loss over `delta = epsilon * tanh(Z)` from `Z = 0` with
/// Adam ascent. `loss_grad` returns the loss and its gradient at a given
/// `delta`.
pub fn pgd_inner_max(
    rows: usize,
    cols: usize,
    epsilon: f64,
    steps: usize,
    inner_lr: f64,
    mut loss_grad: impl FnMut(&Tensor) -> Result<(f64, Tensor)>,
) -> Result<PgdOutcome> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut z = vec![0.0; rows * cols];
    let delta_of = |z: &[f64]| Tensor::from_parts(rows, cols, z.iter().map(|v| epsilon * v.tanh()).collect());
    let mut opt = AdamW::new(&[z.len()], 0.0);
    let mut delta = delta_of(&z);
    let mut max_abs = delta.max_abs();
    let mut violations = usize::from(max_abs > epsilon);
    for _ in 0..steps {
        let (_, g) = loss_grad(&delta)?;
        let ascent: Vec<f64> = z
            .iter()
            .zip(g.data())
            .map(|(zi, gi)| {
                let t = zi.tanh();
                -(gi * epsilon * (1.0 - t * t))
            })
            .collect();
        opt.update(&mut [&mut z], &[&ascent], inner_lr);
        delta = delta_of(&z);
        let m = delta.max_abs();
        max_abs = max_abs.max(m);
        if m > epsilon {
            violations += 1;
        }
    }
    assert!(violations == 0, "adversarial noise left the epsilon ball");
    Ok(PgdOutcome {
        delta,
        max_abs,
        violations,
        steps,
    })
}

/// PGD inner maximization for the classifier at embedding rows `x`.
pub fn pgd_for_model(
    params: &ModelParameters,
    cfg: &ModelConfig,
    x: &Tensor,
    labels: &[f64],
    epsilon: f64,
    steps: usize,
    inner_lr: f64,
) -> Result<PgdOutcome> {
    pgd_inner_max(x.rows(), x.cols(), epsilon, steps, inner_lr, |d| {
        let mut xd = x.clone();
        xd.add_assign(d)?;
        input_loss_grad(params, cfg, &xd, labels)
    })
}

/// Learned token mask for one document.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskState {
    /// Continuous mask per token, in `[0, 1]`.
    pub m_hat: Vec<f64>,
    /// `round(m_hat)`.
    pub mask: Vec<f64>,
    /// Reference input `B`.
    pub baseline: Tensor,
}

impl MaskState {
    pub fn masked_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m == 0.0).count() as f64 / self.mask.len() as f64
    }
}

/// `B * (1 - M) + X * M` with one mask value per row.
pub fn apply_mask(x: &Tensor, baseline: &Tensor, mask: &[f64]) -> Tensor {
    let d = x.cols();
    let data = x
        .data()
        .iter()
        .zip(baseline.data())
        .enumerate()
        .map(|(i, (&xv, &bv))| {
            let m = mask[i / d];
            bv * (1.0 - m) + xv * m
        })
        .collect();
    Tensor::from_parts(x.rows(), d, data)
}

/// Learns a sparse per-token mask keeping the student's output, by
/// minimizing `mean(M) + beta * |f(X) - f(x_m(X, M))|_1` over
/// `M = sigmoid(W)` from `M = 0.5` with Adam.
pub fn tm_learn_mask(
    params: &ModelParameters,
    cfg: &ModelConfig,
    tokens: &[usize],
    beta: f64,
    steps: usize,
    lr: f64,
) -> Result<MaskState> {
    if !(beta >= 0.0) {
        return Err(Error::Config(format!("beta must be non-negative, got {beta}")));
    }
    let n = tokens.len();
    let x = embed(params, tokens);
    let baseline = baseline_embeddings(params, n);
    let clean = forward_embeddings(params, cfg, x.clone())?.probabilities;
    let diff = x.zip_map(&baseline, |a, b| a - b)?;
    let mut w = vec![0.0; n];
    let mut opt = AdamW::new(&[n], 0.0);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let wi = tape.input(Tensor::from_parts(n, 1, w.clone()));
        let b = tape.constant(baseline.clone());
        let dn = tape.constant(diff.clone());
        let m = tape.sigmoid(wi)?;
        let moved = tape.mul(dn, m)?;
        let xm = tape.add(b, moved)?;
        let sparsity = tape.mean(m)?;
        let obj = if beta > 0.0 {
            let pn = ParamNodes::load(&mut tape, params, false);
            let f = build(&mut tape, &pn, cfg, xm, None)?;
            let c = tape.constant(Tensor::from_parts(clean.len(), 1, clean.clone()));
            let gap = tape.sub(f.probs, c)?;
            let gap = tape.l1_norm(gap)?;
            let gap = tape.scale(gap, beta)?;
            tape.add(sparsity, gap)?
        } else {
            sparsity
        };
        let g = tape.backward_wrt(obj, &Tensor::scalar(1.0), &[wi])?;
        opt.update(&mut [&mut w], &[g[0].data()], lr);
    }
    let m_hat: Vec<f64> = w.iter().map(|&v| crate::autodiff::sigmoid(v)).collect();
    let mask = m_hat.iter().map(|m| m.round()).collect();
    Ok(MaskState { m_hat, mask, baseline })
}

/// `|f_s(X) - f_t(X)|_1 + lambda3 * |f_s(X) - f_s(x_m(X, M))|_1`, evaluated
/// without dropout.
pub fn tm_distill_loss(
    student: &ModelParameters,
    teacher: &ModelParameters,
    cfg: &ModelConfig,
    tokens: &[usize],
    mask: &MaskState,
    lambda3: f64,
) -> Result<f64> {
    let x = embed(student, tokens);
    let fs = forward_embeddings(student, cfg, x.clone())?.probabilities;
    let ft = forward_embeddings(teacher, cfg, embed(teacher, tokens))?.probabilities;
    let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>();
    let mut loss = l1(&fs, &ft);
    if lambda3 != 0.0 {
        let fm = forward_embeddings(student, cfg, apply_mask(&x, &mask.baseline, &mask.mask))?.probabilities;
        loss += lambda3 * l1(&fs, &fm);
    }
    Ok(loss)
}

/// Loss and gradients of one document under `tc.strategy`.
pub fn doc_objective(
    params: &ModelParameters,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    ex: &Example,
    extras: Extras<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<DocGrad> {
    let x = embed(params, &ex.tokens);
    match tc.strategy {
        Strategy::Igr => {
            if let IgrMode::FiniteDifference { h } = tc.igr_mode {
                return igr_finite_difference(params, cfg, tc, ex, &x, h, rng);
            }
        }
        Strategy::Tm => return tm_objective(params, cfg, tc, ex, &x, extras, rng),
        _ => {}
    }
    let pgd = if tc.strategy == Strategy::Pgd && tc.lambda_pgd != 0.0 {
        Some(pgd_for_model(params, cfg, &x, &ex.labels, tc.epsilon, tc.pgd_inner_steps, tc.pgd_inner_lr)?)
    } else {
        None
    };
    let mut tape = Tape::new();
    let xi = tape.input(x);
    let pn = ParamNodes::load(&mut tape, params, true);
    let f = pass(&mut tape, &pn, cfg, xi, rng)?;
    let mut loss = bce_node(&mut tape, f.probs, &ex.labels)?;
    match tc.strategy {
        Strategy::Supervised if tc.supervised_kl_weight != 0.0 && !ex.targets.is_empty() => {
            let kl = supervised_attention_node(&mut tape, f.attention, &ex.targets, tc.supervised_kl_weight)?;
            loss = tape.add(loss, kl)?;
        }
        Strategy::Igr if tc.lambda_igr != 0.0 => {
            let g = tape.grad_graph(loss, &Tensor::scalar(1.0), &[xi])?[0];
            let norm = tape.l2_norm(g)?;
            let pen = tape.scale(norm, tc.lambda_igr)?;
            loss = tape.add(loss, pen)?;
        }
        Strategy::Pgd => {
            if let Some(out) = &pgd {
                let d = tape.constant(out.delta.clone());
                let xd = tape.add(xi, d)?;
                let fa = pass(&mut tape, &pn, cfg, xd, rng)?;
                let la = bce_node(&mut tape, fa.probs, &ex.labels)?;
                let la = tape.scale(la, tc.lambda_pgd)?;
                loss = tape.add(loss, la)?;
            }
        }
        _ => {}
    }
    let (pg, input) = split_grads(&tape, loss, &pn, xi)?;
    Ok(DocGrad {
        loss: tape.value(loss).item()?,
        params: pg,
        input,
        probabilities: tape.value(f.probs).data().to_vec(),
        pgd,
    })
}

fn igr_finite_difference(
    params: &ModelParameters,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    ex: &Example,
    x: &Tensor,
    h: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DocGrad> {
    let start = rng.clone();
    let run = |xv: &Tensor, rng: &mut ChaCha8Rng| -> Result<(f64, Vec<Tensor>, Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let xi = tape.input(xv.clone());
        let pn = ParamNodes::load(&mut tape, params, true);
        let f = pass(&mut tape, &pn, cfg, xi, rng)?;
        let l = bce_node(&mut tape, f.probs, &ex.labels)?;
        let (pg, ig) = split_grads(&tape, l, &pn, xi)?;
        Ok((tape.value(l).item()?, pg, ig, tape.value(f.probs).data().to_vec()))
    };
    let (l0, mut pg, mut ig, probs) = run(x, rng)?;
    let norm = ig.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if tc.lambda_igr == 0.0 || norm == 0.0 {
        return Ok(DocGrad {
            loss: l0,
            params: pg,
            input: ig,
            probabilities: probs,
            pgd: None,
        });
    }
    let u = ig.map(|v| v / norm);
    let shifted = |s: f64| x.zip_map(&u, |a, b| a + s * b);
    let (_, pp, ip, _) = run(&shifted(h)?, &mut start.clone())?;
    let (_, pm, im, _) = run(&shifted(-h)?, &mut start.clone())?;
    let k = tc.lambda_igr / (2.0 * h);
    for i in 1..pg.len() {
        let d = pp[i].zip_map(&pm[i], |a, b| k * (a - b))?;
        pg[i].add_assign(&d)?;
    }
    ig.add_assign(&ip.zip_map(&im, |a, b| k * (a - b))?)?;
    Ok(DocGrad {
        loss: l0 + tc.lambda_igr * norm,
        params: pg,
        input: ig,
        probabilities: probs,
        pgd: None,
    })
}

fn tm_objective(
    params: &ModelParameters,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    ex: &Example,
    x: &Tensor,
    extras: Extras<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<DocGrad> {
    let teacher = extras
        .teacher
        .ok_or_else(|| Error::Config("token masking needs a teacher model".into()))?;
    let ft = forward_embeddings(teacher, cfg, embed(teacher, &ex.tokens))?.probabilities;
    let mut tape = Tape::new();
    let xi = tape.input(x.clone());
    let pn = ParamNodes::load(&mut tape, params, true);
    let f = pass(&mut tape, &pn, cfg, xi, rng)?;
    let t = tape.constant(Tensor::from_parts(ft.len(), 1, ft));
    let gap = tape.sub(f.probs, t)?;
    let mut loss = tape.l1_norm(gap)?;
    if tc.lambda_tm != 0.0 {
        let mask = extras
            .mask
            .ok_or_else(|| Error::Config("token masking needs a learned mask".into()))?;
        let n = ex.tokens.len();
        let b = tape.constant(mask.baseline.clone());
        let m = tape.constant(Tensor::from_parts(n, 1, mask.mask.clone()));
        let keep = tape.constant(Tensor::from_parts(n, 1, mask.mask.iter().map(|v| 1.0 - v).collect()));
        let xb = tape.mul(b, keep)?;
        let xk = tape.mul(xi, m)?;
        let xm = tape.add(xb, xk)?;
        let fm = pass(&mut tape, &pn, cfg, xm, rng)?;
        let gap = tape.sub(f.probs, fm.probs)?;
        let gap = tape.l1_norm(gap)?;
        let gap = tape.scale(gap, tc.lambda_tm)?;
        loss = tape.add(loss, gap)?;
    }
    let (pg, input) = split_grads(&tape, loss, &pn, xi)?;
    Ok(DocGrad {
        loss: tape.value(loss).item()?,
        params: pg,
        input,
        probabilities: tape.value(f.probs).data().to_vec(),
        pgd: None,
    })
}
