//! Token-level feature attribution for the classifier.

mod gradient;
mod perturb;

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use gradient::{
    attention, attgrad, attingrad, deeplift_contributions, inputxgrad, integrated_gradients, rollout,
    rollout_layer, rollout_matrix, row_norms, row_norms_of_product,
};
pub use perturb::{
    exact_shapley, kernel_shap, lime, lime_kernel_width, occlusion, shapley_kernel, solve_spd, PerturbationBudget,
};

use crate::data::baseline_tokens;
use crate::error::{Error, Result};
use crate::model::{embed, forward_embeddings, predict, ModelConfig, ModelParameters};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Attention,
    Rollout,
    AttGrad,
    InputXGrad,
    IntGrad,
    DeepLift,
    Occlusion1,
    Lime,
    KernelShap,
    AttInGrad,
    Rand,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::Attention,
        Method::Rollout,
        Method::AttGrad,
        Method::InputXGrad,
        Method::IntGrad,
        Method::DeepLift,
        Method::Occlusion1,
        Method::Lime,
        Method::KernelShap,
        Method::AttInGrad,
        Method::Rand,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Attention => "attention",
            Method::Rollout => "rollout",
            Method::AttGrad => "attgrad",
            Method::InputXGrad => "inputxgrad",
            Method::IntGrad => "intgrad",
            Method::DeepLift => "deeplift",
            Method::Occlusion1 => "occlusion1",
            Method::Lime => "lime",
            Method::KernelShap => "kernelshap",
            Method::AttInGrad => "attingrad",
            Method::Rand => "rand",
        }
    }

    /// Whether the output depends on the seed.
    pub fn is_stochastic(self) -> bool {
        matches!(self, Method::Lime | Method::KernelShap | Method::Rand)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown attribution method `{s}`")))
    }
}

/// Non-negative per-token scores for one (document, code) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionVector {
    pub doc_id: String,
    pub code: String,
    /// Method name; built-in methods use [`Method::name`].
    pub method: String,
    pub seed: u64,
    pub scores: Vec<f64>,
}

impl AttributionVector {
    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.scores.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Numeric(format!(
                "attribution for {}/{} has invalid score {v}",
                self.doc_id, self.code
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionSettings {
    pub intgrad_steps: usize,
    pub rollout_renormalize: bool,
    pub budget: PerturbationBudget,
}

impl Default for AttributionSettings {
    fn default() -> Self {
        Self {
            intgrad_steps: 64,
            rollout_renormalize: true,
            budget: PerturbationBudget::default(),
        }
    }
}

/// I.i.d. uniform `[0, 1)` scores.
pub fn random_scores(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// Mixes a run seed with a document index and class into a per-pair seed.
pub fn pair_seed(seed: u64, doc: usize, class: usize) -> u64 {
    let mut z = seed ^ (doc as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (class as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn clamp(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|s| if s > 0.0 { s } else { 0.0 }).collect()
}

/// Signed scores of one method for several classes of one document.
/// Gradient and attention methods return their (already non-negative)
/// scores; occlusion, LIME and KernelSHAP return raw signed effects.
pub fn explain_signed(
    params: &ModelParameters,
    config: &ModelConfig,
    tokens: &[usize],
    classes: &[usize],
    method: Method,
    settings: &AttributionSettings,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if let Some(&j) = classes.iter().find(|&&j| j >= config.classes) {
        return Err(Error::Config(format!("class {j} out of range for {} classes", config.classes)));
    }
    let n = tokens.len();
    let masked_probs = |keep: &[bool]| -> Result<Vec<f64>> {
        let t: Vec<usize> = tokens
            .iter()
            .zip(keep)
            .map(|(&t, &k)| if k { t } else { crate::data::MASK_ID })
            .collect();
        let p = crate::model::probabilities(&t, params, config)?;
        Ok(classes.iter().map(|&j| p[j]).collect())
    };
    let per_class = |f: &dyn Fn(usize) -> Result<Vec<f64>>| classes.iter().map(|&j| f(j)).collect();
    match method {
        Method::Rand => Ok(classes.iter().map(|&j| random_scores(n, pair_seed(seed, 0, j))).collect()),
        Method::Occlusion1 => occlusion(n, masked_probs),
        Method::Lime => lime(n, &settings.budget, seed, masked_probs),
        Method::KernelShap => kernel_shap(n, &settings.budget, seed, masked_probs),
        Method::IntGrad => {
            crate::model::check_tokens(tokens, config)?;
            let x = embed(params, tokens);
            let b = embed(params, &baseline_tokens(n));
            let signed = integrated_gradients(&x, &b, settings.intgrad_steps, |point| {
                let fr = forward_embeddings(params, config, point.clone())?;
                classes.iter().map(|&j| fr.input_gradient(j)).collect()
            })?;
            Ok(signed.iter().map(row_norms).collect())
        }
        Method::DeepLift => {
            let fr = predict(tokens, params, config)?;
            let reference = forward_embeddings(params, config, embed(params, &baseline_tokens(n)))?;
            per_class(&|j| {
                let c = deeplift_contributions(&fr.tape, fr.nodes.probs, &fr.class_seed(j), fr.input, &reference.tape)?;
                Ok(row_norms(&c))
            })
        }
        _ => {
            let fr = predict(tokens, params, config)?;
            per_class(&|j| match method {
                Method::Attention => Ok(attention(&fr, j)),
                Method::Rollout => Ok(rollout(&fr, j, settings.rollout_renormalize)),
                Method::AttGrad => attgrad(&fr, j),
                Method::InputXGrad => inputxgrad(&fr, j),
                Method::AttInGrad => attingrad(&fr, j),
                _ => unreachable!("handled above"),
            })
        }
    }
}

/// Emitted non-negative scores (negative effects clamped at zero).
pub fn explain(
    params: &ModelParameters,
    config: &ModelConfig,
    tokens: &[usize],
    classes: &[usize],
    method: Method,
    settings: &AttributionSettings,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    Ok(explain_signed(params, config, tokens, classes, method, settings, seed)?
        .into_iter()
        .map(clamp)
        .collect())
}

pub fn write_jsonl(path: &Path, vectors: &[AttributionVector]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in vectors {
        serde_json::to_writer(&mut w, v)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<AttributionVector>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: AttributionVector = serde_json::from_str(&line).map_err(|e| Error::Data {
            line: i + 1,
            msg: e.to_string(),
        })?;
        v.validate()?;
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
