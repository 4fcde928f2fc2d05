//! Perturbation-based attributions over a set-valued model `v(keep)`,
//! where `keep[n]` says whether token `n` is left in place. Every
//! evaluation returns one value per requested output so that a single
//! set of perturbations serves several classes.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationBudget {
    /// Model evaluations per document for LIME and KernelSHAP.
    pub samples: usize,
    /// Keep probability of each token in LIME samples.
    pub keep_prob: f64,
    /// Ridge regularizer of the weighted regressions.
    pub ridge: f64,
}

impl Default for PerturbationBudget {
    fn default() -> Self {
        Self {
            samples: 1000,
            keep_prob: 0.5,
            ridge: 1e-3,
        }
    }
}

impl PerturbationBudget {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.samples < n + 2 {
            return Err(Error::Config(format!(
                "{} samples cannot fit a regression over {n} tokens",
                self.samples
            )));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob < 1.0) {
            return Err(Error::Config(format!("keep_prob must lie in (0, 1), got {}", self.keep_prob)));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::Config(format!("ridge must be non-negative, got {}", self.ridge)));
        }
        Ok(())
    }
}

/// Solves `A x = b` for symmetric positive definite `A` (row-major `k x k`)
/// by Cholesky factorization. `None` when `A` is not positive definite.
pub fn solve_spd(a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let k = b.len();
    let chol = DMatrix::from_row_slice(k, k, a).cholesky()?;
    let x = chol.solve(&DVector::from_column_slice(b));
    x.iter().all(|v| v.is_finite()).then(|| x.iter().copied().collect())
}

/// Weighted ridge regression `y ~ X beta`. Columns listed in `free` are
/// not penalized. Retries once with a ten times larger ridge.
fn weighted_ridge(rows: &[Vec<f64>], ys: &[Vec<f64>], w: &[f64], ridge: f64, free: &[usize]) -> Result<Vec<Vec<f64>>> {
    let k = rows.first().map_or(0, Vec::len);
    let mut xtx = vec![0.0; k * k];
    let outputs = ys.first().map_or(0, Vec::len);
    let mut xty = vec![vec![0.0; k]; outputs];
    for ((r, y), &wi) in rows.iter().zip(ys).zip(w) {
        for i in 0..k {
            if r[i] == 0.0 {
                continue;
            }
            let wr = wi * r[i];
            for j in 0..k {
                xtx[i * k + j] += wr * r[j];
            }
            for (o, t) in xty.iter_mut().zip(y) {
                o[i] += wr * t;
            }
        }
    }
    for lam in [ridge, ridge * 10.0 + 1e-10] {
        let mut a = xtx.clone();
        for i in 0..k {
            if !free.contains(&i) {
                a[i * k + i] += lam;
            }
        }
        let sols: Option<Vec<Vec<f64>>> = xty.iter().map(|b| solve_spd(&a, b)).collect();
        if let Some(s) = sols {
            return Ok(s);
        }
    }
    Err(Error::Numeric("singular weighted regression".into()))
}

/// Signed occlusion effects: `v(all) - v(all but n)` for each token and output.
pub fn occlusion(n: usize, mut v: impl FnMut(&[bool]) -> Result<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    let full = v(&vec![true; n])?;
    let mut out = vec![vec![0.0; n]; full.len()];
    let mut keep = vec![true; n];
    for i in 0..n {
        keep[i] = false;
        let y = v(&keep)?;
        keep[i] = true;
        for (o, (f, yi)) in out.iter_mut().zip(full.iter().zip(&y)) {
            o[i] = f - yi;
        }
    }
    Ok(out)
}

/// LIME kernel width for `n` tokens.
pub fn lime_kernel_width(n: usize) -> f64 {
    0.25 * (n as f64).sqrt()
}

/// Signed LIME coefficients per output. Samples keep-masks with
/// probability `keep_prob` (the unperturbed input is the first sample),
/// weights each by `exp(-d^2 / width^2)` with `d` the cosine distance to
/// the all-kept mask, and fits a ridge regression with intercept.
pub fn lime(
    n: usize,
    budget: &PerturbationBudget,
    seed: u64,
    mut v: impl FnMut(&[bool]) -> Result<Vec<f64>>,
) -> Result<Vec<Vec<f64>>> {
    budget.validate(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = lime_kernel_width(n);
    let mut rows = Vec::with_capacity(budget.samples);
    let mut ys = Vec::with_capacity(budget.samples);
    let mut ws = Vec::with_capacity(budget.samples);
    for s in 0..budget.samples {
        let keep: Vec<bool> = if s == 0 {
            vec![true; n]
        } else {
            (0..n).map(|_| rng.random::<f64>() < budget.keep_prob).collect()
        };
        let kept = keep.iter().filter(|&&k| k).count();
        let cos = if kept == 0 { 0.0 } else { (kept as f64 / n as f64).sqrt() };
        let d = 1.0 - cos;
        ws.push((-(d * d) / (width * width)).exp());
        ys.push(v(&keep)?);
        let mut r: Vec<f64> = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        r.push(1.0);
        rows.push(r);
    }
    let sol = weighted_ridge(&rows, &ys, &ws, budget.ridge, &[n])?;
    Ok(sol.into_iter().map(|mut c| {
        c.truncate(n);
        c
    }).collect())
}

fn binom(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley kernel weight of one coalition of size `s` among `n`.
pub fn shapley_kernel(n: usize, s: usize) -> f64 {
    (n - 1) as f64 / (binom(n, s) * s as f64 * (n - s) as f64)
}

/// KernelSHAP estimates per output. The empty and full coalitions are
/// enforced exactly; coalition sizes are enumerated completely while the
/// budget allows (smallest and largest sizes first) and the rest are
/// sampled in complementary pairs proportionally to the Shapley kernel.
pub fn kernel_shap(
    n: usize,
    budget: &PerturbationBudget,
    seed: u64,
    mut v: impl FnMut(&[bool]) -> Result<Vec<f64>>,
) -> Result<Vec<Vec<f64>>> {
    let empty = v(&vec![false; n])?;
    let full = v(&vec![true; n])?;
    let outputs = full.len();
    if n == 1 {
        return Ok((0..outputs).map(|o| vec![full[o] - empty[o]]).collect());
    }
    budget.validate(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // coalition -> accumulated regression weight
    let mut weights: BTreeMap<Vec<bool>, f64> = BTreeMap::new();
    let mut remaining = budget.samples.saturating_sub(2);
    let half = n / 2;
    let mut sampled_sizes = Vec::new();
    for s in 1..=half {
        let paired = s != n - s;
        let count = binom(n, s) * if paired { 2.0 } else { 1.0 };
        if count <= remaining as f64 {
            for size in if paired { vec![s, n - s] } else { vec![s] } {
                let w = shapley_kernel(n, size);
                for c in combinations(n, size) {
                    weights.insert(c, w);
                }
            }
            remaining -= count as usize;
        } else {
            sampled_sizes.extend(s..=n - s);
            break;
        }
    }
    if !sampled_sizes.is_empty() && remaining >= 2 {
        let mass: Vec<f64> = sampled_sizes
            .iter()
            .map(|&s| shapley_kernel(n, s) * binom(n, s))
            .collect();
        let total_mass: f64 = mass.iter().sum();
        let per_sample = total_mass / remaining as f64;
        for _ in 0..remaining / 2 {
            let mut u = rng.random::<f64>() * total_mass;
            let mut size = *sampled_sizes.last().unwrap();
            for (&s, &m) in sampled_sizes.iter().zip(&mass) {
                if u < m {
                    size = s;
                    break;
                }
                u -= m;
            }
            let mut c = vec![false; n];
            for i in index::sample(&mut rng, n, size) {
                c[i] = true;
            }
            let comp: Vec<bool> = c.iter().map(|b| !b).collect();
            *weights.entry(c).or_default() += per_sample;
            *weights.entry(comp).or_default() += per_sample;
        }
    }
    // eliminate the last token with the efficiency constraint
    let last = n - 1;
    let mut rows = Vec::with_capacity(weights.len());
    let mut ys = Vec::with_capacity(weights.len());
    let mut ws = Vec::with_capacity(weights.len());
    for (c, w) in &weights {
        let y = v(c)?;
        let zl = if c[last] { 1.0 } else { 0.0 };
        rows.push((0..last).map(|i| (if c[i] { 1.0 } else { 0.0 }) - zl).collect::<Vec<f64>>());
        ys.push(
            (0..outputs)
                .map(|o| y[o] - empty[o] - zl * (full[o] - empty[o]))
                .collect::<Vec<f64>>(),
        );
        ws.push(*w);
    }
    let sol = weighted_ridge(&rows, &ys, &ws, 1e-12, &[])?;
    Ok(sol
        .into_iter()
        .enumerate()
        .map(|(o, mut phi)| {
            let rest: f64 = phi.iter().sum();
            phi.push(full[o] - empty[o] - rest);
            phi
        })
        .collect())
}

fn combinations(n: usize, k: usize) -> Vec<Vec<bool>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        let mut c = vec![false; n];
        for &i in &idx {
            c[i] = true;
        }
        out.push(c);
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        if idx[i] == i + n - k {
            return out;
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Exact Shapley values by enumerating all `2^n` coalitions.
pub fn exact_shapley(n: usize, mut v: impl FnMut(&[bool]) -> f64) -> Vec<f64> {
    let vals: Vec<f64> = (0..1usize << n)
        .map(|m| v(&(0..n).map(|i| m >> i & 1 == 1).collect::<Vec<_>>()))
        .collect();
    let fact = |k: usize| (1..=k).fold(1.0, |a, i| a * i as f64);
    (0..n)
        .map(|i| {
            let mut phi = 0.0;
            for m in 0..1usize << n {
                if m >> i & 1 == 1 {
                    continue;
                }
                let s = m.count_ones() as usize;
                let w = fact(s) * fact(n - s - 1) / fact(n);
                phi += w * (vals[m | 1 << i] - vals[m]);
            }
            phi
        })
        .collect()
}
