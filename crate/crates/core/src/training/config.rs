use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Loss weights and learning rates found by random search for the
/// full-scale setting. The desk defaults in [`TrainConfig::default`] keep
/// the loss weights and scale the learning rates up for a small encoder
/// trained from scratch.
pub mod reference {
    pub const LEARNING_RATE: f64 = 5e-5;
    pub const TM_LEARNING_RATE: f64 = 1e-5;
    pub const EPOCHS: usize = 20;
    pub const DROPOUT: f64 = 0.2;
    pub const LAMBDA_IGR: f64 = 1e-5;
    pub const LAMBDA_PGD: f64 = 0.5;
    pub const LAMBDA_TM: f64 = 0.5;
    pub const EPSILON: f64 = 1e-5;
    pub const BETA: f64 = 0.01;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Baseline,
    Supervised,
    Igr,
    Pgd,
    Tm,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Baseline,
        Strategy::Supervised,
        Strategy::Igr,
        Strategy::Pgd,
        Strategy::Tm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Supervised => "supervised",
            Strategy::Igr => "igr",
            Strategy::Pgd => "pgd",
            Strategy::Tm => "tm",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// How the gradient of the IGR penalty is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IgrMode {
    /// Double backward through the tape.
    Exact,
    /// Central difference of parameter gradients along the normalized
    /// input gradient, with step `h`.
    FiniteDifference { h: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub lambda_igr: f64,
    pub lambda_pgd: f64,
    pub lambda_tm: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub pgd_inner_steps: usize,
    pub pgd_inner_lr: f64,
    pub tm_mask_steps: usize,
    pub tm_mask_lr: f64,
    pub supervised_kl_weight: f64,
    pub igr_mode: IgrMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Baseline,
            learning_rate: 5e-4,
            epochs: reference::EPOCHS,
            batch_size: 16,
            warmup_fraction: 0.1,
            weight_decay: 0.0,
            lambda_igr: reference::LAMBDA_IGR,
            lambda_pgd: reference::LAMBDA_PGD,
            lambda_tm: reference::LAMBDA_TM,
            beta: reference::BETA,
            epsilon: reference::EPSILON,
            pgd_inner_steps: 3,
            pgd_inner_lr: 0.1,
            tm_mask_steps: 50,
            tm_mask_lr: 0.1,
            supervised_kl_weight: 1.0,
            igr_mode: IgrMode::Exact,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Default learning rate of a strategy at desk scale.
    pub fn desk_learning_rate(strategy: Strategy) -> f64 {
        match strategy {
            Strategy::Tm => 1e-4,
            _ => 5e-4,
        }
    }

    pub fn for_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            learning_rate: Self::desk_learning_rate(strategy),
            epochs: if strategy == Strategy::Tm { 1 } else { reference::EPOCHS },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("lambda_igr", self.lambda_igr),
            ("lambda_pgd", self.lambda_pgd),
            ("lambda_tm", self.lambda_tm),
            ("beta", self.beta),
            ("supervised_kl_weight", self.supervised_kl_weight),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.strategy == Strategy::Pgd && !(self.epsilon > 0.0) {
            return fail(format!("epsilon must be positive for pgd, got {}", self.epsilon));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return fail(format!("warmup_fraction must lie in [0, 1], got {}", self.warmup_fraction));
        }
        if let IgrMode::FiniteDifference { h } = self.igr_mode {
            if !(h > 0.0) {
                return fail(format!("finite-difference step must be positive, got {h}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        TrainConfig::default().validate().unwrap();
        assert!(TrainConfig { lambda_igr: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { strategy: Strategy::Pgd, epsilon: 0.0, ..Default::default() }
            .validate()
            .is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        let json = serde_json::to_string(&Strategy::Igr).unwrap();
        assert_eq!(json, "\"igr\"");
    }
}
