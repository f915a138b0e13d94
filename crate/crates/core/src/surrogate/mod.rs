//! Loss engine: tempered importance ratios, asymmetric clipping, loss
//! normalization, entropy bonus, KL regimes, updates and algorithm presets.

mod loss;
mod optim;

pub use loss::{
    clipped_term, dapo_overlong_penalty, importance_ratio, kl_penalty, loss_and_grad, LossReport, SequenceSample,
};
pub use optim::{Optimizer, OptimizerMode};

use serde::{Deserialize, Serialize};

use crate::advantage::{AdvantageConfig, Baseline, StdScope};
use crate::error::{ensure, Result};
use crate::policy::Temperature;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Vepo,
    Grpo,
    Dapo,
    Rloo,
    #[serde(rename = "reinforce_pp")]
    ReinforcePlusPlus,
    Ppo,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::Vepo,
        Algorithm::Grpo,
        Algorithm::Dapo,
        Algorithm::Rloo,
        Algorithm::ReinforcePlusPlus,
        Algorithm::Ppo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Vepo => "vepo",
            Algorithm::Grpo => "grpo",
            Algorithm::Dapo => "dapo",
            Algorithm::Rloo => "rloo",
            Algorithm::ReinforcePlusPlus => "reinforce_pp",
            Algorithm::Ppo => "ppo",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Algorithm::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| format!("unknown algorithm {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlRegime {
    None,
    K2,
    K3,
}

impl KlRegime {
    pub const ALL: [KlRegime; 3] = [KlRegime::None, KlRegime::K2, KlRegime::K3];

    pub fn name(self) -> &'static str {
        match self {
            KlRegime::None => "none",
            KlRegime::K2 => "k2",
            KlRegime::K3 => "k3",
        }
    }
}

impl std::str::FromStr for KlRegime {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        KlRegime::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| format!("unknown KL regime {s:?}"))
    }
}

/// How clipped terms are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    /// Divide the sum over every token by the micro-batch token count.
    Token,
    /// Average within each sequence, then across sequences.
    Sequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    /// Ratio of the two fully normalized tempered distributions.
    Exact,
    /// `exp((log pi - log pi_old) / tau)` on untempered log-probabilities.
    Approx,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlongPenalty {
    pub threshold: usize,
    pub slope: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub tau: Temperature,
    pub eps_low: f64,
    pub eps_high: f64,
    /// Global entropy bonus coefficient.
    pub beta: f64,
    pub advantage: AdvantageConfig,
    /// Trajectories kept per prompt.
    pub group_size: usize,
    /// Trajectories sampled per prompt before filtering.
    pub candidates: usize,
    /// Rank candidates by verifiable reward and keep the top group; when
    /// off, the first `group_size` samples are kept.
    pub filter: bool,
    pub kl_regime: KlRegime,
    pub kl_coef: f64,
    pub loss_norm: LossNorm,
    pub ratio_mode: RatioMode,
    pub step_size: f64,
    pub optimizer: OptimizerMode,
    /// Gradient steps per batch of rollouts.
    pub epochs: usize,
    pub max_len: usize,
    pub position_bucket_width: usize,
    pub overlong: Option<OverlongPenalty>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        preset(Algorithm::Vepo)
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.advantage.validate()?;
        ensure(self.eps_low > 0.0 && self.eps_low < 1.0, || {
            format!("eps_low must be in (0, 1), got {}", self.eps_low)
        })?;
        ensure(self.eps_high > 0.0 && self.eps_high < 1.0, || {
            format!("eps_high must be in (0, 1), got {}", self.eps_high)
        })?;
        ensure(self.beta.is_finite() && self.beta >= 0.0, || "beta must be non-negative".into())?;
        ensure(self.kl_coef.is_finite() && self.kl_coef >= 0.0, || "kl_coef must be non-negative".into())?;
        ensure(self.group_size >= 1, || "group_size must be at least 1".into())?;
        ensure(self.group_size <= self.candidates, || {
            format!("group_size {} exceeds candidates {}", self.group_size, self.candidates)
        })?;
        ensure(self.step_size.is_finite() && self.step_size >= 0.0, || "step_size must be non-negative".into())?;
        ensure(self.epochs >= 1, || "epochs must be at least 1".into())?;
        ensure(self.max_len >= 1, || "max_len must be at least 1".into())?;
        ensure(self.position_bucket_width >= 1, || "position_bucket_width must be at least 1".into())?;
        if self.advantage.baseline == Baseline::LeaveOneOut {
            ensure(self.group_size >= 2, || "leave-one-out needs group_size >= 2".into())?;
        }
        if let Some(o) = self.overlong {
            ensure(o.slope.is_finite() && o.slope >= 0.0, || "overlong slope must be non-negative".into())?;
        }
        Ok(())
    }
}

/// Full configuration for an algorithm. Shared knobs (temperature, group
/// sizes, step size, lengths) are identical across presets.
pub fn preset(algorithm: Algorithm) -> TrainConfig {
    let vepo = TrainConfig {
        algorithm: Algorithm::Vepo,
        tau: Temperature::ONE,
        eps_low: 0.20,
        eps_high: 0.28,
        beta: 0.01,
        advantage: AdvantageConfig::default(),
        group_size: 8,
        candidates: 16,
        filter: true,
        kl_regime: KlRegime::None,
        kl_coef: 0.05,
        loss_norm: LossNorm::Token,
        ratio_mode: RatioMode::Exact,
        step_size: 0.05,
        optimizer: OptimizerMode::Sgd,
        epochs: 1,
        max_len: 16,
        position_bucket_width: 4,
        overlong: None,
    };
    let plain = |baseline, std_scope| AdvantageConfig { alpha: 0.0, baseline, std_scope, ..vepo.advantage };
    match algorithm {
        Algorithm::Vepo => vepo,
        Algorithm::Grpo => TrainConfig {
            algorithm,
            eps_high: 0.20,
            beta: 0.0,
            advantage: plain(Baseline::GroupMean, StdScope::Group),
            filter: false,
            loss_norm: LossNorm::Sequence,
            ..vepo
        },
        Algorithm::Dapo => TrainConfig {
            algorithm,
            beta: 0.0,
            advantage: plain(Baseline::GroupMean, StdScope::Group),
            filter: false,
            overlong: Some(OverlongPenalty { threshold: vepo.max_len * 3 / 4, slope: 0.25 }),
            ..vepo
        },
        Algorithm::Rloo => TrainConfig {
            algorithm,
            eps_high: 0.20,
            beta: 0.0,
            advantage: plain(Baseline::LeaveOneOut, StdScope::None),
            filter: false,
            loss_norm: LossNorm::Sequence,
            ..vepo
        },
        Algorithm::ReinforcePlusPlus => TrainConfig {
            algorithm,
            eps_high: 0.20,
            beta: 0.0,
            advantage: plain(Baseline::BatchMean, StdScope::MicroBatch),
            filter: false,
            ..vepo
        },
        Algorithm::Ppo => TrainConfig {
            algorithm,
            eps_high: 0.20,
            beta: 0.0,
            advantage: plain(Baseline::Critic, StdScope::MicroBatch),
            filter: false,
            ..vepo
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for a in Algorithm::ALL {
            let c = preset(a);
            c.validate().unwrap();
            assert_eq!(c.algorithm, a);
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
    }

    #[test]
    fn vepo_collapses_to_token_normalized_grpo() {
        let mut v = preset(Algorithm::Vepo);
        v.advantage.alpha = 0.0;
        v.advantage.gamma = 1.0;
        v.advantage.std_scope = StdScope::Group;
        v.beta = 0.0;
        v.eps_high = v.eps_low;
        v.filter = false;
        let g = TrainConfig { loss_norm: LossNorm::Token, ..preset(Algorithm::Grpo) };
        // gamma is inert once alpha = 0
        assert_eq!(v.advantage.multiplier(2.0, 3), 1.0);
        let v = TrainConfig {
            algorithm: Algorithm::Grpo,
            advantage: AdvantageConfig { gamma: g.advantage.gamma, ..v.advantage },
            ..v
        };
        assert_eq!(v, g);
    }

    #[test]
    fn validation_errors() {
        let mut c = preset(Algorithm::Vepo);
        c.group_size = 20;
        assert!(c.validate().is_err());
        let mut c = preset(Algorithm::Vepo);
        c.eps_low = 1.0;
        assert!(c.validate().is_err());
        let mut c = preset(Algorithm::Rloo);
        c.group_size = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_round_trip() {
        for a in Algorithm::ALL {
            let c = preset(a);
            let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
            assert_eq!(back, c);
        }
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"tau": 0}"#).is_err());
    }
}
