//! Advantage estimation.
//!
//! The default estimator standardizes token rewards against a per-position
//! group mean and the standard deviation of every token reward in the local
//! micro-batch, then scales by the position-decayed entropy multiplier
//! `1 + alpha * H * gamma^t` (t zero-based). Both factors are constants with
//! respect to the policy parameters. Baselines used by the comparison
//! algorithms live here as well.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardBroadcast {
    /// Every token carries the sequence reward.
    SequenceToAllTokens,
    /// Only the final token carries it.
    TerminalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Mean over the group at each position, counting only live trajectories.
    GroupMean,
    /// Mean of the other G-1 sequence rewards.
    LeaveOneOut,
    /// Mean of every token reward in the micro-batch.
    BatchMean,
    /// Learned value head; predictions are supplied by the caller.
    Critic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdScope {
    MicroBatch,
    Group,
    /// No division at all.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvantageConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub eps_std: f64,
    pub reward_broadcast: RewardBroadcast,
    pub baseline: Baseline,
    pub std_scope: StdScope,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma: 0.95,
            eps_std: 1e-6,
            reward_broadcast: RewardBroadcast::SequenceToAllTokens,
            baseline: Baseline::GroupMean,
            std_scope: StdScope::MicroBatch,
        }
    }
}

impl AdvantageConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.gamma > 0.0 && self.gamma <= 1.0, || format!("gamma must be in (0, 1], got {}", self.gamma))?;
        ensure(self.alpha.is_finite() && self.alpha >= 0.0, || "alpha must be non-negative".into())?;
        ensure(self.eps_std > 0.0, || "eps_std must be positive".into())
    }

    /// `1 + alpha * H * gamma^t`.
    pub fn multiplier(&self, entropy: f64, t: usize) -> f64 {
        1.0 + self.alpha * entropy * self.gamma.powi(t as i32)
    }
}

/// Expands a sequence reward into per-token rewards.
pub fn token_rewards(reward: f64, len: usize, mode: RewardBroadcast) -> Vec<f64> {
    match mode {
        RewardBroadcast::SequenceToAllTokens => vec![reward; len],
        RewardBroadcast::TerminalOnly => {
            let mut r = vec![0.0; len];
            if let Some(last) = r.last_mut() {
                *last = reward;
            }
            r
        }
    }
}

/// Per-position mean over the trajectories still alive at that position.
pub fn group_baseline(rewards: &[Vec<f64>]) -> Vec<f64> {
    let max_len = rewards.iter().map(Vec::len).max().unwrap_or(0);
    (0..max_len)
        .map(|t| {
            let alive: Vec<f64> = rewards.iter().filter_map(|r| r.get(t).copied()).collect();
            shifted_mean(&alive)
        })
        .collect()
}

// Mean computed around the first value, so constant inputs are reproduced exactly.
fn shifted_mean(values: &[f64]) -> f64 {
    match values.first() {
        None => 0.0,
        Some(&x0) => x0 + values.iter().map(|x| x - x0).sum::<f64>() / values.len() as f64,
    }
}

/// Population standard deviation of every value in `rewards`.
pub fn population_std<'a>(rewards: impl IntoIterator<Item = &'a Vec<f64>> + Clone) -> f64 {
    let all: Vec<f64> = rewards.clone().into_iter().flatten().copied().collect();
    if all.is_empty() {
        return 0.0;
    }
    let n = all.len();
    let mean = shifted_mean(&all);
    let ss: f64 = rewards.into_iter().flatten().map(|r| (r - mean) * (r - mean)).sum();
    (ss / n as f64).sqrt()
}

/// Standard deviation across all token rewards of all groups in the micro-batch.
pub fn microbatch_std(groups: &[Vec<Vec<f64>>]) -> f64 {
    population_std(groups.iter().flatten())
}

/// Rollouts of one prompt as seen by the estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupInput {
    /// Training reward of each trajectory.
    pub sequence_rewards: Vec<f64>,
    /// Behavior-policy step entropies; the inner length is the trajectory length.
    pub entropies: Vec<Vec<f64>>,
    /// Value predictions per token, required by [`Baseline::Critic`].
    pub critic_values: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdvantageTensor {
    /// `[group][trajectory][t]`
    pub values: Vec<Vec<Vec<f64>>>,
    pub pre_multiplier: Vec<Vec<Vec<f64>>>,
    pub rewards: Vec<Vec<Vec<f64>>>,
    pub baselines: Vec<Vec<Vec<f64>>>,
    /// Per-position group means `B_t` (meaningful for every baseline kind).
    pub group_means: Vec<Vec<f64>>,
    pub microbatch_std: f64,
    /// Divisor actually applied in each group (excluding `eps_std`).
    pub scales: Vec<f64>,
}

impl AdvantageTensor {
    pub fn num_tokens(&self) -> usize {
        self.values.iter().flatten().map(Vec::len).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,trajectory,t,reward,baseline,pre_multiplier,advantage\n");
        for (g, group) in self.values.iter().enumerate() {
            for (i, traj) in group.iter().enumerate() {
                for (t, a) in traj.iter().enumerate() {
                    let _ = writeln!(
                        s,
                        "{g},{i},{t},{},{},{},{a}",
                        self.rewards[g][i][t], self.baselines[g][i][t], self.pre_multiplier[g][i][t]
                    );
                }
            }
        }
        s
    }
}

/// Computes advantages for one micro-batch.
pub fn estimate(groups: &[GroupInput], cfg: &AdvantageConfig) -> Result<AdvantageTensor> {
    cfg.validate()?;
    for (g, input) in groups.iter().enumerate() {
        if input.sequence_rewards.len() != input.entropies.len() {
            return Err(Error::Shape(format!("group {g}: rewards and entropies disagree in size")));
        }
        if let Some(cv) = &input.critic_values {
            let ok =
                cv.len() == input.entropies.len() && cv.iter().zip(&input.entropies).all(|(v, h)| v.len() == h.len());
            if !ok {
                return Err(Error::Shape(format!("group {g}: critic values misshaped")));
            }
        } else if cfg.baseline == Baseline::Critic {
            return Err(Error::Shape(format!("group {g}: critic baseline needs value predictions")));
        }
        if cfg.baseline == Baseline::LeaveOneOut && input.sequence_rewards.len() < 2 {
            return Err(Error::Shape("leave-one-out baseline needs at least two trajectories".into()));
        }
    }

    let rewards: Vec<Vec<Vec<f64>>> = groups
        .iter()
        .map(|g| {
            g.sequence_rewards
                .iter()
                .zip(&g.entropies)
                .map(|(&r, h)| token_rewards(r, h.len(), cfg.reward_broadcast))
                .collect()
        })
        .collect();
    let group_means: Vec<Vec<f64>> = rewards.iter().map(|r| group_baseline(r)).collect();
    let sigma = microbatch_std(&rewards);
    let batch_mean = {
        let all: Vec<f64> = rewards.iter().flatten().flatten().copied().collect();
        if all.is_empty() {
            0.0
        } else {
            all.iter().sum::<f64>() / all.len() as f64
        }
    };

    let mut out = AdvantageTensor {
        values: vec![],
        pre_multiplier: vec![],
        rewards: rewards.clone(),
        baselines: vec![],
        group_means: group_means.clone(),
        microbatch_std: sigma,
        scales: vec![],
    };

    for (gi, input) in groups.iter().enumerate() {
        let r = &rewards[gi];
        let scale = match cfg.std_scope {
            StdScope::MicroBatch => Some(sigma),
            StdScope::Group => Some(population_std(r.iter())),
            StdScope::None => None,
        };
        let g_len = r.len();
        let seq_sum: f64 = input.sequence_rewards.iter().sum();
        let mut base_g = Vec::with_capacity(g_len);
        let mut pre_g = Vec::with_capacity(g_len);
        let mut val_g = Vec::with_capacity(g_len);
        for (i, ri) in r.iter().enumerate() {
            let len = ri.len();
            let base: Vec<f64> = match cfg.baseline {
                Baseline::GroupMean => group_means[gi][..len].to_vec(),
                Baseline::LeaveOneOut => {
                    let loo = (seq_sum - input.sequence_rewards[i]) / (g_len - 1) as f64;
                    token_rewards(loo, len, cfg.reward_broadcast)
                }
                Baseline::BatchMean => vec![batch_mean; len],
                Baseline::Critic => input.critic_values.as_ref().unwrap()[i].clone(),
            };
            let pre: Vec<f64> = ri
                .iter()
                .zip(&base)
                .map(|(&rt, &b)| match scale {
                    Some(s) => (rt - b) / (s + cfg.eps_std),
                    None => rt - b,
                })
                .collect();
            let vals: Vec<f64> =
                pre.iter().zip(&input.entropies[i]).enumerate().map(|(t, (&p, &h))| p * cfg.multiplier(h, t)).collect();
            base_g.push(base);
            pre_g.push(pre);
            val_g.push(vals);
        }
        out.scales.push(scale.unwrap_or(1.0));
        out.baselines.push(base_g);
        out.pre_multiplier.push(pre_g);
        out.values.push(val_g);
    }
    if out.values.iter().flatten().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Shape("non-finite advantage".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(rewards: &[f64], lens: &[usize], h: f64) -> GroupInput {
        GroupInput {
            sequence_rewards: rewards.to_vec(),
            entropies: lens.iter().map(|&l| vec![h; l]).collect(),
            critic_values: None,
        }
    }

    #[test]
    fn broadcast_modes() {
        assert_eq!(token_rewards(1.9, 3, RewardBroadcast::SequenceToAllTokens), vec![1.9; 3]);
        assert_eq!(token_rewards(1.9, 3, RewardBroadcast::TerminalOnly), vec![0.0, 0.0, 1.9]);
        assert_eq!(
            token_rewards(1.9, 1, RewardBroadcast::TerminalOnly),
            token_rewards(1.9, 1, RewardBroadcast::SequenceToAllTokens)
        );
    }

    #[test]
    fn baseline_cases() {
        let r: Vec<Vec<f64>> = [1.0, 0.0, 1.0, 0.0].iter().map(|&x| vec![x; 3]).collect();
        assert_eq!(group_baseline(&r), vec![0.5; 3]);
        let ragged = vec![vec![1.0, 1.0], vec![3.0, 3.0, 3.0]];
        assert_eq!(group_baseline(&ragged), vec![2.0, 2.0, 3.0]);
    }

    #[test]
    fn equal_rewards_give_zero_advantage() {
        let t = estimate(&[group(&[0.7; 4], &[3, 3, 3, 3], 1.0)], &AdvantageConfig::default()).unwrap();
        assert_eq!(t.microbatch_std, 0.0);
        assert!(t.pre_multiplier.iter().flatten().flatten().all(|&p| p == 0.0));
    }

    #[test]
    fn std_examples() {
        assert_eq!(microbatch_std(&[vec![vec![0.0, 0.0], vec![1.0, 1.0]]]), 0.5);
        // two micro-batches with different spreads vs one global batch
        let a = vec![vec![vec![0.0, 0.0], vec![1.0, 1.0]]];
        let b = vec![vec![vec![10.0, 10.0], vec![14.0, 14.0]]];
        let global: Vec<Vec<Vec<f64>>> = a.iter().chain(&b).cloned().collect();
        let (sa, sb, sg) = (microbatch_std(&a), microbatch_std(&b), microbatch_std(&global));
        assert_eq!((sa, sb), (0.5, 2.0));
        assert!(sg > 5.0 && sg != sa && sg != sb);
    }

    #[test]
    fn multiplier_values() {
        let cfg = AdvantageConfig { alpha: 1.0, gamma: 0.5, ..AdvantageConfig::default() };
        assert_eq!(cfg.multiplier(1.0, 0), 2.0);
        assert_eq!(cfg.multiplier(1.0, 2), 1.25);
        let off = AdvantageConfig { alpha: 0.0, ..cfg };
        let t = estimate(&[group(&[1.0, 0.0, 2.0], &[2, 4, 3], 1.3)], &off).unwrap();
        assert_eq!(t.values, t.pre_multiplier);
    }

    #[test]
    fn leave_one_out_pairs() {
        let cfg = AdvantageConfig {
            baseline: Baseline::LeaveOneOut,
            std_scope: StdScope::None,
            alpha: 0.0,
            ..AdvantageConfig::default()
        };
        let t = estimate(&[group(&[3.0, 5.0], &[2, 1], 0.0)], &cfg).unwrap();
        assert_eq!(t.baselines[0][0], vec![5.0, 5.0]);
        assert_eq!(t.baselines[0][1], vec![3.0]);
        assert_eq!(t.values[0][0], vec![-2.0, -2.0]);
        assert!(estimate(&[group(&[1.0], &[1], 0.0)], &cfg).is_err());
    }

    #[test]
    fn critic_requires_values() {
        let cfg = AdvantageConfig { baseline: Baseline::Critic, ..AdvantageConfig::default() };
        assert!(estimate(&[group(&[1.0, 0.0], &[1, 1], 0.0)], &cfg).is_err());
        let mut g = group(&[1.0, 0.0], &[1, 2], 0.0);
        g.critic_values = Some(vec![vec![0.5], vec![0.25, 0.25]]);
        let t = estimate(&[g], &cfg).unwrap();
        assert_eq!(t.baselines[0][1], vec![0.25, 0.25]);
    }

    #[test]
    fn shape_errors() {
        let mut g = group(&[1.0, 2.0], &[1, 1], 0.0);
        g.entropies.pop();
        assert!(matches!(estimate(&[g], &AdvantageConfig::default()), Err(Error::Shape(_))));
        let bad_gamma = AdvantageConfig { gamma: 0.0, ..AdvantageConfig::default() };
        assert!(estimate(&[], &bad_gamma).is_err());
    }

    #[test]
    fn csv_dump_has_one_row_per_token() {
        let t = estimate(&[group(&[1.0, 0.0], &[2, 3], 0.5)], &AdvantageConfig::default()).unwrap();
        assert_eq!(t.to_csv().lines().count(), 1 + 5);
    }
}
