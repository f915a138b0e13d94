use serde::{Deserialize, Serialize};

use super::{KlRegime, LossNorm, RatioMode, TrainConfig};
use crate::error::{Error, Result};
use crate::klprobe::Estimator;
use crate::policy::{entropy_exact, entropy_grad, log_softmax, Gradient, PolicyParams, Temperature, Trajectory};
use crate::toyenv::{Prompt, Token};

/// One behavior trajectory with its (constant) per-token advantages.
#[derive(Debug, Clone, Copy)]
pub struct SequenceSample<'a> {
    pub prompt: &'a Prompt,
    pub trajectory: &'a Trajectory,
    pub advantages: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Normalized sum of clipped terms.
    pub surrogate: f64,
    /// Normalized sum of current-policy step entropies.
    pub entropy: f64,
    pub kl: f64,
    /// `-surrogate - beta * entropy + kl_coef * kl`
    pub total: f64,
    pub tokens: usize,
    pub clip_fraction: f64,
}

/// `min(r A, clip(r, 1 - eps_low, 1 + eps_high) A)`
pub fn clipped_term(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps_low, 1.0 + eps_high);
    (ratio * advantage).min(clipped * advantage)
}

/// Soft length penalty: zero up to `threshold`, then `-slope` per extra token.
pub fn dapo_overlong_penalty(output_len: usize, threshold: usize, slope: f64) -> f64 {
    -slope * output_len.saturating_sub(threshold) as f64
}

fn ratio_for(mode: RatioMode, tau: f64, new_row: &[f64], old_row: &[f64], action: Token) -> Result<f64> {
    match mode {
        RatioMode::Exact => {
            let old = log_softmax(old_row, tau)[action];
            if !old.is_finite() {
                return Err(Error::ZeroProbability { token: action });
            }
            Ok((log_softmax(new_row, tau)[action] - old).exp())
        }
        RatioMode::Approx => {
            let old = log_softmax(old_row, 1.0)[action];
            if !old.is_finite() {
                return Err(Error::ZeroProbability { token: action });
            }
            Ok(((log_softmax(new_row, 1.0)[action] - old) / tau).exp())
        }
    }
}

/// Per-token importance ratios of `tokens` between two policies.
pub fn importance_ratio(
    new: &PolicyParams,
    old: &PolicyParams,
    tau: Temperature,
    prompt: &Prompt,
    tokens: &[Token],
    mode: RatioMode,
) -> Result<Vec<f64>> {
    if let Some(&token) = tokens.iter().find(|&&t| t >= new.vocab_size()) {
        return Err(Error::VocabMismatch { token, size: new.vocab_size() });
    }
    new.schema
        .contexts(prompt, tokens)
        .into_iter()
        .zip(tokens)
        .map(|(ctx, &a)| ratio_for(mode, tau.get(), new.row(ctx), old.row(ctx), a))
        .collect()
}

/// Mean per-token KL estimate between `params` and `reference` on the
/// sampled tokens, with `u = log pi_ref - log pi`.
pub fn kl_penalty(
    params: &PolicyParams,
    reference: &PolicyParams,
    tau: Temperature,
    samples: &[(&Prompt, &[Token])],
    regime: KlRegime,
) -> f64 {
    let est = match regime {
        KlRegime::None => return 0.0,
        KlRegime::K2 => Estimator::K2,
        KlRegime::K3 => Estimator::K3,
    };
    let (mut sum, mut n) = (0.0, 0usize);
    for (prompt, tokens) in samples {
        for (ctx, &a) in params.schema.contexts(prompt, tokens).into_iter().zip(*tokens) {
            let u = log_softmax(reference.row(ctx), tau.get())[a] - log_softmax(params.row(ctx), tau.get())[a];
            sum += est.term(u);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Loss of one micro-batch and its exact gradient with respect to `params`.
///
/// Advantages and the behavior policy are constants. The entropy bonus and
/// KL penalty are differentiated through the current policy. `reference`
/// is required whenever the KL regime is not `None`.
pub fn loss_and_grad(
    params: &PolicyParams,
    old: &PolicyParams,
    reference: Option<&PolicyParams>,
    batch: &[SequenceSample<'_>],
    cfg: &TrainConfig,
) -> Result<(LossReport, Gradient)> {
    let tokens: usize = batch.iter().map(|s| s.trajectory.len()).sum();
    if tokens == 0 {
        return Err(Error::EmptyBatch);
    }
    let kl_est = match cfg.kl_regime {
        KlRegime::None => None,
        KlRegime::K2 => Some(Estimator::K2),
        KlRegime::K3 => Some(Estimator::K3),
    };
    let reference = match (kl_est, reference) {
        (Some(_), None) => return Err(Error::Config("KL regime needs a reference policy".into())),
        (_, r) => r,
    };
    let tau = cfg.tau.get();
    let sequences = batch.iter().filter(|s| !s.trajectory.is_empty()).count() as f64;

    let mut grad = Gradient::zeros_like(params);
    let (mut surrogate, mut entropy, mut kl) = (0.0, 0.0, 0.0);
    let mut clipped = 0usize;

    for sample in batch {
        let traj = sample.trajectory;
        if sample.advantages.len() != traj.len() {
            return Err(Error::Shape("advantages and trajectory differ in length".into()));
        }
        if traj.is_empty() {
            continue;
        }
        let w = match cfg.loss_norm {
            LossNorm::Token => 1.0 / tokens as f64,
            LossNorm::Sequence => 1.0 / (sequences * traj.len() as f64),
        };
        let contexts = params.schema.contexts(sample.prompt, &traj.tokens);
        for ((&ctx, &a), &adv) in contexts.iter().zip(&traj.tokens).zip(sample.advantages) {
            let row = params.row(ctx);
            let logp = log_softmax(row, tau);
            let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();

            let r = ratio_for(cfg.ratio_mode, tau, row, old.row(ctx), a)?;
            let unclipped = r * adv;
            let term = clipped_term(r, adv, cfg.eps_low, cfg.eps_high);
            surrogate += w * term;
            if term < unclipped {
                clipped += 1;
            } else if adv != 0.0 {
                // d(-w r A)/dz
                match cfg.ratio_mode {
                    RatioMode::Exact => grad.add_score(ctx, &probs, a, tau, -w * adv * r),
                    RatioMode::Approx => {
                        let p1: Vec<f64> = log_softmax(row, 1.0).into_iter().map(f64::exp).collect();
                        grad.add_score(ctx, &p1, a, tau, -w * adv * r);
                    }
                }
            }

            if cfg.beta != 0.0 {
                entropy += w * entropy_exact(&probs);
                for (g, dh) in grad.row_mut(ctx).iter_mut().zip(entropy_grad(&probs, tau)) {
                    *g -= cfg.beta * w * dh;
                }
            } else {
                entropy += w * entropy_exact(&probs);
            }

            if let (Some(est), Some(reference)) = (kl_est, reference) {
                let u = log_softmax(reference.row(ctx), tau)[a] - logp[a];
                kl += w * est.term(u);
                // du/dz = -d log pi(a)/dz
                grad.add_score(ctx, &probs, a, tau, -cfg.kl_coef * w * est.term_derivative(u));
            }
        }
    }

    let total = -surrogate - cfg.beta * entropy + cfg.kl_coef * kl;
    let report = LossReport { surrogate, entropy, kl, total, tokens, clip_fraction: clipped as f64 / tokens as f64 };
    Ok((report, grad))
}

#[cfg(test)]
mod tests {
    use super::super::{preset, Algorithm};
    use super::*;
    use crate::policy::{sample_trajectory, ContextSchema, InitSpec};
    use crate::toyenv::{EnvSpec, Environment};

    #[test]
    fn clip_cases() {
        assert!((clipped_term(1.5, 1.0, 0.2, 0.28) - 1.28).abs() < 1e-15);
        assert!((clipped_term(0.5, -1.0, 0.2, 0.28) + 0.8).abs() < 1e-15);
        for r in [0.81, 1.0, 1.2, 1.27] {
            assert_eq!(clipped_term(r, 0.7, 0.2, 0.28), r * 0.7);
            assert_eq!(clipped_term(r, -0.7, 0.2, 0.28), r * -0.7);
        }
        // pessimistic side is kept unclipped
        assert_eq!(clipped_term(1.5, -1.0, 0.2, 0.28), -1.5);
        assert_eq!(clipped_term(0.5, 1.0, 0.2, 0.28), 0.5);
    }

    #[test]
    fn overlong_cases() {
        assert_eq!(dapo_overlong_penalty(8, 8, 0.25), 0.0);
        assert_eq!(dapo_overlong_penalty(3, 8, 0.25), 0.0);
        assert_eq!(dapo_overlong_penalty(12, 8, 0.25), -1.0);
    }

    fn fixture() -> (Environment, PolicyParams, Vec<Prompt>, Vec<Trajectory>) {
        let env = Environment::new(EnvSpec::default()).unwrap();
        let schema = ContextSchema::new(&env.vocab, 8, 4).unwrap();
        let params = PolicyParams::init(&env, schema, &InitSpec { noise: 1.0, seed: 5, ..InitSpec::uniform() });
        let prompts: Vec<Prompt> = (0..2).map(|s| env.prompt(s)).collect();
        let trajs = vec![
            sample_trajectory(&params, &env.vocab, &prompts[0], Temperature::ONE, 2, 1),
            sample_trajectory(&params, &env.vocab, &prompts[1], Temperature::ONE, 6, 2),
        ];
        (env, params, prompts, trajs)
    }

    #[test]
    fn identical_policies_have_unit_ratios() {
        let (_, params, prompts, trajs) = fixture();
        for mode in [RatioMode::Exact, RatioMode::Approx] {
            let tau = Temperature::new(0.6).unwrap();
            let r = importance_ratio(&params, &params, tau, &prompts[1], &trajs[1].tokens, mode).unwrap();
            assert!(r.iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn approx_matches_exact_at_unit_temperature() {
        let (_, params, prompts, trajs) = fixture();
        let mut new = params.clone();
        new.logits.iter_mut().enumerate().for_each(|(i, z)| *z += 0.01 * (i % 7) as f64);
        let e =
            importance_ratio(&new, &params, Temperature::ONE, &prompts[1], &trajs[1].tokens, RatioMode::Exact).unwrap();
        let a = importance_ratio(&new, &params, Temperature::ONE, &prompts[1], &trajs[1].tokens, RatioMode::Approx)
            .unwrap();
        for (x, y) in e.iter().zip(&a) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn token_weights_are_uniform() {
        let (_, params, prompts, trajs) = fixture();
        assert_eq!(trajs[0].len() + trajs[1].len(), trajs[0].len() + trajs[1].len());
        let cfg = TrainConfig { beta: 0.0, ..preset(Algorithm::Vepo) };
        // unit advantages on one token at a time: each contributes 1/N
        let n = trajs[0].len() + trajs[1].len();
        let a0 = vec![1.0; trajs[0].len()];
        let z1 = vec![0.0; trajs[1].len()];
        let batch = [
            SequenceSample { prompt: &prompts[0], trajectory: &trajs[0], advantages: &a0 },
            SequenceSample { prompt: &prompts[1], trajectory: &trajs[1], advantages: &z1 },
        ];
        let (rep, _) = loss_and_grad(&params, &params, None, &batch, &cfg).unwrap();
        assert!((rep.surrogate - trajs[0].len() as f64 / n as f64).abs() < 1e-15);
        assert_eq!(rep.tokens, n);

        let zero0 = vec![0.0; trajs[0].len()];
        let batch = [
            SequenceSample { prompt: &prompts[0], trajectory: &trajs[0], advantages: &zero0 },
            SequenceSample { prompt: &prompts[1], trajectory: &trajs[1], advantages: &z1 },
        ];
        let (rep, _) = loss_and_grad(&params, &params, None, &batch, &cfg).unwrap();
        assert_eq!(rep.surrogate, 0.0);
        assert_eq!(rep.total, 0.0);
    }

    #[test]
    fn empty_batch_errors() {
        let (_, params, _, _) = fixture();
        assert!(matches!(loss_and_grad(&params, &params, None, &[], &preset(Algorithm::Vepo)), Err(Error::EmptyBatch)));
    }

    #[test]
    fn kl_needs_reference() {
        let (_, params, prompts, trajs) = fixture();
        let adv = vec![0.5; trajs[0].len()];
        let batch = [SequenceSample { prompt: &prompts[0], trajectory: &trajs[0], advantages: &adv }];
        let cfg = TrainConfig { kl_regime: KlRegime::K3, ..preset(Algorithm::Vepo) };
        assert!(loss_and_grad(&params, &params, None, &batch, &cfg).is_err());
        let (rep, _) = loss_and_grad(&params, &params, Some(&params), &batch, &cfg).unwrap();
        assert_eq!(rep.kl, 0.0);
    }

    #[test]
    fn kl_penalty_identity_and_sign() {
        let (_, params, prompts, trajs) = fixture();
        let samples: Vec<(&Prompt, &[Token])> =
            prompts.iter().zip(&trajs).map(|(p, t)| (p, t.tokens.as_slice())).collect();
        for regime in KlRegime::ALL {
            assert_eq!(kl_penalty(&params, &params, Temperature::ONE, &samples, regime), 0.0);
        }
        let mut other = params.clone();
        other.logits.iter_mut().enumerate().for_each(|(i, z)| *z -= 0.3 * (i % 5) as f64);
        assert!(kl_penalty(&other, &params, Temperature::ONE, &samples, KlRegime::K3) >= 0.0);
        assert!(kl_penalty(&other, &params, Temperature::ONE, &samples, KlRegime::K2) >= 0.0);
    }
}
