use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::klprobe::{self, KlSample};
use crate::policy::{greedy_decode, log_softmax, sample_trajectory, PolicyParams, Temperature};
use crate::rlvr::{composite_reward, RlvrConfig};
use crate::rng;
use crate::toyenv::{strip_eos, Environment, Prompt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    /// One sample per prompt at the given temperature.
    Sampled,
}

/// Share of outputs passing each verifiable gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRates {
    pub language: f64,
    pub length: f64,
    pub format: f64,
    pub mixing: f64,
    /// Mean of the four category rates.
    pub overall: f64,
}

impl ConstraintRates {
    fn from_counts(n: usize, counts: [usize; 4]) -> Self {
        let r = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
        let (language, length, format, mixing) = (r(counts[0]), r(counts[1]), r(counts[2]), r(counts[3]));
        Self { language, length, format, mixing, overall: (language + length + format + mixing) / 4.0 }
    }
}

/// Decodes every prompt and scores the gates.
#[allow(clippy::too_many_arguments)]
pub fn eval_constraints(
    params: &PolicyParams,
    env: &Environment,
    rlvr: &RlvrConfig,
    prompts: &[Prompt],
    mode: DecodeMode,
    tau: Temperature,
    max_len: usize,
    seed: u64,
) -> Result<ConstraintRates> {
    let mut counts = [0usize; 4];
    for (i, prompt) in prompts.iter().enumerate() {
        let tokens = match mode {
            DecodeMode::Greedy => greedy_decode(params, &env.vocab, prompt, max_len),
            DecodeMode::Sampled => {
                sample_trajectory(params, &env.vocab, prompt, tau, max_len, rng::derive(seed, &[i as u64])).tokens
            }
        };
        let g = composite_reward(env, prompt, strip_eos(&tokens, env.vocab.eos), rlvr)?.gates;
        for (c, pass) in counts.iter_mut().zip([g.language, g.length, g.format, g.mixing]) {
            *c += pass as usize;
        }
    }
    Ok(ConstraintRates::from_counts(prompts.len(), counts))
}

/// Statistics of sampled outputs on the evaluation prompts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct SampleStats {
    pub entropy: f64,
    pub response_length: f64,
    pub composite: f64,
    pub kl_k1: f64,
    pub kl_k2: f64,
    pub kl_k3: f64,
}

/// One sample per prompt under the current policy. KL estimates use
/// `u = log pi_ref - log pi` per sampled token.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sample_stats(
    params: &PolicyParams,
    reference: &PolicyParams,
    env: &Environment,
    rlvr: &RlvrConfig,
    prompts: &[Prompt],
    tau: Temperature,
    max_len: usize,
    seed: u64,
) -> Result<SampleStats> {
    let (mut entropy, mut tokens, mut length, mut composite) = (0.0, 0usize, 0usize, 0.0);
    let mut kl = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        let traj = sample_trajectory(params, &env.vocab, prompt, tau, max_len, rng::derive(seed, &[i as u64]));
        entropy += traj.entropies.iter().sum::<f64>();
        tokens += traj.len();
        let out = traj.output(env.vocab.eos);
        length += out.len();
        composite += composite_reward(env, prompt, out, rlvr)?.composite;
        for ((&ctx, &a), &lp) in traj.contexts.iter().zip(&traj.tokens).zip(&traj.log_probs) {
            let u = log_softmax(reference.row(ctx), tau.get())[a] - lp;
            kl.push(KlSample::new(u)?);
        }
    }
    let n = prompts.len().max(1) as f64;
    Ok(SampleStats {
        entropy: if tokens == 0 { 0.0 } else { entropy / tokens as f64 },
        response_length: length as f64 / n,
        composite: composite / n,
        kl_k1: klprobe::k1(&kl),
        kl_k2: klprobe::k2(&kl),
        kl_k3: klprobe::k3(&kl),
    })
}
