//! Exact checks on small instances: the Gibbs fixed point of entropy-
//! regularized reward maximization, Fisher geometry of a categorical,
//! trajectory enumeration, central differences and the paraphrase probe.

use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::policy::{
    entropy_exact, log_softmax, sample_trajectory, softmax, ContextSchema, InitSpec, PolicyParams, Temperature,
    Trajectory,
};
use crate::rng;
use crate::surrogate::{importance_ratio, loss_and_grad, preset, Algorithm, KlRegime, SequenceSample, TrainConfig};
use crate::toyenv::{EnvSpec, Environment, Prompt, Script, Token, VocabDims};

/// Largest trajectory count [`enumerate_expectation`] will visit.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// `exp(R / beta) / Z`.
pub fn gibbs_target(rewards: &[f64], beta: f64) -> Result<Vec<f64>> {
    ensure(beta > 0.0 && beta.is_finite(), || format!("beta must be positive, got {beta}"))?;
    ensure(!rewards.is_empty(), || "no outcomes".into())?;
    ensure(rewards.iter().all(|r| r.is_finite()), || "rewards must be finite".into())?;
    let z: Vec<f64> = rewards.iter().map(|r| r / beta).collect();
    Ok(softmax(&z, 1.0))
}

/// Softmax policy over outcomes trained by exact gradient ascent on
/// `E[R] + beta * H`, starting from uniform logits.
pub fn fit_entropy_bandit(rewards: &[f64], beta: f64, steps: usize) -> Result<Vec<f64>> {
    ensure(beta >= 0.0 && beta.is_finite(), || format!("beta must be non-negative, got {beta}"))?;
    ensure(!rewards.is_empty(), || "no outcomes".into())?;
    let spread = rewards.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    // keeps the step below the curvature scale of both terms
    let lr = 1.0 / (spread + beta).max(1e-12);
    let mut z = vec![0.0; rewards.len()];
    for _ in 0..steps {
        let p = softmax(&z, 1.0);
        let mean_r: f64 = p.iter().zip(rewards).map(|(p, r)| p * r).sum();
        let h = entropy_exact(&p);
        for ((zk, &pk), &rk) in z.iter_mut().zip(&p).zip(rewards) {
            let dh = if pk > 0.0 { -pk * (pk.ln() + h) } else { 0.0 };
            *zk += lr * (pk * (rk - mean_r) + beta * dh);
        }
    }
    Ok(softmax(&z, 1.0))
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherReport {
    pub matrix: Vec<Vec<f64>>,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
}

/// `diag(p) - p p^T` and its spectrum.
pub fn fisher_matrix(p: &[f64]) -> Result<FisherReport> {
    ensure(!p.is_empty() && p.len() <= 64, || format!("categorical size {} outside 1..=64", p.len()))?;
    ensure(p.iter().all(|&x| (0.0..=1.0).contains(&x)), || "probabilities must lie in [0, 1]".into())?;
    let total: f64 = p.iter().sum();
    ensure((total - 1.0).abs() < 1e-9, || format!("probabilities sum to {total}, not 1"))?;
    let matrix: Vec<Vec<f64>> = (0..p.len())
        .map(|i| (0..p.len()).map(|j| if i == j { p[i] - p[i] * p[i] } else { -p[i] * p[j] }).collect())
        .collect();
    let eigenvalues = symmetric_eigenvalues(&matrix);
    Ok(FisherReport { matrix, eigenvalues })
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
#[allow(clippy::needless_range_loop)]
pub fn symmetric_eigenvalues(m: &[Vec<f64>]) -> Vec<f64> {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    eig.sort_by(f64::total_cmp);
    eig
}

/// Number of distinct trajectories of at most `max_len` tokens that stop at
/// the first EOS.
pub fn trajectory_count(vocab_size: usize, max_len: usize) -> u128 {
    let v = vocab_size as u128;
    let mut total = 0u128;
    let mut prefixes = 1u128;
    for t in 0..max_len.max(1) {
        if t + 1 == max_len.max(1) {
            total = total.saturating_add(prefixes.saturating_mul(v));
        } else {
            total = total.saturating_add(prefixes);
            prefixes = prefixes.saturating_mul(v.saturating_sub(1));
        }
    }
    total
}

/// Exact `E[f(y)]` over every trajectory of the tempered policy.
///
/// `f` receives the tokens, EOS included when emitted.
pub fn enumerate_expectation(
    params: &PolicyParams,
    eos: Token,
    tau: Temperature,
    prompt: &Prompt,
    max_len: usize,
    mut f: impl FnMut(&[Token]) -> f64,
) -> Result<f64> {
    let count = trajectory_count(params.vocab_size(), max_len);
    if count > ENUMERATION_LIMIT {
        return Err(Error::EnumerationTooLarge { count, limit: ENUMERATION_LIMIT });
    }
    let mut total = 0.0;
    let mut prefix = Vec::with_capacity(max_len);
    walk(params, eos, tau.get(), prompt, max_len.max(1), &mut prefix, 1.0, &mut |y, p| total += p * f(y));
    Ok(total)
}

#[allow(clippy::too_many_arguments)]
fn walk(
    params: &PolicyParams,
    eos: Token,
    tau: f64,
    prompt: &Prompt,
    max_len: usize,
    prefix: &mut Vec<Token>,
    mass: f64,
    visit: &mut dyn FnMut(&[Token], f64),
) {
    let t = prefix.len();
    let ctx = params.schema.context(prompt, t, prefix.last().copied());
    let probs = softmax(params.row(ctx), tau);
    for (a, &p) in probs.iter().enumerate() {
        prefix.push(a);
        if a == eos || t + 1 == max_len {
            visit(prefix, mass * p);
        } else {
            walk(params, eos, tau, prompt, max_len, prefix, mass * p, visit);
        }
        prefix.pop();
    }
}

/// Central-difference gradient of `loss` at `params`.
pub fn finite_diff_grad(mut loss: impl FnMut(&[f64]) -> f64, params: &[f64], step: f64) -> Vec<f64> {
    let mut x = params.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = x[i];
            x[i] = x0 + step;
            let up = loss(&x);
            x[i] = x0 - step;
            let down = loss(&x);
            x[i] = x0;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor)).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub tau: f64,
    pub tokens: usize,
    pub clip_fraction: f64,
    pub max_relative_error: f64,
}

/// Analytic loss gradient against central differences on one seeded
/// micro-batch: random current/behavior/reference policies, random
/// advantages, entropy bonus and a k3 penalty all active. Perturbations that
/// put a ratio within 1e-3 of a clip boundary are redrawn, since the loss
/// has a kink there.
pub fn gradcheck(seed: u64) -> Result<GradCheckReport> {
    let env =
        Environment::new(EnvSpec { vocab: VocabDims { source: 4, target: 4, markup_pairs: 1 }, ..EnvSpec::default() })?;
    let mut rng = rng::stream(rng::derive(seed, &[0x4752_4144]));
    let tau = [0.7, 1.0, 1.3][rng.gen_range(0..3)];
    let cfg = TrainConfig {
        tau: Temperature::new(tau)?,
        beta: 0.1,
        kl_regime: KlRegime::K3,
        kl_coef: 0.2,
        max_len: 8,
        ..preset(Algorithm::Vepo)
    };
    let schema = ContextSchema::new(&env.vocab, cfg.max_len, cfg.position_bucket_width)?;
    let noisy = |s: u64| PolicyParams::init(&env, schema, &InitSpec { noise: 1.0, seed: s, ..InitSpec::default() });
    let old = noisy(rng.gen());
    let reference = noisy(rng.gen());

    let prompts: Vec<Prompt> = (0..3).map(|_| env.prompt(rng.gen())).collect();
    let trajs: Vec<Trajectory> =
        prompts.iter().map(|p| sample_trajectory(&old, &env.vocab, p, cfg.tau, cfg.max_len, rng.gen())).collect();
    let advs: Vec<Vec<f64>> = trajs.iter().map(|t| (0..t.len()).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let batch: Vec<SequenceSample<'_>> = prompts
        .iter()
        .zip(&trajs)
        .zip(&advs)
        .map(|((prompt, trajectory), advantages)| SequenceSample { prompt, trajectory, advantages })
        .collect();

    let near_kink = |params: &PolicyParams| -> Result<bool> {
        for s in &batch {
            for r in importance_ratio(params, &old, cfg.tau, s.prompt, &s.trajectory.tokens, cfg.ratio_mode)? {
                if (r - (1.0 - cfg.eps_low)).abs() < 1e-3 || (r - (1.0 + cfg.eps_high)).abs() < 1e-3 {
                    return Ok(true);
                }
            }
        }
        Ok(false)
    };
    let mut params = old.clone();
    loop {
        params.logits = old.logits.iter().map(|z| z + rng.gen_range(-0.4..0.4)).collect();
        if !near_kink(&params)? {
            break;
        }
    }

    let (report, grad) = loss_and_grad(&params, &old, Some(&reference), &batch, &cfg)?;
    let mut probe = params.clone();
    let numeric = finite_diff_grad(
        |x| {
            probe.logits.copy_from_slice(x);
            loss_and_grad(&probe, &old, Some(&reference), &batch, &cfg).map(|(r, _)| r.total).unwrap_or(f64::NAN)
        },
        &params.logits,
        1e-5,
    );
    Ok(GradCheckReport {
        seed,
        tau,
        tokens: report.tokens,
        clip_fraction: report.clip_fraction,
        max_relative_error: max_relative_error(&grad.values, &numeric, 1e-6),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSnapshot {
    pub literal_prob: f64,
    pub paraphrastic_prob: f64,
    /// `paraphrastic / literal`; `None` when the literal token has no mass.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitProbeReport {
    pub source_token: Token,
    pub literal_token: Token,
    pub paraphrastic_token: Token,
    pub before: ProbeSnapshot,
    pub after: ProbeSnapshot,
}

/// Single-token prompt whose first decoding step is the probe point.
pub fn probe_prompt(source_token: Token) -> Prompt {
    Prompt { source: vec![source_token], target_script: Script::Target }
}

/// First source token whose acceptance set has a paraphrase besides the literal.
pub fn default_probe_token(env: &Environment) -> Option<Token> {
    (0..env.vocab.source_script_size).map(|i| env.vocab.source(i)).find(|&s| env.paraphrase.paraphrastic(s).is_some())
}

pub fn probe_snapshot(params: &PolicyParams, env: &Environment, source_token: Token) -> Result<ProbeSnapshot> {
    let (literal, para) = probe_tokens(env, source_token)?;
    let prompt = probe_prompt(source_token);
    let ctx = params.schema.context(&prompt, 0, None);
    let logp = log_softmax(params.row(ctx), 1.0);
    let (l, p) = (logp[literal].exp(), logp[para].exp());
    Ok(ProbeSnapshot { literal_prob: l, paraphrastic_prob: p, ratio: (l > 0.0).then(|| p / l) })
}

fn probe_tokens(env: &Environment, source_token: Token) -> Result<(Token, Token)> {
    ensure(source_token < env.vocab.source_script_size, || format!("token {source_token} is not a source token"))?;
    let literal = env.paraphrase.literal[source_token];
    let para = env
        .paraphrase
        .paraphrastic(source_token)
        .ok_or_else(|| Error::Config(format!("source token {source_token} has no paraphrase")))?;
    Ok((literal, para))
}

/// Literal vs paraphrastic mass at the first decoding step of a
/// one-token probe prompt, before and after training.
pub fn logit_probe(
    before: &PolicyParams,
    after: &PolicyParams,
    env: &Environment,
    source_token: Token,
) -> Result<LogitProbeReport> {
    let (literal_token, paraphrastic_token) = probe_tokens(env, source_token)?;
    Ok(LogitProbeReport {
        source_token,
        literal_token,
        paraphrastic_token,
        before: probe_snapshot(before, env, source_token)?,
        after: probe_snapshot(after, env, source_token)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gibbs_plateau_mass() {
        let mut r = vec![0.0; 10];
        r[..3].fill(1.0);
        let g = gibbs_target(&r, 0.25).unwrap();
        let e4 = 4f64.exp();
        assert!((g[0] - e4 / (3.0 * e4 + 7.0)).abs() < 1e-15);
        assert!((g[0] - 0.31967).abs() < 1e-5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(gibbs_target(&r, 0.0).is_err());
    }

    #[test]
    fn gibbs_limits() {
        let flat = gibbs_target(&[2.0; 5], 0.3).unwrap();
        assert!(flat.iter().all(|&p| (p - 0.2).abs() < 1e-15));
        let cold = gibbs_target(&[0.0, 1.0, 0.5], 1e-3).unwrap();
        assert!(cold[1] > 1.0 - 1e-12 && cold[0] < 1e-200);
    }

    #[test]
    fn bandit_high_temperature_is_uniform() {
        let p = fit_entropy_bandit(&[0.0, 1.0, 0.3, 0.9], 1e4, 2000).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-3));
    }

    #[test]
    fn jacobi_known_spectra() {
        let e = symmetric_eigenvalues(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        assert!((e[0] - 1.0).abs() < 1e-14 && (e[1] - 3.0).abs() < 1e-14);
        let f = fisher_matrix(&[0.5, 0.5]).unwrap();
        assert!(f.eigenvalues[0].abs() < 1e-15 && (f.eigenvalues[1] - 0.5).abs() < 1e-15);
        let one_hot = fisher_matrix(&[0.0, 1.0, 0.0]).unwrap();
        assert!(one_hot.matrix.iter().flatten().all(|&x| x == 0.0));
        assert!(one_hot.eigenvalues.iter().all(|&x| x == 0.0));
        assert!(matches!(fisher_matrix(&[0.5, 0.6]), Err(Error::Config(_))));
    }

    #[test]
    fn trajectory_counts() {
        // vocab 3, max_len 2: [e], [a,*], [b,*] -> 1 + 2*3
        assert_eq!(trajectory_count(3, 2), 7);
        assert_eq!(trajectory_count(5, 1), 5);
    }

    #[test]
    fn enumeration_guard() {
        let env = Environment::new(EnvSpec::default()).unwrap();
        let schema = ContextSchema::new(&env.vocab, 16, 4).unwrap();
        let params = PolicyParams::zeros(schema);
        let prompt = env.prompt(0);
        let r = enumerate_expectation(&params, env.vocab.eos, Temperature::ONE, &prompt, 16, |_| 1.0);
        assert!(matches!(r, Err(Error::EnumerationTooLarge { .. })));
    }

    #[test]
    fn finite_differences_of_known_functions() {
        let theta = [0.3, -1.2, 2.5];
        let g = finite_diff_grad(|x| 0.5 * x.iter().map(|v| v * v).sum::<f64>(), &theta, 1e-5);
        assert!(max_relative_error(&g, &theta, 0.0) < 1e-8);
        let c = finite_diff_grad(|_| 4.2, &theta, 1e-5);
        assert!(c.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn gradcheck_passes_one_batch() {
        let r = gradcheck(3).unwrap();
        assert!(r.tokens > 0);
        assert!(r.max_relative_error < 1e-5, "{r:?}");
    }

    #[test]
    fn uniform_policy_probe_ratio_is_one() {
        let env = Environment::new(EnvSpec::default()).unwrap();
        let schema = ContextSchema::new(&env.vocab, 16, 4).unwrap();
        let params = PolicyParams::init(&env, schema, &InitSpec::uniform());
        let tok = default_probe_token(&env).unwrap();
        let rep = logit_probe(&params, &params, &env, tok).unwrap();
        assert_eq!(rep.before.ratio, Some(1.0));
        assert_ne!(rep.literal_token, rep.paraphrastic_token);
    }
}
