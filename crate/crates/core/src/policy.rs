//! Tabular contextual-softmax policy.
//!
//! The logit table is indexed by a context built from three pieces: the
//! source token aligned with the current output position (or a past-the-end
//! marker), the script class of the previous output token, and a position
//! bucket. The step distribution is `softmax(logits / tau)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng;
use crate::toyenv::{Environment, Prompt, Token, Vocab, VocabDims};

/// Sampling and loss temperature.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub const ONE: Temperature = Temperature(1.0);

    pub fn new(tau: f64) -> Result<Self> {
        ensure(tau.is_finite() && tau > 0.0, || format!("temperature must be positive, got {tau}"))?;
        Ok(Self(tau))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// Script class of the previous output token.
const PREV_BUCKETS: usize = 4;
const PREV_START: usize = 0;
const PREV_SOURCE: usize = 1;
const PREV_TARGET: usize = 2;
const PREV_STRUCTURAL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSchema {
    pub vocab: VocabDims,
    /// One slot per source-script token, one per markup token, plus past-the-end.
    pub source_slots: usize,
    pub prev_buckets: usize,
    pub position_bucket_width: usize,
    pub position_buckets: usize,
}

impl ContextSchema {
    pub fn new(vocab: &Vocab, max_len: usize, position_bucket_width: usize) -> Result<Self> {
        ensure(max_len >= 1, || "max_len must be at least 1".into())?;
        ensure(position_bucket_width >= 1, || "position bucket width must be at least 1".into())?;
        Ok(Self {
            vocab: vocab.dims(),
            source_slots: vocab.source_script_size + 2 * vocab.markup_pairs + 1,
            prev_buckets: PREV_BUCKETS,
            position_bucket_width,
            position_buckets: max_len.div_ceil(position_bucket_width),
        })
    }

    pub fn num_contexts(&self) -> usize {
        self.source_slots * self.prev_buckets * self.position_buckets
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.source + self.vocab.target + 2 * self.vocab.markup_pairs + 1
    }

    pub fn past_end_slot(&self) -> usize {
        self.source_slots - 1
    }

    /// Slot of the source token aligned with output position `t`.
    pub fn aligned_slot(&self, prompt: &Prompt, t: usize) -> usize {
        match prompt.source.get(t) {
            None => self.past_end_slot(),
            Some(&x) if x < self.vocab.source => x,
            // markup ids follow the two scripts
            Some(&x) => self.vocab.source + (x - self.vocab.source - self.vocab.target),
        }
    }

    pub fn prev_bucket(&self, prev: Option<Token>) -> usize {
        match prev {
            None => PREV_START,
            Some(t) if t < self.vocab.source => PREV_SOURCE,
            Some(t) if t < self.vocab.source + self.vocab.target => PREV_TARGET,
            Some(_) => PREV_STRUCTURAL,
        }
    }

    pub fn position_bucket(&self, t: usize) -> usize {
        (t / self.position_bucket_width).min(self.position_buckets - 1)
    }

    pub fn context(&self, prompt: &Prompt, t: usize, prev: Option<Token>) -> usize {
        let slot = self.aligned_slot(prompt, t);
        (slot * self.prev_buckets + self.prev_bucket(prev)) * self.position_buckets + self.position_bucket(t)
    }

    /// Contexts visited while emitting `tokens`.
    pub fn contexts(&self, prompt: &Prompt, tokens: &[Token]) -> Vec<usize> {
        (0..tokens.len()).map(|t| self.context(prompt, t, t.checked_sub(1).map(|p| tokens[p]))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub schema: ContextSchema,
    /// Row-major `[context][token]`.
    pub logits: Vec<f64>,
}

/// Initial logit offsets resembling a supervised-tuned model: confident in
/// literal translations, less sure about paraphrases, weak on structure.
/// The default noise leaves some contexts where a wrong token wins under
/// greedy decoding, so the verifiable gates start out imperfect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitSpec {
    pub literal: f64,
    pub paraphrase: f64,
    pub markup_copy: f64,
    pub eos: f64,
    /// Uniform noise amplitude added to every logit.
    pub noise: f64,
    pub seed: u64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self { literal: 3.0, paraphrase: 0.5, markup_copy: 1.0, eos: 3.0, noise: 1.5, seed: 1 }
    }
}

impl InitSpec {
    pub fn uniform() -> Self {
        Self { literal: 0.0, paraphrase: 0.0, markup_copy: 0.0, eos: 0.0, noise: 0.0, seed: 0 }
    }
}

impl PolicyParams {
    pub fn zeros(schema: ContextSchema) -> Self {
        let n = schema.num_contexts() * schema.vocab_size();
        Self { schema, logits: vec![0.0; n] }
    }

    pub fn init(env: &Environment, schema: ContextSchema, init: &InitSpec) -> Self {
        let mut p = Self::zeros(schema);
        let v = &env.vocab;
        let mut rng = rng::stream(rng::derive(init.seed, &[0x494e_4954]));
        for ctx in 0..schema.num_contexts() {
            let slot = ctx / (schema.prev_buckets * schema.position_buckets);
            let row = p.row_mut(ctx);
            if init.noise > 0.0 {
                for z in row.iter_mut() {
                    *z = init.noise * (2.0 * rng.gen::<f64>() - 1.0);
                }
            }
            if slot < v.source_script_size {
                for &t in &env.paraphrase.accept[slot] {
                    row[t] += init.paraphrase;
                }
                let lit = env.paraphrase.literal[slot];
                row[lit] += init.literal - init.paraphrase;
            } else if slot < schema.past_end_slot() {
                let markup = v.source_script_size + v.target_script_size + (slot - v.source_script_size);
                row[markup] += init.markup_copy;
            } else {
                row[v.eos] += init.eos;
            }
        }
        p
    }

    pub fn vocab_size(&self) -> usize {
        self.schema.vocab_size()
    }

    pub fn num_params(&self) -> usize {
        self.logits.len()
    }

    pub fn row(&self, ctx: usize) -> &[f64] {
        let v = self.vocab_size();
        &self.logits[ctx * v..(ctx + 1) * v]
    }

    pub fn row_mut(&mut self, ctx: usize) -> &mut [f64] {
        let v = self.vocab_size();
        &mut self.logits[ctx * v..(ctx + 1) * v]
    }

    /// Tempered step distribution at a context.
    pub fn tempered_probs(&self, ctx: usize, tau: Temperature) -> Result<Vec<f64>> {
        let row = self.row(ctx);
        if row.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFiniteLogits { context: ctx });
        }
        Ok(log_softmax(row, tau.get()).into_iter().map(f64::exp).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            schema: self.schema,
            logits: self.logits.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        ensure(ck.format == CHECKPOINT_FORMAT, || format!("unknown checkpoint format {:?}", ck.format))?;
        let p = Self { schema: ck.schema, logits: ck.logits };
        ensure(p.logits.len() == p.schema.num_contexts() * p.schema.vocab_size(), || {
            "checkpoint table size does not match its schema".into()
        })?;
        ensure(p.logits.iter().all(|z| z.is_finite()), || "checkpoint contains non-finite logits".into())?;
        Ok(p)
    }
}

const CHECKPOINT_FORMAT: &str = "vepo-policy/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    schema: ContextSchema,
    logits: Vec<f64>,
}

/// `log softmax(z / tau)`, stabilized by the row maximum.
pub fn log_softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|&z| (z - max) / tau).collect();
    let lse = shifted.iter().map(|s| s.exp()).sum::<f64>().ln();
    shifted.into_iter().map(|s| s - lse).collect()
}

pub fn softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    log_softmax(logits, tau).into_iter().map(f64::exp).collect()
}

/// Shannon entropy in nats.
pub fn entropy_exact(dist: &[f64]) -> f64 {
    -dist.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Entropy restricted to the most probable `fraction` of the vocabulary
/// (rounded up, at least one token). Ties at the cutoff go to the lower id.
pub fn entropy_topfrac(dist: &[f64], fraction: f64) -> f64 {
    assert!(fraction > 0.0 && fraction <= 1.0, "fraction must be in (0, 1]");
    let k = ((fraction * dist.len() as f64).ceil() as usize).clamp(1, dist.len().max(1));
    let mut idx: Vec<usize> = (0..dist.len()).collect();
    idx.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    -idx[..k.min(dist.len())].iter().map(|&i| dist[i]).filter(|&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Derivative of `H(softmax(z / tau))` with respect to `z`.
pub fn entropy_grad(probs: &[f64], tau: f64) -> Vec<f64> {
    let h = entropy_exact(probs);
    probs.iter().map(|&p| if p > 0.0 { -p * (p.ln() + h) / tau } else { 0.0 }).collect()
}

/// One sampled output sequence under the behavior policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Emitted tokens, including the final EOS when one was sampled.
    pub tokens: Vec<Token>,
    /// Behavior log-probabilities, one per token.
    pub log_probs: Vec<f64>,
    /// Exact entropy of each step distribution.
    pub entropies: Vec<f64>,
    pub contexts: Vec<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Output text, i.e. the tokens before EOS.
    pub fn output(&self, eos: Token) -> &[Token] {
        crate::toyenv::strip_eos(&self.tokens, eos)
    }
}

/// Samples from `softmax(logits / tau)` until EOS or `max_len` tokens.
pub fn sample_trajectory(
    params: &PolicyParams,
    vocab: &Vocab,
    prompt: &Prompt,
    tau: Temperature,
    max_len: usize,
    seed: u64,
) -> Trajectory {
    let mut rng = rng::stream(seed);
    let mut traj = Trajectory { tokens: vec![], log_probs: vec![], entropies: vec![], contexts: vec![] };
    let mut prev = None;
    for t in 0..max_len.max(1) {
        let ctx = params.schema.context(prompt, t, prev);
        let logp = log_softmax(params.row(ctx), tau.get());
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let a = sample_index(&probs, rng.gen::<f64>());
        traj.tokens.push(a);
        traj.log_probs.push(logp[a]);
        traj.entropies.push(entropy_exact(&probs));
        traj.contexts.push(ctx);
        if a == vocab.eos {
            break;
        }
        prev = Some(a);
    }
    traj
}

/// Inverse-CDF draw; falls back to the last positive-mass index on round-off.
fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy_decode(params: &PolicyParams, vocab: &Vocab, prompt: &Prompt, max_len: usize) -> Vec<Token> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..max_len.max(1) {
        let row = params.row(params.schema.context(prompt, t, prev));
        let a = row.iter().enumerate().fold(0, |best, (i, &z)| if z > row[best] { i } else { best });
        out.push(a);
        if a == vocab.eos {
            break;
        }
        prev = Some(a);
    }
    out
}

fn check_tokens(params: &PolicyParams, tokens: &[Token]) -> Result<()> {
    let v = params.vocab_size();
    match tokens.iter().find(|&&t| t >= v) {
        Some(&token) => Err(Error::VocabMismatch { token, size: v }),
        None => Ok(()),
    }
}

/// Per-token log-probabilities of `tokens` under the tempered policy.
pub fn log_prob(params: &PolicyParams, tau: Temperature, prompt: &Prompt, tokens: &[Token]) -> Result<Vec<f64>> {
    check_tokens(params, tokens)?;
    Ok(params
        .schema
        .contexts(prompt, tokens)
        .into_iter()
        .zip(tokens)
        .map(|(ctx, &a)| log_softmax(params.row(ctx), tau.get())[a])
        .collect())
}

/// Dense gradient buffer shaped like a [`PolicyParams`] table.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub vocab_size: usize,
    pub values: Vec<f64>,
}

impl Gradient {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Self { vocab_size: params.vocab_size(), values: vec![0.0; params.num_params()] }
    }

    pub fn row(&self, ctx: usize) -> &[f64] {
        &self.values[ctx * self.vocab_size..(ctx + 1) * self.vocab_size]
    }

    pub fn row_mut(&mut self, ctx: usize) -> &mut [f64] {
        &mut self.values[ctx * self.vocab_size..(ctx + 1) * self.vocab_size]
    }

    /// Adds `weight * d/dz log softmax(z/tau)[action]` at `ctx`.
    pub fn add_score(&mut self, ctx: usize, probs: &[f64], action: Token, tau: f64, weight: f64) {
        for (k, (g, &p)) in self.row_mut(ctx).iter_mut().zip(probs).enumerate() {
            let ind = if k == action { 1.0 } else { 0.0 };
            *g += weight * (ind - p) / tau;
        }
    }

    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Gradient of `sum_t log pi^tau(o_t | ...)` with respect to the logit table.
pub fn grad_log_prob(params: &PolicyParams, tau: Temperature, prompt: &Prompt, tokens: &[Token]) -> Result<Gradient> {
    check_tokens(params, tokens)?;
    let mut g = Gradient::zeros_like(params);
    for (ctx, &a) in params.schema.contexts(prompt, tokens).into_iter().zip(tokens) {
        let probs = softmax(params.row(ctx), tau.get());
        g.add_score(ctx, &probs, a, tau.get(), 1.0);
    }
    Ok(g)
}

/// Linear value head over hand-built context features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticParams {
    pub weights: Vec<f64>,
}

impl CriticParams {
    pub fn zeros(schema: &ContextSchema) -> Self {
        Self { weights: vec![0.0; critic_dim(schema)] }
    }

    pub fn value(&self, features: &[f64]) -> f64 {
        self.weights.iter().zip(features).map(|(w, x)| w * x).sum()
    }

    /// Ridge-regularized least squares fit of `returns` on `features`.
    pub fn fit(&mut self, features: &[Vec<f64>], returns: &[f64], ridge: f64) -> Result<()> {
        let d = self.weights.len();
        if features.len() != returns.len() || features.iter().any(|f| f.len() != d) {
            return Err(Error::Shape("critic features and returns disagree".into()));
        }
        let mut a = vec![vec![0.0; d + 1]; d];
        for (x, &y) in features.iter().zip(returns) {
            for i in 0..d {
                for j in 0..d {
                    a[i][j] += x[i] * x[j];
                }
                a[i][d] += x[i] * y;
            }
        }
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += ridge;
        }
        self.weights = solve(a).ok_or_else(|| Error::Shape("singular critic system".into()))?;
        Ok(())
    }
}

fn critic_dim(schema: &ContextSchema) -> usize {
    1 + schema.position_buckets + 3
}

/// Bias, position-bucket one-hot, and the kind of aligned source token
/// (content, markup, past the end).
pub fn critic_features(schema: &ContextSchema, prompt: &Prompt, t: usize) -> Vec<f64> {
    let mut f = vec![0.0; critic_dim(schema)];
    f[0] = 1.0;
    f[1 + schema.position_bucket(t)] = 1.0;
    let slot = schema.aligned_slot(prompt, t);
    let kind = if slot == schema.past_end_slot() {
        2
    } else if slot >= schema.vocab.source {
        1
    } else {
        0
    };
    f[1 + schema.position_buckets + kind] = 1.0;
    f
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
#[allow(clippy::needless_range_loop)]
fn solve(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..=n {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (a[r][n] - s) / a[r][r];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyenv::EnvSpec;

    fn setup() -> (Environment, PolicyParams) {
        let env = Environment::new(EnvSpec::default()).unwrap();
        let schema = ContextSchema::new(&env.vocab, 12, 4).unwrap();
        let params = PolicyParams::init(&env, schema, &InitSpec { noise: 0.5, seed: 3, ..InitSpec::default() });
        (env, params)
    }

    #[test]
    fn tempered_softmax_values() {
        let p = softmax(&[2.0, 0.0], 1.0);
        // e^2 / (e^2 + 1), computed independently
        let e2 = 7.389_056_098_930_65_f64;
        assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-14);
        assert!((p[0] - 0.8808).abs() < 1e-4 && (p[1] - 0.1192).abs() < 1e-4);

        let u = softmax(&[1.3; 5], 0.37);
        assert!(u.iter().all(|&x| (x - 0.2).abs() < 1e-15));

        let hot = softmax(&[2.0, 0.0], 1e6);
        assert!((hot[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_finite_logits_rejected() {
        let (_, mut params) = setup();
        params.row_mut(4)[0] = f64::NAN;
        assert!(matches!(params.tempered_probs(4, Temperature::ONE), Err(Error::NonFiniteLogits { context: 4 })));
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
    }

    #[test]
    fn entropies() {
        assert_eq!(entropy_exact(&[0.0, 1.0, 0.0]), 0.0);
        assert!((entropy_exact(&[1.0 / 16.0; 16]) - 16f64.ln()).abs() < 1e-12);
        let h = entropy_exact(&[0.5, 0.25, 0.25]);
        let by_hand = 0.5 * 2f64.ln() + 2.0 * 0.25 * 4f64.ln();
        assert!((h - by_hand).abs() < 1e-15);
        assert!((h - 1.5 * 2f64.ln()).abs() < 1e-15);
        assert!((h - 1.0397).abs() < 1e-4);
    }

    #[test]
    fn top_fraction_entropy() {
        let d = [0.1, 0.2, 0.3, 0.4];
        assert!((entropy_topfrac(&d, 1.0) - entropy_exact(&d)).abs() < 1e-15);
        assert_eq!(entropy_topfrac(&[0.0, 0.0, 1.0, 0.0, 0.0], 0.2), 0.0);
        // top-1 of 4 at fraction 0.25: only the 0.4 term
        assert!((entropy_topfrac(&d, 0.25) - (-0.4 * 0.4f64.ln())).abs() < 1e-15);
        // ties at the cutoff go to the lower id (both 0.3 terms are equal, so
        // only the count matters here)
        let t = [0.05, 0.3, 0.3, 0.35];
        assert!((entropy_topfrac(&t, 0.5) - (-(0.35f64 * 0.35f64.ln()) - 0.3 * 0.3f64.ln())).abs() < 1e-15);

        // peaked: 99.9% of the mass on 2 of 10 tokens
        let mut peaked = vec![0.001 / 8.0; 10];
        peaked[3] = 0.6;
        peaked[7] = 0.399;
        let rel = (entropy_exact(&peaked) - entropy_topfrac(&peaked, 0.2)) / entropy_exact(&peaked);
        assert!((0.0..0.05).contains(&rel), "relative error {rel}");
    }

    #[test]
    fn rescoring_is_bit_exact() {
        let (env, params) = setup();
        let tau = Temperature::new(0.8).unwrap();
        for seed in 0..20 {
            let prompt = env.prompt(seed);
            let traj = sample_trajectory(&params, &env.vocab, &prompt, tau, 12, seed + 100);
            let lp = log_prob(&params, tau, &prompt, &traj.tokens).unwrap();
            assert_eq!(lp, traj.log_probs);
            assert_eq!(params.schema.contexts(&prompt, &traj.tokens), traj.contexts);
        }
    }

    #[test]
    fn uniform_log_prob() {
        let (env, params) = setup();
        let uniform = PolicyParams::zeros(params.schema);
        let prompt = env.prompt(1);
        let tokens = [0, 3, 9, 2];
        let v = uniform.vocab_size() as f64;
        for lp in log_prob(&uniform, Temperature::ONE, &prompt, &tokens).unwrap() {
            assert!((lp + v.ln()).abs() < 1e-12);
        }
        assert!(log_prob(&uniform, Temperature::ONE, &prompt, &[0, 500]).is_err());
    }

    #[test]
    fn deterministic_policy_ignores_seed() {
        let (env, mut params) = setup();
        let prompt = env.prompt(4);
        for ctx in 0..params.schema.num_contexts() {
            let row = params.row_mut(ctx);
            row.iter_mut().for_each(|z| *z = 0.0);
            row[(ctx % 5) + 1] = 200.0;
            row[env.vocab.eos] = if ctx % 3 == 0 { 400.0 } else { 0.0 };
        }
        let a = sample_trajectory(&params, &env.vocab, &prompt, Temperature::ONE, 12, 1);
        for s in 2..10 {
            assert_eq!(sample_trajectory(&params, &env.vocab, &prompt, Temperature::ONE, 12, s).tokens, a.tokens);
        }
    }

    #[test]
    fn cold_sampling_is_greedy() {
        let (env, params) = setup();
        let tau = Temperature::new(1e-6).unwrap();
        for seed in 0..10 {
            let prompt = env.prompt(seed);
            let greedy = greedy_decode(&params, &env.vocab, &prompt, 12);
            let cold = sample_trajectory(&params, &env.vocab, &prompt, tau, 12, seed);
            assert_eq!(cold.tokens, greedy);
        }
    }

    #[test]
    fn score_identity_and_uniform_gradient() {
        let (env, params) = setup();
        let prompt = env.prompt(2);
        let traj = sample_trajectory(&params, &env.vocab, &prompt, Temperature::ONE, 12, 9);
        let tau = Temperature::new(1.7).unwrap();
        let g = grad_log_prob(&params, tau, &prompt, &traj.tokens).unwrap();
        for ctx in 0..params.schema.num_contexts() {
            assert!(g.row(ctx).iter().sum::<f64>().abs() < 1e-12);
        }

        let uniform = PolicyParams::zeros(params.schema);
        let g = grad_log_prob(&uniform, tau, &prompt, &[5]).unwrap();
        let v = uniform.vocab_size() as f64;
        let ctx = uniform.schema.context(&prompt, 0, None);
        assert!((g.row(ctx)[5] - (1.0 - 1.0 / v) / 1.7).abs() < 1e-14);
    }

    #[test]
    fn critic_fit() {
        let (env, params) = setup();
        let schema = params.schema;
        let mut critic = CriticParams::zeros(&schema);
        let prompt = env.prompt(0);
        let feats: Vec<Vec<f64>> = (0..10).map(|t| critic_features(&schema, &prompt, t)).collect();
        assert_eq!(critic.value(&feats[0]), 0.0);
        critic.fit(&feats, &[1.7; 10], 1e-10).unwrap();
        for f in &feats {
            assert!((critic.value(f) - 1.7).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (_, params) = setup();
        let text = params.to_json().unwrap();
        assert_eq!(PolicyParams::from_json(&text).unwrap(), params);
        assert!(PolicyParams::from_json(&text.replace("vepo-policy/1", "other")).is_err());
    }
}
