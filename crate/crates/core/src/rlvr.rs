//! Verifiable rewards: length ratio, format validity, target-script check
//! and code-mixing, combined with the semantic score into a clipped
//! weighted composite. Also hosts candidate filtering.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::policy::Trajectory;
use crate::toyenv::{strip_eos, Environment, Prompt, Script, Token, TokenKind, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlvrConfig {
    pub lambda_len: f64,
    pub lambda_fmt: f64,
    pub lambda_lid: f64,
    pub lambda_mix: f64,
    /// Acceptable output/source length ratio band.
    pub range_lo: f64,
    pub range_hi: f64,
    pub sigma_len: f64,
    pub w_preserve: f64,
    pub w_broken: f64,
    pub theta_lid: f64,
    pub eta_lid: f64,
    pub tau_mix: f64,
    pub zeta_mix: f64,
    pub c_max: f64,
}

impl Default for RlvrConfig {
    fn default() -> Self {
        Self {
            lambda_len: 0.3,
            lambda_fmt: 0.2,
            lambda_lid: 0.4,
            lambda_mix: 0.3,
            range_lo: 0.5,
            range_hi: 2.0,
            sigma_len: 1.0,
            w_preserve: 1.0,
            w_broken: 1.0,
            theta_lid: 0.8,
            eta_lid: 1.0,
            tau_mix: 0.15,
            zeta_mix: 1.0,
            c_max: 5.0,
        }
    }
}

impl RlvrConfig {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            self.lambda_len,
            self.lambda_fmt,
            self.lambda_lid,
            self.lambda_mix,
            self.sigma_len,
            self.w_preserve,
            self.w_broken,
            self.eta_lid,
            self.zeta_mix,
        ];
        ensure(non_negative.iter().all(|w| w.is_finite() && *w >= 0.0), || {
            "RLVR weights and penalties must be finite and non-negative".into()
        })?;
        ensure(self.range_lo < self.range_hi, || "range_lo must be below range_hi".into())?;
        ensure(self.theta_lid > 0.0 && self.theta_lid <= 1.0, || "theta_lid must be in (0, 1]".into())?;
        ensure((0.0..1.0).contains(&self.tau_mix), || "tau_mix must be in [0, 1)".into())?;
        ensure(self.c_max > 0.0, || "c_max must be positive".into())
    }
}

/// Pass/fail of each constraint category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gates {
    pub language: bool,
    pub length: bool,
    pub format: bool,
    pub mixing: bool,
}

impl Gates {
    pub fn all(&self) -> bool {
        self.language && self.length && self.format && self.mixing
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_mt: f64,
    pub r_len: f64,
    pub r_fmt: f64,
    pub r_lid: f64,
    pub r_mix: f64,
    pub composite: f64,
    pub compliant: bool,
    pub gates: Gates,
}

impl RewardBreakdown {
    /// `r_mt + sum_k lambda_k r_k` from the stored (already clipped) terms.
    pub fn recompute(&self, cfg: &RlvrConfig) -> f64 {
        self.r_mt
            + cfg.lambda_len * self.r_len
            + cfg.lambda_fmt * self.r_fmt
            + cfg.lambda_lid * self.r_lid
            + cfg.lambda_mix * self.r_mix
    }
}

/// Output length over source length.
pub fn length_ratio(source_len: usize, output_len: usize) -> Result<f64> {
    if source_len == 0 {
        return Err(Error::EmptySource);
    }
    Ok(output_len as f64 / source_len as f64)
}

/// +1 inside the ratio band, linear penalty outside.
pub fn length_reward(source_len: usize, output_len: usize, cfg: &RlvrConfig) -> Result<f64> {
    let rho = length_ratio(source_len, output_len)?;
    Ok(if rho > cfg.range_hi {
        -cfg.sigma_len * (rho - cfg.range_hi)
    } else if rho < cfg.range_lo {
        -cfg.sigma_len * (cfg.range_lo - rho)
    } else {
        1.0
    })
}

/// Markup violations found by a single stack pass: stray closes, opens
/// skipped over by a mismatched close, and opens left unclosed.
pub fn broken_markup(vocab: &Vocab, tokens: &[Token]) -> usize {
    let mut stack: Vec<usize> = Vec::new();
    let mut broken = 0;
    for &t in tokens {
        match vocab.kind(t) {
            Ok(TokenKind::Open(k)) => stack.push(k),
            Ok(TokenKind::Close(k)) => match stack.iter().rposition(|&o| o == k) {
                Some(pos) => {
                    broken += stack.len() - pos - 1;
                    stack.truncate(pos);
                }
                None => broken += 1,
            },
            _ => {}
        }
    }
    broken + stack.len()
}

/// Share of the source's markup tokens (as a multiset) present in the output.
pub fn markup_preservation(vocab: &Vocab, source: &[Token], output: &[Token]) -> f64 {
    let count = |ts: &[Token]| {
        let mut m: HashMap<Token, usize> = HashMap::new();
        for &t in ts.iter().filter(|&&t| vocab.is_markup(t)) {
            *m.entry(t).or_default() += 1;
        }
        m
    };
    let (xs, ys) = (count(source), count(output));
    let total: usize = xs.values().sum();
    if total == 0 {
        return 1.0;
    }
    let shared: usize = xs.iter().map(|(t, &n)| n.min(ys.get(t).copied().unwrap_or(0))).sum();
    shared as f64 / total as f64
}

pub fn format_reward(vocab: &Vocab, source: &[Token], output: &[Token], cfg: &RlvrConfig) -> f64 {
    cfg.w_preserve * markup_preservation(vocab, source, output) - cfg.w_broken * broken_markup(vocab, output) as f64
}

/// Counts of script-bearing tokens, ignoring structure.
fn script_counts(vocab: &Vocab, output: &[Token]) -> Result<(usize, usize)> {
    let (mut src, mut tgt) = (0, 0);
    for &t in output {
        match vocab.script_of(t)? {
            Script::Source => src += 1,
            Script::Target => tgt += 1,
            Script::Structural => {}
        }
    }
    Ok((src, tgt))
}

/// Majority script among non-structural tokens and its share. `None` for an
/// output with no script-bearing tokens. Ties resolve away from the target.
pub fn identify_script(vocab: &Vocab, output: &[Token]) -> Result<Option<(Script, f64)>> {
    let (src, tgt) = script_counts(vocab, output)?;
    let n = src + tgt;
    if n == 0 {
        return Ok(None);
    }
    Ok(Some(if tgt > src { (Script::Target, tgt as f64 / n as f64) } else { (Script::Source, src as f64 / n as f64) }))
}

pub fn lid_reward(vocab: &Vocab, output: &[Token], target: Script, cfg: &RlvrConfig) -> Result<f64> {
    Ok(match identify_script(vocab, output)? {
        Some((script, conf)) if script == target && conf > cfg.theta_lid => 1.0,
        _ => -cfg.eta_lid,
    })
}

/// Share of non-structural tokens outside the target script.
pub fn mixing_proportion(vocab: &Vocab, output: &[Token], target: Script) -> Result<f64> {
    let (src, tgt) = script_counts(vocab, output)?;
    let n = src + tgt;
    if n == 0 {
        return Ok(0.0);
    }
    let on_target = match target {
        Script::Source => src,
        Script::Target => tgt,
        Script::Structural => 0,
    };
    Ok((n - on_target) as f64 / n as f64)
}

pub fn mixing_reward(vocab: &Vocab, output: &[Token], target: Script, cfg: &RlvrConfig) -> Result<f64> {
    let p = mixing_proportion(vocab, output, target)?;
    Ok(if p <= cfg.tau_mix { 0.0 } else { -cfg.zeta_mix * (p - cfg.tau_mix) })
}

fn clip(x: f64, c: f64) -> f64 {
    x.clamp(-c, c)
}

/// Scores an output against its prompt. `output` is read up to the first EOS.
pub fn composite_reward(
    env: &Environment,
    prompt: &Prompt,
    output: &[Token],
    cfg: &RlvrConfig,
) -> Result<RewardBreakdown> {
    let vocab = &env.vocab;
    for &t in prompt.source.iter().chain(output) {
        vocab.kind(t)?;
    }
    let y = strip_eos(output, vocab.eos);
    let x = &prompt.source;
    let rho = length_ratio(x.len(), y.len())?;

    let r_mt = clip(env.semantic_reward(prompt, y), cfg.c_max);
    let r_len = clip(length_reward(x.len(), y.len(), cfg)?, cfg.c_max);
    let r_fmt = clip(format_reward(vocab, x, y, cfg), cfg.c_max);
    let r_lid = clip(lid_reward(vocab, y, prompt.target_script, cfg)?, cfg.c_max);
    let r_mix = clip(mixing_reward(vocab, y, prompt.target_script, cfg)?, cfg.c_max);

    let gates = Gates {
        language: r_lid > 0.0,
        length: (cfg.range_lo..=cfg.range_hi).contains(&rho),
        format: broken_markup(vocab, y) == 0,
        mixing: mixing_proportion(vocab, y, prompt.target_script)? <= cfg.tau_mix,
    };
    let mut b = RewardBreakdown { r_mt, r_len, r_fmt, r_lid, r_mix, composite: 0.0, compliant: gates.all(), gates };
    b.composite = b.recompute(cfg);
    Ok(b)
}

/// A sampled candidate with its verifiable score.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub trajectory: Trajectory,
    pub breakdown: RewardBreakdown,
    /// Output length used for tie-breaking.
    pub output_len: usize,
}

/// Orders candidates best-first: compliant before non-compliant, then
/// higher composite, then shorter output, then earlier sampling order.
pub fn rank_candidates(candidates: &[Candidate]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ca, cb) = (&candidates[a], &candidates[b]);
        cb.breakdown
            .compliant
            .cmp(&ca.breakdown.compliant)
            .then_with(|| cb.breakdown.composite.partial_cmp(&ca.breakdown.composite).unwrap_or(Ordering::Equal))
            .then_with(|| ca.output_len.cmp(&cb.output_len))
            .then_with(|| a.cmp(&b))
    });
    idx
}

/// Keeps the best `g` of `candidates`; compliant ones first, with any
/// shortfall filled by the best non-compliant ones. Returned in rank order.
pub fn filter_candidates(candidates: Vec<Candidate>, g: usize) -> Result<Vec<Candidate>> {
    if g == 0 || candidates.len() < g {
        return Err(Error::TooFewCandidates { needed: g.max(1), got: candidates.len() });
    }
    let order = rank_candidates(&candidates);
    let mut slots: Vec<Option<Candidate>> = candidates.into_iter().map(Some).collect();
    Ok(order.into_iter().take(g).map(|i| slots[i].take().unwrap()).collect())
}

/// One input line of the `score` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRecord {
    pub prompt: Vec<Token>,
    pub output: Vec<Token>,
    #[serde(default = "default_target")]
    pub target_script: Script,
}

fn default_target() -> Script {
    Script::Target
}

impl ScoreRecord {
    pub fn score(&self, env: &Environment, cfg: &RlvrConfig) -> Result<RewardBreakdown> {
        let prompt = Prompt { source: self.prompt.clone(), target_script: self.target_script };
        composite_reward(env, &prompt, &self.output, cfg)
    }
}
