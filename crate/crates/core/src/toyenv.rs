//! Synthetic translation environments.
//!
//! The vocabulary is split into four contiguous id ranges: source script,
//! target script, markup (open/close pairs) and a single EOS token. Each
//! source token owns an acceptance set of target-script tokens that all
//! count as a correct translation, one of which is marked as the literal
//! rendering. Prompts are source sequences with optional balanced markup.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng;

pub type Token = usize;

const PARAPHRASE_SALT: u64 = 0x5041_5241;
const PROMPT_SALT: u64 = 0x5052_4f4d;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Script {
    Source,
    Target,
    Structural,
}

/// What a token id denotes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Source(usize),
    Target(usize),
    Open(usize),
    Close(usize),
    Eos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabDims {
    pub source: usize,
    pub target: usize,
    pub markup_pairs: usize,
}

impl Default for VocabDims {
    fn default() -> Self {
        Self { source: 8, target: 8, markup_pairs: 2 }
    }
}

/// Token id layout: `[source | target | open0 close0 open1 close1 ... | eos]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub source_script_size: usize,
    pub target_script_size: usize,
    pub markup_pairs: usize,
    pub eos: Token,
    pub total_size: usize,
}

impl Vocab {
    pub fn new(dims: VocabDims) -> Result<Self> {
        ensure(dims.source > 0 && dims.target > 0, || format!("script sizes must be positive, got {dims:?}"))?;
        let eos = dims.source + dims.target + 2 * dims.markup_pairs;
        Ok(Self {
            source_script_size: dims.source,
            target_script_size: dims.target,
            markup_pairs: dims.markup_pairs,
            eos,
            total_size: eos + 1,
        })
    }

    pub fn dims(&self) -> VocabDims {
        VocabDims { source: self.source_script_size, target: self.target_script_size, markup_pairs: self.markup_pairs }
    }

    pub fn source(&self, i: usize) -> Token {
        debug_assert!(i < self.source_script_size);
        i
    }

    pub fn target(&self, i: usize) -> Token {
        debug_assert!(i < self.target_script_size);
        self.source_script_size + i
    }

    fn markup_base(&self) -> usize {
        self.source_script_size + self.target_script_size
    }

    pub fn open(&self, k: usize) -> Token {
        debug_assert!(k < self.markup_pairs);
        self.markup_base() + 2 * k
    }

    pub fn close(&self, k: usize) -> Token {
        debug_assert!(k < self.markup_pairs);
        self.markup_base() + 2 * k + 1
    }

    pub fn kind(&self, token: Token) -> Result<TokenKind> {
        let s = self.source_script_size;
        let m = self.markup_base();
        Ok(match token {
            t if t < s => TokenKind::Source(t),
            t if t < m => TokenKind::Target(t - s),
            t if t < self.eos => {
                let k = (t - m) / 2;
                if (t - m).is_multiple_of(2) {
                    TokenKind::Open(k)
                } else {
                    TokenKind::Close(k)
                }
            }
            t if t == self.eos => TokenKind::Eos,
            t => return Err(Error::VocabMismatch { token: t, size: self.total_size }),
        })
    }

    pub fn is_markup(&self, token: Token) -> bool {
        token >= self.markup_base() && token < self.eos
    }

    pub fn script_of(&self, token: Token) -> Result<Script> {
        Ok(match self.kind(token)? {
            TokenKind::Source(_) => Script::Source,
            TokenKind::Target(_) => Script::Target,
            _ => Script::Structural,
        })
    }
}

/// Acceptance sets: `accept[s]` lists the target tokens (ascending) that
/// correctly translate source token `s`; `literal[s]` is one of them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphraseMap {
    pub accept: Vec<Vec<Token>>,
    pub literal: Vec<Token>,
}

impl ParaphraseMap {
    fn generate(vocab: &Vocab, seed: u64, width: usize) -> Self {
        let mut accept = Vec::with_capacity(vocab.source_script_size);
        let mut literal = Vec::with_capacity(vocab.source_script_size);
        let mut pool: Vec<Token> = (0..vocab.target_script_size).map(|i| vocab.target(i)).collect();
        for s in 0..vocab.source_script_size {
            let mut rng = rng::stream(rng::derive(seed, &[PARAPHRASE_SALT, s as u64]));
            let (chosen, _) = pool.partial_shuffle(&mut rng, width);
            let mut set = chosen.to_vec();
            literal.push(set[0]);
            set.sort_unstable();
            accept.push(set);
        }
        Self { accept, literal }
    }

    pub fn accepts(&self, source: Token, output: Token) -> bool {
        self.accept.get(source).is_some_and(|set| set.binary_search(&output).is_ok())
    }

    /// First non-literal member of the acceptance set, if any.
    pub fn paraphrastic(&self, source: Token) -> Option<Token> {
        let lit = self.literal[source];
        self.accept[source].iter().copied().find(|&t| t != lit)
    }

    fn validate(&self, vocab: &Vocab) -> Result<()> {
        ensure(
            self.accept.len() == vocab.source_script_size && self.literal.len() == vocab.source_script_size,
            || "paraphrase map does not cover the source script".into(),
        )?;
        for (s, set) in self.accept.iter().enumerate() {
            ensure(!set.is_empty(), || format!("empty acceptance set for source token {s}"))?;
            for &t in set {
                ensure(matches!(vocab.kind(t), Ok(TokenKind::Target(_))), || {
                    format!("acceptance set of {s} contains non-target token {t}")
                })?;
            }
            ensure(set.contains(&self.literal[s]), || format!("literal of {s} not in its acceptance set"))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSpec {
    pub min_len: usize,
    pub max_len: usize,
    pub markup_prob: f64,
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self { min_len: 2, max_len: 6, markup_prob: 0.15 }
    }
}

/// Everything needed to rebuild an [`Environment`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSpec {
    pub seed: u64,
    pub vocab: VocabDims,
    pub paraphrase_width: usize,
    pub prompts: PromptSpec,
    /// Reward bonus per unit of output/source length ratio. Non-zero values
    /// give the length-hackable task variant; the bonus is added to the
    /// training reward only, never to the verifiable composite.
    pub verbosity_bias: f64,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            vocab: VocabDims::default(),
            paraphrase_width: 3,
            prompts: PromptSpec::default(),
            verbosity_bias: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub source: Vec<Token>,
    pub target_script: Script,
}

impl Prompt {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

/// Immutable after construction; share freely across rollout workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub spec: EnvSpec,
    pub vocab: Vocab,
    pub paraphrase: ParaphraseMap,
}

impl Environment {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        let vocab = Vocab::new(spec.vocab)?;
        ensure(spec.paraphrase_width >= 1, || "paraphrase width must be at least 1".into())?;
        ensure(spec.paraphrase_width <= vocab.target_script_size, || {
            format!(
                "paraphrase width {} exceeds target script size {}",
                spec.paraphrase_width, vocab.target_script_size
            )
        })?;
        ensure((0.0..=1.0).contains(&spec.prompts.markup_prob), || "markup_prob must be in [0, 1]".into())?;
        ensure(spec.prompts.min_len >= 1, || "prompt min_len must be at least 1".into())?;
        ensure(spec.verbosity_bias.is_finite() && spec.verbosity_bias >= 0.0, || {
            "verbosity_bias must be finite and non-negative".into()
        })?;
        let paraphrase = ParaphraseMap::generate(&vocab, spec.seed, spec.paraphrase_width);
        Ok(Self { spec, vocab, paraphrase })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a serialized environment and checks its invariants.
    pub fn from_json(text: &str) -> Result<Self> {
        let env: Self = serde_json::from_str(text)?;
        let vocab = Vocab::new(env.spec.vocab)?;
        ensure(vocab == env.vocab, || "vocabulary layout does not match its dimensions".into())?;
        env.paraphrase.validate(&env.vocab)?;
        Ok(env)
    }

    pub fn script_of(&self, token: Token) -> Result<Script> {
        self.vocab.script_of(token)
    }

    /// Prompt drawn from the environment's default prompt distribution.
    pub fn prompt(&self, seed: u64) -> Prompt {
        let p = self.spec.prompts;
        self.gen_prompt(seed, (p.min_len, p.max_len), p.markup_prob)
    }

    /// Generates a source sequence of length in `len_range` with balanced
    /// markup. Each slot becomes a markup token with probability
    /// `markup_prob`: a close if a tag is open, otherwise an open when there
    /// is room to close it. Tags still open near the end are force-closed.
    pub fn gen_prompt(&self, seed: u64, len_range: (usize, usize), markup_prob: f64) -> Prompt {
        let min = len_range.0.max(1);
        let max = len_range.1.max(min);
        let mut rng = rng::stream(rng::derive(self.spec.seed, &[PROMPT_SALT, seed]));
        let len = rng.gen_range(min..=max);
        let v = &self.vocab;
        let mut source = Vec::with_capacity(len);
        let mut open: Vec<usize> = Vec::new();
        for i in 0..len {
            let remaining = len - i;
            if !open.is_empty() && remaining == open.len() {
                source.push(v.close(open.pop().unwrap()));
                continue;
            }
            let markup = v.markup_pairs > 0 && rng.gen_bool(markup_prob.clamp(0.0, 1.0));
            if markup {
                if let Some(k) = open.pop() {
                    source.push(v.close(k));
                    continue;
                }
                if remaining >= 2 {
                    let k = rng.gen_range(0..v.markup_pairs);
                    open.push(k);
                    source.push(v.open(k));
                    continue;
                }
            }
            source.push(v.source(rng.gen_range(0..v.source_script_size)));
        }
        Prompt { source, target_script: Script::Target }
    }

    /// Fraction of source positions translated correctly under monotone
    /// positional alignment. Content positions accept any member of the
    /// acceptance set; markup positions require an exact copy. Output is
    /// read up to the first EOS.
    pub fn semantic_reward(&self, prompt: &Prompt, output: &[Token]) -> f64 {
        if prompt.is_empty() {
            return 0.0;
        }
        let output = strip_eos(output, self.vocab.eos);
        let hits = prompt
            .source
            .iter()
            .zip(output)
            .filter(|&(&x, &y)| if self.vocab.is_markup(x) { x == y } else { self.paraphrase.accepts(x, y) })
            .count();
        hits as f64 / prompt.len() as f64
    }

    /// The output every gate accepts: literal translation plus copied markup.
    pub fn literal_translation(&self, prompt: &Prompt) -> Vec<Token> {
        prompt.source.iter().map(|&x| if self.vocab.is_markup(x) { x } else { self.paraphrase.literal[x] }).collect()
    }
}

/// Output tokens before the first EOS.
pub fn strip_eos(tokens: &[Token], eos: Token) -> &[Token] {
    match tokens.iter().position(|&t| t == eos) {
        Some(i) => &tokens[..i],
        None => tokens,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(seed: u64, width: usize) -> Environment {
        Environment::new(EnvSpec {
            seed,
            vocab: VocabDims { source: 8, target: 8, markup_pairs: 2 },
            paraphrase_width: width,
            ..EnvSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn layout_is_contiguous() {
        let v = Vocab::new(VocabDims { source: 3, target: 4, markup_pairs: 2 }).unwrap();
        assert_eq!(v.total_size, 3 + 4 + 4 + 1);
        assert_eq!(v.kind(2).unwrap(), TokenKind::Source(2));
        assert_eq!(v.kind(3).unwrap(), TokenKind::Target(0));
        assert_eq!(v.kind(7).unwrap(), TokenKind::Open(0));
        assert_eq!(v.kind(8).unwrap(), TokenKind::Close(0));
        assert_eq!(v.kind(10).unwrap(), TokenKind::Close(1));
        assert_eq!(v.kind(11).unwrap(), TokenKind::Eos);
        assert!(v.kind(12).is_err());
    }

    #[test]
    fn acceptance_sets_have_requested_width() {
        let e = env(7, 3);
        for (s, set) in e.paraphrase.accept.iter().enumerate() {
            assert_eq!(set.len(), 3);
            assert!(set.contains(&e.paraphrase.literal[s]));
            assert!(set.iter().all(|&t| e.script_of(t).unwrap() == Script::Target));
        }
    }

    #[test]
    fn same_seed_serializes_identically() {
        let a = serde_json::to_string(&env(7, 3).paraphrase).unwrap();
        let b = serde_json::to_string(&env(7, 3).paraphrase).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, serde_json::to_string(&env(8, 3).paraphrase).unwrap());
    }

    #[test]
    fn full_width_accepts_whole_target_script() {
        let e = env(3, 8);
        for set in &e.paraphrase.accept {
            assert_eq!(set.len(), 8);
        }
        let prompt = e.gen_prompt(1, (5, 5), 0.0);
        let any_target = vec![e.vocab.target(5); 5];
        assert_eq!(e.semantic_reward(&prompt, &any_target), 1.0);
    }

    #[test]
    fn rejects_bad_width() {
        let mut spec = EnvSpec { paraphrase_width: 0, ..EnvSpec::default() };
        assert!(Environment::new(spec).is_err());
        spec.paraphrase_width = 9;
        assert!(Environment::new(spec).is_err());
    }

    #[test]
    fn prompt_without_markup() {
        let e = env(7, 3);
        for seed in 0..50 {
            let p = e.gen_prompt(seed, (1, 10), 0.0);
            assert!(p.source.iter().all(|&t| e.script_of(t).unwrap() == Script::Source));
            assert!((1..=10).contains(&p.len()));
        }
    }

    #[test]
    fn forced_markup_alternates() {
        let e = env(7, 3);
        let p = e.gen_prompt(11, (4, 4), 1.0);
        let kinds: Vec<_> = p.source.iter().map(|&t| e.vocab.kind(t).unwrap()).collect();
        assert!(matches!(kinds[0], TokenKind::Open(_)));
        assert!(matches!(kinds[1], TokenKind::Close(_)));
        assert!(matches!(kinds[2], TokenKind::Open(_)));
        assert!(matches!(kinds[3], TokenKind::Close(_)));
        assert_eq!(p.source[0] + 1, p.source[1]);
        assert_eq!(p.source[2] + 1, p.source[3]);
    }

    #[test]
    fn degenerate_range_is_clamped() {
        let e = env(7, 3);
        assert_eq!(e.gen_prompt(1, (5, 2), 0.3).len(), 5);
        assert_eq!(e.gen_prompt(1, (0, 0), 0.3).len(), 1);
    }

    #[test]
    fn prompts_are_reproducible() {
        let e = env(7, 3);
        assert_eq!(e.gen_prompt(42, (2, 9), 0.4), e.gen_prompt(42, (2, 9), 0.4));
    }

    #[test]
    fn semantic_reward_cases() {
        let e = env(7, 3);
        let p = e.gen_prompt(5, (6, 6), 0.5);
        let lit = e.literal_translation(&p);
        assert_eq!(e.semantic_reward(&p, &lit), 1.0);

        let para: Vec<Token> = p
            .source
            .iter()
            .map(|&x| if e.vocab.is_markup(x) { x } else { e.paraphrase.paraphrastic(x).unwrap() })
            .collect();
        assert_eq!(e.semantic_reward(&p, &para), 1.0);
        assert_eq!(e.semantic_reward(&p, &[]), 0.0);
        assert_eq!(e.semantic_reward(&p, &[e.vocab.eos]), 0.0);

        // Truncated output loses the missing positions.
        assert!((e.semantic_reward(&p, &lit[..3]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn scripts() {
        let e = env(7, 3);
        assert_eq!(e.script_of(e.vocab.target(0)).unwrap(), Script::Target);
        assert_eq!(e.script_of(e.vocab.eos).unwrap(), Script::Structural);
        assert_eq!(e.script_of(e.vocab.open(1)).unwrap(), Script::Structural);
        assert!(matches!(e.script_of(999), Err(Error::VocabMismatch { .. })));
    }

    #[test]
    fn json_round_trip() {
        let e = env(13, 2);
        let back = Environment::from_json(&e.to_json().unwrap()).unwrap();
        assert_eq!(e, back);

        let mut tampered = e.clone();
        tampered.paraphrase.literal[0] = 0;
        assert!(Environment::from_json(&tampered.to_json().unwrap()).is_err());
    }
}
