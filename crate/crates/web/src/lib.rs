//! Browser bindings for three interactive views: the Gibbs fixed point of
//! an entropy-regularized bandit, tempered softmax geometry and the
//! entropy-shaped advantage multiplier. Every entry point returns JSON.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use vepo::advantage::AdvantageConfig;
use vepo::diagnostics::{fisher_matrix, fit_entropy_bandit, gibbs_target, total_variation};
use vepo::policy::{entropy_exact, softmax};
use vepo::{Error, Result};

const MAX_BANDIT_STEPS: usize = 100_000;

fn gibbs_report(rewards: &[f64], beta: f64, steps: usize) -> Result<Value> {
    if steps > MAX_BANDIT_STEPS {
        return Err(Error::Config(format!("at most {MAX_BANDIT_STEPS} steps")));
    }
    let target = gibbs_target(rewards, beta)?;
    let learned = fit_entropy_bandit(rewards, beta, steps)?;
    Ok(json!({
        "gibbs": target,
        "learned": learned,
        "total_variation": total_variation(&learned, &target),
        "entropy": entropy_exact(&target),
    }))
}

fn tempered_report(logits: &[f64], tau: f64) -> Result<Value> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFiniteLogits { context: 0 });
    }
    let probs = softmax(logits, tau);
    let fisher = fisher_matrix(&probs)?;
    Ok(json!({
        "probs": probs,
        "entropy": entropy_exact(&probs),
        "eigenvalues": fisher.eigenvalues,
    }))
}

fn multiplier_curve(alpha: f64, gamma: f64, entropy: f64, len: usize) -> Result<Vec<f64>> {
    let cfg = AdvantageConfig { alpha, gamma, ..AdvantageConfig::default() };
    cfg.validate()?;
    if !(entropy.is_finite() && entropy >= 0.0) || len > 4096 {
        return Err(Error::Config("entropy must be non-negative and length at most 4096".into()));
    }
    Ok((0..len).map(|t| cfg.multiplier(entropy, t)).collect())
}

fn to_js<T>(r: Result<T>) -> std::result::Result<T, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

/// Gibbs distribution `exp(R / beta) / Z` next to the bandit policy reached
/// by `steps` of exact entropy-regularized gradient ascent.
#[wasm_bindgen]
pub fn gibbs(rewards: Vec<f64>, beta: f64, steps: usize) -> std::result::Result<String, JsError> {
    to_js(gibbs_report(&rewards, beta, steps)).map(|v| v.to_string())
}

/// Tempered probabilities, their entropy and the Fisher spectrum.
#[wasm_bindgen]
pub fn tempered(logits: Vec<f64>, tau: f64) -> std::result::Result<String, JsError> {
    to_js(tempered_report(&logits, tau)).map(|v| v.to_string())
}

/// `1 + alpha H gamma^t` for `t = 0..len`.
#[wasm_bindgen]
pub fn advantage_multiplier(
    alpha: f64,
    gamma: f64,
    entropy: f64,
    len: usize,
) -> std::result::Result<Vec<f64>, JsError> {
    to_js(multiplier_curve(alpha, gamma, entropy, len))
}
