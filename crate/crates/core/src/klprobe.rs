//! Monte Carlo KL estimators from sampled log-ratios.
//!
//! Samples are drawn from `q` and carry `u = log p(x) - log q(x)`. Under that
//! sampling, `k1 = -E[u]` and `k3 = E[e^u - 1 - u]` are unbiased for
//! `KL(q || p)`; `k2 = E[u^2] / 2` is biased but agrees to second order when
//! the two distributions are close.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// `log p(x) - log q(x)` for one draw `x ~ q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlSample(f64);

impl KlSample {
    pub fn new(log_ratio: f64) -> Result<Self> {
        if log_ratio.is_finite() {
            Ok(Self(log_ratio))
        } else {
            Err(Error::Shape(format!("non-finite log ratio {log_ratio}")))
        }
    }

    pub fn log_ratio(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    K1,
    K2,
    K3,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Estimator::K1, Estimator::K2, Estimator::K3];

    /// Per-sample contribution.
    pub fn term(self, u: f64) -> f64 {
        match self {
            Estimator::K1 => -u,
            Estimator::K2 => 0.5 * u * u,
            Estimator::K3 => u.exp_m1() - u,
        }
    }

    /// Derivative of [`Estimator::term`] with respect to `u`.
    pub fn term_derivative(self, u: f64) -> f64 {
        match self {
            Estimator::K1 => -1.0,
            Estimator::K2 => u,
            Estimator::K3 => u.exp_m1(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Estimator::K1 => "k1",
            Estimator::K2 => "k2",
            Estimator::K3 => "k3",
        }
    }
}

fn mean_of(samples: &[KlSample], f: impl Fn(f64) -> f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| f(s.0)).sum::<f64>() / samples.len() as f64
}

/// Naive estimator, `-mean(u)`, with the leading minus as usually printed.
pub fn k1(samples: &[KlSample]) -> f64 {
    mean_of(samples, |u| Estimator::K1.term(u))
}

/// `mean(u)`: the same statistic with the opposite sign, an estimate of `-KL(q || p)`.
pub fn k1_unsigned(samples: &[KlSample]) -> f64 {
    mean_of(samples, |u| u)
}

pub fn k2(samples: &[KlSample]) -> f64 {
    mean_of(samples, |u| Estimator::K2.term(u))
}

pub fn k3(samples: &[KlSample]) -> f64 {
    mean_of(samples, |u| Estimator::K3.term(u))
}

/// `sum_i p_i log(p_i / q_i)`; infinite when `p` puts mass where `q` has none.
pub fn exact_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("categoricals of size {} and {}", p.len(), q.len())));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| if qi > 0.0 { pi * (pi / qi).ln() } else { f64::INFINITY })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    pub std_error: f64,
}

/// Sample mean, (population) variance and standard error of an estimator.
pub fn moments(samples: &[KlSample], est: Estimator) -> Moments {
    let n = samples.len() as f64;
    let mean = mean_of(samples, |u| est.term(u));
    let variance = mean_of(samples, |u| {
        let d = est.term(u) - mean;
        d * d
    });
    Moments { mean, variance, std_error: (variance / n).sqrt() }
}

/// Draws `n` samples from `q` and records `log p - log q`.
pub fn sample_log_ratios(p: &[f64], q: &[f64], n: usize, seed: u64) -> Result<Vec<KlSample>> {
    if p.len() != q.len() || q.is_empty() {
        return Err(Error::Shape("categoricals must be non-empty and equally sized".into()));
    }
    let log_ratio: Vec<f64> = p.iter().zip(q).map(|(&a, &b)| a.ln() - b.ln()).collect();
    let mut cdf = Vec::with_capacity(q.len());
    let mut acc = 0.0;
    for &qi in q {
        acc += qi;
        cdf.push(acc);
    }
    let mut rng = rng::stream(seed);
    (0..n)
        .map(|_| {
            let u = rng.gen::<f64>() * acc;
            let i = cdf.partition_point(|&c| c <= u).min(q.len() - 1);
            KlSample::new(log_ratio[i])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub estimator: String,
    pub mean: f64,
    pub std_error: f64,
    pub variance: f64,
    /// `KL(q || p)`, the quantity the estimators target.
    pub exact_kl: f64,
}

pub fn calibration_table(p: &[f64], q: &[f64], n: usize, seed: u64) -> Result<Vec<CalibrationRow>> {
    let samples = sample_log_ratios(p, q, n, seed)?;
    let exact = exact_kl(q, p)?;
    Ok(Estimator::ALL
        .iter()
        .map(|&e| {
            let m = moments(&samples, e);
            CalibrationRow {
                estimator: e.name().into(),
                mean: m.mean,
                std_error: m.std_error,
                variance: m.variance,
                exact_kl: exact,
            }
        })
        .collect())
}

/// Random categorical pair with `p` a perturbation of `q` by logit noise of
/// amplitude `gap`.
pub fn random_pair(k: usize, gap: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = rng::stream(seed);
    let zq: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let zp: Vec<f64> = zq.iter().map(|z| z + gap * rng.gen_range(-1.0..1.0)).collect();
    (crate::policy::softmax(&zp, 1.0), crate::policy::softmax(&zq, 1.0))
}
