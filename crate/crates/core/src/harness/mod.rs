//! Training loop, evaluation and the algorithm × KL-regime grid.

mod eval;

pub use eval::{eval_constraints, ConstraintRates, DecodeMode};

use std::fs;
use std::path::Path;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::advantage::{self, Baseline, GroupInput};
use crate::error::{ensure, Error, Result};
use crate::policy::{critic_features, sample_trajectory, ContextSchema, CriticParams, InitSpec, PolicyParams};
use crate::rlvr::{composite_reward, filter_candidates, length_ratio, Candidate, RlvrConfig};
use crate::rng;
use crate::surrogate::{
    dapo_overlong_penalty, loss_and_grad, preset, Algorithm, KlRegime, Optimizer, SequenceSample, TrainConfig,
};
use crate::toyenv::{EnvSpec, Environment, Prompt};

const TRAIN_TAG: u64 = 0x5452_4149;
const ROLLOUT_TAG: u64 = 0x524f_4c4c;
const EVAL_TAG: u64 = 0x4556_414c;
const EVAL_SAMPLE_TAG: u64 = 0x4553_4d50;

/// Stop once the mean training composite over the last `window` steps moves
/// less than `tolerance` from the window before it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStop {
    pub window: usize,
    pub tolerance: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self { window: 100, tolerance: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSpec {
    pub train: TrainConfig,
    pub rlvr: RlvrConfig,
    pub env: EnvSpec,
    pub init: InitSpec,
    pub steps: usize,
    /// Prompts per micro-batch.
    pub prompts_per_step: usize,
    pub eval_every: usize,
    pub eval_prompts: usize,
    pub seed: u64,
    pub early_stop: Option<EarlyStop>,
    /// Keep the advantage tensor every this many steps (0 never), written
    /// as CSV by [`run_to_dir`].
    pub dump_advantages_every: usize,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            rlvr: RlvrConfig::default(),
            env: EnvSpec::default(),
            init: InitSpec::default(),
            steps: 200,
            prompts_per_step: 4,
            eval_every: 50,
            eval_prompts: 200,
            seed: 0,
            early_stop: None,
            dump_advantages_every: 0,
        }
    }
}

/// Overlays `patch` onto `base`, recursing into objects.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// A preset with some of its fields replaced. Unknown keys are rejected.
pub fn resolve_train(algorithm: Algorithm, overrides: &Value) -> Result<TrainConfig> {
    let mut v = serde_json::to_value(preset(algorithm))?;
    merge(&mut v, overrides);
    let cfg: TrainConfig = serde_json::from_value(v)?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunSpec {
    /// Parses a run file. An optional top-level `"preset"` names the
    /// algorithm whose configuration `"train"` is layered on.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut v: Value = serde_json::from_str(text)?;
        let obj = v.as_object_mut().ok_or_else(|| Error::Config("run file must be a JSON object".into()))?;
        if let Some(p) = obj.remove("preset") {
            let alg: Algorithm = serde_json::from_value(p)?;
            let overrides = obj.remove("train").unwrap_or(Value::Object(Default::default()));
            obj.insert("train".into(), serde_json::to_value(resolve_train(alg, &overrides)?)?);
        }
        let spec: RunSpec = serde_json::from_value(v)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.rlvr.validate()?;
        ensure(self.prompts_per_step >= 1, || "prompts_per_step must be at least 1".into())?;
        ensure(self.eval_every >= 1, || "eval_every must be at least 1".into())?;
        ensure(self.eval_prompts >= 1, || "eval_prompts must be at least 1".into())?;
        if let Some(e) = self.early_stop {
            ensure(e.window >= 1, || "early_stop window must be at least 1".into())?;
        }
        Environment::new(self.env)?;
        ContextSchema::new(&Environment::new(self.env)?.vocab, self.train.max_len, self.train.position_bucket_width)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub seed: u64,
    pub algorithm: Algorithm,
    pub kl_regime: KlRegime,
    /// Mean per-token entropy of sampled evaluation outputs.
    pub entropy: f64,
    /// Mean sampled output length, EOS excluded.
    pub response_length: f64,
    pub composite: f64,
    /// Greedy-decoded gate pass rates.
    pub constraints: ConstraintRates,
    pub kl_k1: f64,
    pub kl_k2: f64,
    pub kl_k3: f64,
    /// Share of clipped tokens in the most recent update.
    pub clip_fraction: f64,
    /// Mean composite of the candidates trained on in the most recent step.
    pub train_composite: f64,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "step,seed,algorithm,kl_regime,entropy,response_length,composite,\
lang_rate,length_rate,format_rate,mixing_rate,overall_rate,kl_k1,kl_k2,kl_k3,clip_fraction,train_composite";

    pub fn csv_row(&self) -> String {
        let c = &self.constraints;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.seed,
            self.algorithm.name(),
            self.kl_regime.name(),
            self.entropy,
            self.response_length,
            self.composite,
            c.language,
            c.length,
            c.format,
            c.mixing,
            c.overall,
            self.kl_k1,
            self.kl_k2,
            self.kl_k3,
            self.clip_fraction,
            self.train_composite
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub initial: PolicyParams,
    pub params: PolicyParams,
    pub env: Environment,
    /// Steps actually taken, fewer than requested after an early stop.
    pub steps_run: usize,
    /// `(step, csv)` for each kept advantage tensor.
    pub advantage_dumps: Vec<(usize, String)>,
}

impl RunOutput {
    pub fn metrics_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn summary_csv(&self) -> String {
        summary_csv(&self.records)
    }

    pub fn final_record(&self) -> &MetricsRecord {
        self.records.last().expect("a run always has its step-0 record")
    }
}

pub fn summary_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(MetricsRecord::CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Held-out prompts, fixed by the run seed and disjoint in seed space from
/// the training stream.
pub fn eval_prompt_set(env: &Environment, seed: u64, n: usize) -> Vec<Prompt> {
    (0..n).map(|i| env.prompt(rng::derive(seed, &[EVAL_TAG, i as u64]))).collect()
}

fn map_ordered<T: Sync, U: Send>(items: &[T], f: impl Fn(usize, &T) -> U + Sync + Send) -> Vec<U> {
    #[cfg(feature = "parallel")]
    {
        items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}

struct Evaluator<'a> {
    spec: &'a RunSpec,
    env: &'a Environment,
    reference: &'a PolicyParams,
    prompts: Vec<Prompt>,
}

impl Evaluator<'_> {
    fn record(
        &self,
        params: &PolicyParams,
        step: usize,
        clip_fraction: f64,
        train_composite: f64,
    ) -> Result<MetricsRecord> {
        let t = &self.spec.train;
        let sample_seed = rng::derive(self.spec.seed, &[EVAL_SAMPLE_TAG]);
        let stats = eval::sample_stats(
            params,
            self.reference,
            self.env,
            &self.spec.rlvr,
            &self.prompts,
            t.tau,
            t.max_len,
            sample_seed,
        )?;
        let constraints = eval_constraints(
            params,
            self.env,
            &self.spec.rlvr,
            &self.prompts,
            DecodeMode::Greedy,
            t.tau,
            t.max_len,
            0,
        )?;
        Ok(MetricsRecord {
            step,
            seed: self.spec.seed,
            algorithm: t.algorithm,
            kl_regime: t.kl_regime,
            entropy: stats.entropy,
            response_length: stats.response_length,
            composite: stats.composite,
            constraints,
            kl_k1: stats.kl_k1,
            kl_k2: stats.kl_k2,
            kl_k3: stats.kl_k3,
            clip_fraction,
            train_composite,
        })
    }
}

/// Samples, scores, filters, estimates advantages and updates, once per
/// step, evaluating every `eval_every` steps and after the last one.
pub fn run(spec: &RunSpec) -> Result<RunOutput> {
    spec.validate()?;
    let env = Environment::new(spec.env)?;
    let cfg = &spec.train;
    let schema = ContextSchema::new(&env.vocab, cfg.max_len, cfg.position_bucket_width)?;
    let initial = PolicyParams::init(&env, schema, &spec.init);
    let mut params = initial.clone();
    let mut critic = CriticParams::zeros(&schema);
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let reference = initial.clone();
    let evaluator = Evaluator {
        spec,
        env: &env,
        reference: &reference,
        prompts: eval_prompt_set(&env, spec.seed, spec.eval_prompts),
    };

    let mut records = vec![evaluator.record(&params, 0, 0.0, 0.0)?];
    let mut history: Vec<f64> = Vec::new();
    let mut advantage_dumps = Vec::new();
    let mut steps_run = 0;

    for step in 1..=spec.steps {
        let prompts: Vec<Prompt> = (0..spec.prompts_per_step)
            .map(|j| env.prompt(rng::derive(spec.seed, &[TRAIN_TAG, step as u64, j as u64])))
            .collect();

        let groups: Vec<Vec<Candidate>> = map_ordered(&prompts, |j, prompt| -> Result<Vec<Candidate>> {
            let cands = (0..cfg.candidates)
                .map(|k| {
                    let seed = rng::derive(spec.seed, &[ROLLOUT_TAG, step as u64, j as u64, k as u64]);
                    let trajectory = sample_trajectory(&params, &env.vocab, prompt, cfg.tau, cfg.max_len, seed);
                    let out = trajectory.output(env.vocab.eos);
                    let breakdown = composite_reward(&env, prompt, out, &spec.rlvr)?;
                    let output_len = out.len();
                    Ok(Candidate { trajectory, breakdown, output_len })
                })
                .collect::<Result<Vec<_>>>()?;
            if cfg.filter {
                filter_candidates(cands, cfg.group_size)
            } else {
                Ok(cands.into_iter().take(cfg.group_size).collect())
            }
        })
        .into_iter()
        .collect::<Result<_>>()?;

        let mut inputs = Vec::with_capacity(groups.len());
        let mut train_composite = 0.0;
        for (prompt, group) in prompts.iter().zip(&groups) {
            let mut rewards = Vec::with_capacity(group.len());
            for c in group {
                train_composite += c.breakdown.composite;
                rewards.push(training_reward(spec, prompt, c)?);
            }
            let critic_values = (cfg.advantage.baseline == Baseline::Critic).then(|| {
                group
                    .iter()
                    .map(|c| {
                        (0..c.trajectory.len()).map(|t| critic.value(&critic_features(&schema, prompt, t))).collect()
                    })
                    .collect()
            });
            inputs.push(GroupInput {
                sequence_rewards: rewards,
                entropies: group.iter().map(|c| c.trajectory.entropies.clone()).collect(),
                critic_values,
            });
        }
        train_composite /= (groups.len() * cfg.group_size) as f64;
        let adv = advantage::estimate(&inputs, &cfg.advantage)?;
        if spec.dump_advantages_every > 0 && step % spec.dump_advantages_every == 0 {
            advantage_dumps.push((step, adv.to_csv()));
        }

        let batch: Vec<SequenceSample<'_>> = prompts
            .iter()
            .zip(&groups)
            .enumerate()
            .flat_map(|(gi, (prompt, group))| {
                let adv = &adv;
                group.iter().enumerate().map(move |(i, c)| SequenceSample {
                    prompt,
                    trajectory: &c.trajectory,
                    advantages: &adv.values[gi][i],
                })
            })
            .collect();

        let old = params.clone();
        let kl_ref = (cfg.kl_regime != KlRegime::None).then_some(&reference);
        let mut clip_fraction = 0.0;
        for _ in 0..cfg.epochs {
            let (report, grad) = loss_and_grad(&params, &old, kl_ref, &batch, cfg)?;
            clip_fraction = report.clip_fraction;
            optimizer.apply(&mut params, &grad, cfg.step_size);
        }
        drop(batch);

        if cfg.advantage.baseline == Baseline::Critic {
            let mut feats = Vec::new();
            let mut returns = Vec::new();
            for ((prompt, group), rewards) in prompts.iter().zip(&groups).zip(&adv.rewards) {
                for (c, r) in group.iter().zip(rewards) {
                    for (t, &rt) in r.iter().enumerate().take(c.trajectory.len()) {
                        feats.push(critic_features(&schema, prompt, t));
                        returns.push(rt);
                    }
                }
            }
            critic.fit(&feats, &returns, 1e-3)?;
        }

        if params.logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFiniteLogits { context: 0 });
        }
        steps_run = step;
        history.push(train_composite);
        let stop = spec.early_stop.is_some_and(|e| plateaued(&history, e));
        if step % spec.eval_every == 0 || step == spec.steps || stop {
            records.push(evaluator.record(&params, step, clip_fraction, train_composite)?);
        }
        if stop {
            break;
        }
    }

    Ok(RunOutput { records, initial, params, env, steps_run, advantage_dumps })
}

/// Composite plus the verbosity bonus (capped where the length gate binds)
/// and the overlong penalty when configured.
fn training_reward(spec: &RunSpec, prompt: &Prompt, c: &Candidate) -> Result<f64> {
    let mut r = c.breakdown.composite;
    if spec.env.verbosity_bias > 0.0 {
        let rho = length_ratio(prompt.len(), c.output_len)?;
        r += spec.env.verbosity_bias * rho.min(spec.rlvr.range_hi);
    }
    if let Some(o) = spec.train.overlong {
        r += dapo_overlong_penalty(c.output_len, o.threshold, o.slope);
    }
    Ok(r)
}

fn plateaued(history: &[f64], e: EarlyStop) -> bool {
    let w = e.window;
    if history.len() < 2 * w {
        return false;
    }
    let n = history.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&history[n - w..]) - mean(&history[n - 2 * w..n - w])).abs() < e.tolerance
}

/// Runs and writes `metrics.jsonl`, `summary.csv`, `checkpoint.json` and
/// the resolved `config.json` into `dir`, plus `advantages/step_N.csv`
/// when advantage dumps are on.
pub fn run_to_dir(spec: &RunSpec, dir: &Path) -> Result<RunOutput> {
    let out = run(spec)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.jsonl"), out.metrics_jsonl()?)?;
    fs::write(dir.join("summary.csv"), out.summary_csv())?;
    fs::write(dir.join("checkpoint.json"), out.params.to_json()?)?;
    fs::write(dir.join("config.json"), spec.to_json()?)?;
    if !out.advantage_dumps.is_empty() {
        let adv_dir = dir.join("advantages");
        fs::create_dir_all(&adv_dir)?;
        for (step, csv) in &out.advantage_dumps {
            fs::write(adv_dir.join(format!("step_{step}.csv")), csv)?;
        }
    }
    Ok(out)
}

/// Grid settings: everything but the algorithm and KL regime is shared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub algorithms: Vec<Algorithm>,
    pub kl_regimes: Vec<KlRegime>,
    /// Fields applied on top of every preset.
    pub train: Value,
    pub rlvr: RlvrConfig,
    pub env: EnvSpec,
    pub init: InitSpec,
    pub steps: usize,
    pub prompts_per_step: usize,
    pub eval_every: usize,
    pub eval_prompts: usize,
    pub seed: u64,
}

impl Default for GridSpec {
    fn default() -> Self {
        let r = RunSpec::default();
        Self {
            algorithms: Algorithm::ALL.to_vec(),
            kl_regimes: KlRegime::ALL.to_vec(),
            train: Value::Object(Default::default()),
            rlvr: r.rlvr,
            env: r.env,
            init: r.init,
            steps: r.steps,
            prompts_per_step: r.prompts_per_step,
            eval_every: r.eval_every,
            eval_prompts: r.eval_prompts,
            seed: r.seed,
        }
    }
}

impl GridSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let g: GridSpec = serde_json::from_str(text)?;
        g.cells()?;
        Ok(g)
    }

    /// One run per (algorithm, KL regime), in row-major order.
    pub fn cells(&self) -> Result<Vec<RunSpec>> {
        ensure(!self.algorithms.is_empty() && !self.kl_regimes.is_empty(), || "empty grid".into())?;
        let mut out = Vec::new();
        for &alg in &self.algorithms {
            for &kl in &self.kl_regimes {
                let mut train = resolve_train(alg, &self.train)?;
                train.kl_regime = kl;
                let spec = RunSpec {
                    train,
                    rlvr: self.rlvr,
                    env: self.env,
                    init: self.init,
                    steps: self.steps,
                    prompts_per_step: self.prompts_per_step,
                    eval_every: self.eval_every,
                    eval_prompts: self.eval_prompts,
                    seed: self.seed,
                    early_stop: None,
                    dump_advantages_every: 0,
                };
                spec.validate()?;
                out.push(spec);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct GridCell {
    pub algorithm: Algorithm,
    pub kl_regime: KlRegime,
    pub output: RunOutput,
}

/// Runs every cell. With `dir`, writes `<algorithm>_<kl>.jsonl` per cell and
/// a joined `grid.csv`.
pub fn run_grid(grid: &GridSpec, dir: Option<&Path>) -> Result<Vec<GridCell>> {
    let mut cells = Vec::new();
    for spec in grid.cells()? {
        let output = run(&spec)?;
        cells.push(GridCell { algorithm: spec.train.algorithm, kl_regime: spec.train.kl_regime, output });
    }
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
        let mut joined = Vec::new();
        for c in &cells {
            let name = format!("{}_{}.jsonl", c.algorithm.name(), c.kl_regime.name());
            fs::write(dir.join(name), c.output.metrics_jsonl()?)?;
            joined.extend(c.output.records.iter().cloned());
        }
        fs::write(dir.join("grid.csv"), summary_csv(&joined))?;
    }
    Ok(cells)
}
