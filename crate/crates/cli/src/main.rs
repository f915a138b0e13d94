use std::fs;
use std::io::{self, BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use vepo::diagnostics::{self, default_probe_token, fit_entropy_bandit, gibbs_target, logit_probe, total_variation};
use vepo::harness::{run_grid, run_to_dir, GridSpec, RunSpec};
use vepo::klprobe::{calibration_table, random_pair};
use vepo::policy::PolicyParams;
use vepo::rlvr::{RlvrConfig, ScoreRecord};
use vepo::toyenv::{EnvSpec, Environment};
use vepo::Error;

#[derive(Parser)]
#[command(name = "vepo-lab", version, about = "Toy-scale policy optimization lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics, summary, checkpoint and config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train every algorithm × KL regime cell of a grid file.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score JSONL records of {"prompt", "output", "target_script"?}.
    Score {
        /// Input file; stdin when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Environment spec (JSON); defaults when omitted.
        #[arg(long)]
        env: Option<PathBuf>,
        /// Reward weights (JSON); defaults when omitted.
        #[arg(long)]
        rlvr: Option<PathBuf>,
    },
    /// Compare an entropy-regularized bandit against its Gibbs fixed point.
    GibbsCheck {
        #[arg(long, default_value_t = 10)]
        outcomes: usize,
        #[arg(long, default_value_t = 3)]
        plateau: usize,
        #[arg(long, default_value_t = 0.25)]
        beta: f64,
        #[arg(long, default_value_t = 20_000)]
        steps: usize,
    },
    /// Fisher matrix diag(p) - p p^T and its eigenvalues.
    Fisher {
        /// Comma-separated probabilities.
        #[arg(long, value_delimiter = ',', required = true)]
        probs: Vec<f64>,
    },
    /// Analytic loss gradient against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        batches: u64,
    },
    /// Literal vs paraphrastic probability at a probe prompt, before and after.
    Probe {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long)]
        env: Option<PathBuf>,
        /// Source token to probe; the first one with a paraphrase by default.
        #[arg(long)]
        token: Option<usize>,
    },
    /// Calibration table of the k1/k2/k3 estimators on a seeded pair.
    Klprobe {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        outcomes: usize,
        #[arg(long, default_value_t = 0.3)]
        gap: f64,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Json(_) | Error::VocabMismatch { .. } | Error::EmptySource => {
                Failure::Config(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn read(path: &PathBuf) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn load_env(path: Option<&PathBuf>) -> Result<Environment, Failure> {
    let spec = match path {
        Some(p) => serde_json::from_str::<EnvSpec>(&read(p)?).map_err(Error::from)?,
        None => EnvSpec::default(),
    };
    Ok(Environment::new(spec)?)
}

fn print_json(value: &impl Serialize) -> Result<(), Failure> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run { config, out, seed } => {
            let mut spec = RunSpec::from_json(&read(&config)?)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let output = run_to_dir(&spec, &out)?;
            print_json(output.final_record())
        }
        Command::Grid { config, out, seed } => {
            let mut grid = GridSpec::from_json(&read(&config)?)?;
            if let Some(s) = seed {
                grid.seed = s;
            }
            let cells = run_grid(&grid, Some(&out))?;
            let finals: Vec<_> = cells.iter().map(|c| c.output.final_record().clone()).collect();
            print_json(&finals)
        }
        Command::Score { input, env, rlvr } => {
            let env = load_env(env.as_ref())?;
            let cfg = match rlvr {
                Some(p) => serde_json::from_str::<RlvrConfig>(&read(&p)?).map_err(Error::from)?,
                None => RlvrConfig::default(),
            };
            cfg.validate()?;
            let reader: Box<dyn BufRead> = match &input {
                Some(p) => Box::new(io::BufReader::new(
                    fs::File::open(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?,
                )),
                None => Box::new(io::stdin().lock()),
            };
            let mut stdout = io::stdout().lock();
            for (n, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| Failure::Runtime(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: ScoreRecord =
                    serde_json::from_str(&line).map_err(|e| Failure::Config(format!("line {}: {e}", n + 1)))?;
                let b = rec.score(&env, &cfg)?;
                let s = serde_json::to_string(&b).map_err(|e| Failure::Runtime(e.to_string()))?;
                writeln!(stdout, "{s}").map_err(|e| Failure::Runtime(e.to_string()))?;
            }
            Ok(())
        }
        Command::GibbsCheck { outcomes, plateau, beta, steps } => {
            if plateau == 0 || plateau > outcomes {
                return Err(Failure::Config(format!("plateau must be in 1..={outcomes}")));
            }
            let rewards: Vec<f64> = (0..outcomes).map(|i| if i < plateau { 1.0 } else { 0.0 }).collect();
            let target = gibbs_target(&rewards, beta)?;
            let learned = fit_entropy_bandit(&rewards, beta, steps)?;
            let coverage = learned[..plateau].iter().fold(f64::INFINITY, |m, &p| m.min(p)) * plateau as f64;
            print_json(&json!({
                "beta": beta,
                "rewards": rewards,
                "gibbs": target,
                "learned": learned,
                "total_variation": total_variation(&learned, &target),
                "min_plateau_coverage": coverage,
            }))
        }
        Command::Fisher { probs } => print_json(&diagnostics::fisher_matrix(&probs)?),
        Command::Gradcheck { seed, batches } => {
            let reports =
                (0..batches).map(|b| diagnostics::gradcheck(seed.wrapping_add(b))).collect::<Result<Vec<_>, _>>()?;
            let worst = reports.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
            print_json(&json!({ "max_relative_error": worst, "batches": reports }))
        }
        Command::Probe { before, after, env, token } => {
            let env = load_env(env.as_ref())?;
            let before = PolicyParams::from_json(&read(&before)?)?;
            let after = PolicyParams::from_json(&read(&after)?)?;
            let token = match token.or_else(|| default_probe_token(&env)) {
                Some(t) => t,
                None => return Err(Failure::Config("no source token has a paraphrase".into())),
            };
            print_json(&logit_probe(&before, &after, &env, token)?)
        }
        Command::Klprobe { seed, outcomes, gap, samples } => {
            if outcomes < 2 || samples == 0 {
                return Err(Failure::Config("need at least 2 outcomes and 1 sample".into()));
            }
            let (p, q) = random_pair(outcomes, gap, seed);
            print_json(&json!({ "p": p, "q": q, "rows": calibration_table(&p, &q, samples, seed)? }))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
