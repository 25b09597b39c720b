use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use prefguide::config::{ExperimentConfig, Overrides};
use prefguide::experiment::{self, Sweep};
use prefguide::Result;

#[derive(Parser)]
#[command(name = "prefguide", version, about = "Preference-grounded token-level guidance experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of `run.seeds`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to `$PREFGUIDE_OUT/<config>/<command>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Aggregation: sum, avg, max or min.
    #[arg(long)]
    agg: Option<String>,
    /// Soft-max / soft-min temperature.
    #[arg(long)]
    beta: Option<f64>,
    /// Entropy coefficient.
    #[arg(long)]
    alpha: Option<f64>,
    /// Sequences per preference group.
    #[arg(long)]
    k: Option<usize>,
    /// Policy mode: reinforce, weighted_mle, vanilla_mle, seq_reinforce,
    /// seq_weighted_mle or sparse_kl.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    K,
    Beta,
    Alpha,
    Agg,
    Retrain,
    SeqVsToken,
}

impl From<SweepArg> for Sweep {
    fn from(s: SweepArg) -> Self {
        match s {
            SweepArg::K => Sweep::K,
            SweepArg::Beta => Sweep::Beta,
            SweepArg::Alpha => Sweep::Alpha,
            SweepArg::Agg => Sweep::Agg,
            SweepArg::Retrain => Sweep::Retrain,
            SweepArg::SeqVsToken => Sweep::SeqVsToken,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit the reward on groups sampled from the initial policy.
    TrainReward(Common),
    /// Train the policy against a single reward fit or a saved reward.
    TrainLm {
        #[command(flatten)]
        common: Common,
        /// Frozen reward checkpoint; skips reward fitting.
        #[arg(long)]
        reward: Option<PathBuf>,
    },
    /// Alternate reward estimation and policy training.
    Alternate(Common),
    /// Sweep one setting and summarize across seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        sweep: SweepArg,
    },
    /// Enumeration-based consistency checks on the configured task.
    OracleCheck(Common),
}

fn load(c: &Common, name: &str) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    Overrides {
        seed: c.seed,
        out: c.out.clone(),
        agg: c.agg.clone(),
        beta: c.beta,
        alpha: c.alpha,
        k: c.k,
        mode: c.mode.clone(),
    }
    .apply(&mut cfg)?;
    let env_root = std::env::var_os("PREFGUIDE_OUT").map(PathBuf::from);
    let out = experiment::resolve_out(&cfg, &c.config, name, env_root);
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<bool> {
    let report = |summary: prefguide::output::Summary, out: &PathBuf| {
        print!("{}", summary.render());
        println!("wrote {}", out.join("summary.csv").display());
        true
    };
    Ok(match cli.command {
        Command::TrainReward(c) => {
            let (cfg, out) = load(&c, "train-reward")?;
            report(experiment::train_reward_cmd(&cfg, &out)?, &out)
        }
        Command::TrainLm { common, reward } => {
            let (cfg, out) = load(&common, "train-lm")?;
            report(experiment::train_lm(&cfg, reward.as_deref(), &out)?, &out)
        }
        Command::Alternate(c) => {
            let (cfg, out) = load(&c, "alternate")?;
            report(experiment::alternate(&cfg, &out)?, &out)
        }
        Command::Ablate { common, sweep } => {
            let sweep = Sweep::from(sweep);
            let (cfg, out) = load(&common, &format!("ablate-{}", sweep.name()))?;
            report(experiment::ablate(&cfg, sweep, &out)?, &out)
        }
        Command::OracleCheck(c) => {
            let (cfg, out) = load(&c, "oracle-check")?;
            let checks = experiment::oracle_check(&cfg, &out)?;
            for ch in &checks {
                println!(
                    "seed {:<4} {:<30} {:>12.3e} <= {:<8e} {}",
                    ch.seed,
                    ch.name,
                    ch.value,
                    ch.tolerance,
                    if ch.passed { "ok" } else { "FAIL" }
                );
            }
            println!("wrote {}", out.join("oracle_check.csv").display());
            checks.iter().all(|c| c.passed)
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
