use advicl::TrainMode;
use advicl_harness::verify::{verify_all, VerifyPlan};
use advicl_harness::{commands, ExperimentConfig};
use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "advicl",
    version,
    about = "Adversarial in-context learning experiments for linear self-attention"
)]
struct Cli {
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Restricted,
    Full,
    Minimax,
}

impl From<Mode> for TrainMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Restricted => TrainMode::RestrictedAnalytic,
            Mode::Full => TrainMode::FullMc,
            Mode::Minimax => TrainMode::MinimaxEmpirical,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Robust error and bound over the (M_train, M_test) grid; writes sweep.csv and summary.json.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Trains on the first M_train; writes a checkpoint and the trajectory CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
    },
    /// Robust error of a checkpoint at every M_test.
    AttackEval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Regime constants, closed-form optimum, bounds and convergence constants.
    Theory {
        #[arg(long)]
        config: PathBuf,
    },
    /// Runs the verification suite; writes verify.json and exits nonzero on failure.
    Verify {
        #[arg(long)]
        config: PathBuf,
        /// Flip the sign of the analytic gradient to check that the suite can fail.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Correlation between robust error and √M_test/M_train in a sweep CSV.
    Correlate {
        #[arg(long)]
        csv: PathBuf,
    },
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg =
        ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn print_json(v: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(v)?) {
        // A closed reader (e.g. `| head`) is not an error.
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Sweep { config } => print_json(&commands::sweep(&load(&config, cli.seed)?)?)?,
        Command::Train { config, mode } => {
            print_json(&commands::train(&load(&config, cli.seed)?, mode.into())?)?
        }
        Command::AttackEval { config, checkpoint } => print_json(&commands::attack_eval(
            &load(&config, cli.seed)?,
            &checkpoint,
        )?)?,
        Command::Theory { config } => print_json(&commands::theory(&load(&config, cli.seed)?)?)?,
        Command::Verify {
            config,
            inject_fault,
        } => {
            let cfg = load(&config, cli.seed)?;
            let plan = VerifyPlan {
                inject_fault,
                ..VerifyPlan::default()
            };
            let report = verify_all(&cfg, &plan)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let path = cfg.output_dir.join("verify.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
            for c in &report.checks {
                let status = match (c.passed, c.informational) {
                    (true, _) => "pass",
                    (false, true) => "info",
                    (false, false) => "FAIL",
                };
                eprintln!(
                    "{status:4} {:<36} measured={:<12.6e} threshold={:e}",
                    c.name, c.measured, c.threshold
                );
            }
            eprintln!("report written to {}", path.display());
            if !report.passed {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Correlate { csv } => {
            print_json(&commands::correlate_csv(&csv, cli.seed.unwrap_or(0))?)?
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
