use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qbsde::config::{execute, parse_config, ExperimentKind, Overrides, RunConfig, EXIT_CONFIG, EXIT_FAIL};
use qbsde::harness::HarnessError;

#[derive(Parser)]
#[command(name = "qbsde", version, about = "Quadratic BSDE experiments from declarative configs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment named in the config.
    Run(Target),
    /// Evaluate the structural hypotheses and print the report.
    CheckCondition(Target),
    /// Finite-difference sweep over the perturbation sizes in the config.
    Sweep(Target),
}

#[derive(Args)]
struct Target {
    config: PathBuf,
    /// First seed; further seeds follow consecutively.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Monte Carlo path count.
    #[arg(long)]
    paths: Option<usize>,
    /// Monte Carlo time steps.
    #[arg(long)]
    steps: Option<usize>,
}

fn load(t: &Target) -> Result<RunConfig, String> {
    let text = fs::read_to_string(&t.config).map_err(|e| format!("{}: {e}", t.config.display()))?;
    let mut cfg = parse_config(&text).map_err(|e| format!("{}:\n{e}", t.config.display()))?;
    let o = Overrides { seed: t.seed, out_dir: t.out_dir.clone(), paths: t.paths, steps: t.steps };
    cfg.apply(&o).map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (target, kind) = match &cli.command {
        Command::Run(t) => (t, None),
        Command::CheckCondition(t) => (t, Some(ExperimentKind::Condition)),
        Command::Sweep(t) => (t, Some(ExperimentKind::DeltaSweep)),
    };
    let cfg = match load(target) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    let kind = kind.unwrap_or(cfg.experiment);
    match execute(&cfg, kind) {
        Ok(out) => {
            if out.exit_code == 0 {
                print!("{}", out.summary);
            } else {
                eprint!("{}", out.summary);
            }
            ExitCode::from(out.exit_code as u8)
        }
        Err(HarnessError::Config(e)) => {
            eprintln!("{e}");
            ExitCode::from(EXIT_CONFIG as u8)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(EXIT_FAIL as u8)
        }
    }
}
