use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use refac_cli::commands::{
    thresholds_csv, AnalyzeArgs, DesignArgs, SimulateArgs, SweepArgs, ThresholdsArgs, DEFAULT_REPS, DEFAULT_SEED,
};
use refac_cli::config::to_json;
use refac_cli::{cmd_analyze, cmd_design, cmd_simulate, cmd_sweep, cmd_thresholds, CliError};

/// Design and analyze rerandomized 2^K factorial experiments.
#[derive(Parser)]
#[command(name = "refac", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SeedFlag {
    /// Random seed; falls back to REFAC_SEED, then to the config file.
    #[arg(long, env = "REFAC_SEED")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw an acceptable assignment for the units of a covariate file.
    Design {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV with columns id,z.
        #[arg(long)]
        assignment: PathBuf,
        /// Output JSON balance report.
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        seed: SeedFlag,
        #[arg(long)]
        max_draws: Option<u64>,
    },
    /// Estimate effects and a confidence set from observed outcomes.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// CSV with id, covariates, y and z.
        #[arg(long)]
        data: PathBuf,
        /// JSON matrix of contrast rows; identity when omitted.
        #[arg(long)]
        contrast: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Law draws for the threshold.
        #[arg(long)]
        draws: Option<usize>,
        #[command(flatten)]
        seed: SeedFlag,
        /// Output JSON; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replicate designs on a synthetic population.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        designs: PathBuf,
        #[arg(long, default_value_t = DEFAULT_REPS)]
        reps: usize,
        #[command(flatten)]
        seed: SeedFlag,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        draws: Option<usize>,
        /// Also estimate coverage of 1-alpha confidence sets.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        max_draws: Option<u64>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Theoretical variance reductions across first-tier acceptance probabilities.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        seed: SeedFlag,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Convert between tier thresholds and acceptance probabilities.
    Thresholds {
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        #[arg(long)]
        covariates: Option<usize>,
        /// Effects per tier, used with --covariates.
        #[arg(long, value_delimiter = ',')]
        tier_sizes: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        p: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        a: Option<Vec<f64>>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Design { config, data, assignment, report, seed, max_draws } => {
            let out = cmd_design(&DesignArgs {
                config,
                data,
                assignment_out: assignment,
                report_out: report,
                seed: seed.seed,
                max_draws,
            })?;
            eprintln!("accepted after {} draws", out.draws_attempted);
        }
        Command::Analyze { config, data, contrast, alpha, draws, seed, out } => {
            let print = out.is_none();
            let res = cmd_analyze(&AnalyzeArgs { config, data, contrast, alpha, draws, seed: seed.seed, out })?;
            if print {
                print!("{}", to_json(&res));
            }
        }
        Command::Simulate { spec, designs, reps, seed, workers, draws, alpha, max_draws, csv, json } => {
            let print = csv.is_none();
            let (_, text) = cmd_simulate(&SimulateArgs {
                spec,
                designs,
                reps,
                seed: seed.seed.unwrap_or(DEFAULT_SEED),
                workers,
                draws,
                coverage_alpha: alpha,
                max_draws,
                csv_out: csv,
                json_out: json,
            })?;
            if print {
                print!("{text}");
            }
        }
        Command::Sweep { spec, config, seed, csv, json } => {
            let print = csv.is_none();
            let (_, text) = cmd_sweep(&SweepArgs {
                spec,
                config,
                seed: seed.seed.unwrap_or(DEFAULT_SEED),
                csv_out: csv,
                json_out: json,
            })?;
            if print {
                print!("{text}");
            }
        }
        Command::Thresholds { dims, covariates, tier_sizes, p, a } => {
            let rows = cmd_thresholds(&ThresholdsArgs { dims, covariates, tier_sizes, p, a })?;
            print!("{}", thresholds_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Core(refac::Error::MaxDrawsExceeded { best, .. }) = &e {
                eprintln!("closest assignment:\n{}", to_json(&best.report));
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
