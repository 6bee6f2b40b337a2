use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use homodiff::config::ExperimentConfig;
use homodiff::experiment::{run_experiment, run_sweep};
use homodiff::validation::{all_passed, format_table, run_suite, Options};
use homodiff::Error;

/// Private decentralized diffusion experiments.
#[derive(Debug, Parser)]
#[command(name = "homodiff", version)]
struct Cli {
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Skip the SVG chart.
    #[arg(long, global = true)]
    no_svg: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compare the configured schemes over replicated runs.
    Run { config: PathBuf },
    /// Run the self-check suite.
    Validate {
        /// Combination matrix document to check as well.
        #[arg(long)]
        matrix: Option<PathBuf>,
        /// Configuration for the bound checks instead of the bundled one.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Repeat the comparison over values of one parameter.
    Sweep {
        config: PathBuf,
        /// One of mu, b_v, sigma_p2, K, lambda2_target.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
    },
}

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::UnknownParameter(_)
        | Error::InvalidParameter(_)
        | Error::Io { .. } => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn load(path: &Path, cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if cli.no_svg {
        cfg.emit_svg = false;
    }
    Ok(cfg)
}

fn cmd_run(cli: &Cli, path: &Path) -> Result<(), Error> {
    let cfg = load(path, cli)?;
    let out = run_experiment(&cfg)?;
    out.write_report(&cfg.output_dir, cfg.emit_svg)?;
    println!(
        "K = {}, lambda2 = {:.6}, delta = {:.4}, J* = {:.6}, {} replica(s)",
        out.setup.matrix.size(),
        out.setup.matrix.lambda2(),
        out.setup.loss.smoothness,
        out.setup.j_star,
        out.replicas
    );
    println!(
        "{:<18} {:>14} {:>14} {:>14}",
        "scheme", "final_risk", "plateau_excess", "final_epsilon"
    );
    for s in &out.summaries {
        let f = s.final_row();
        println!(
            "{:<18} {:>14.6} {:>14.6e} {:>14}",
            s.scheme.label(),
            f.risk.mean,
            s.plateau_excess_risk.mean,
            f.epsilon.to_string()
        );
    }
    println!("report written to {}", cfg.output_dir.display());
    Ok(())
}

fn cmd_validate(
    cli: &Cli,
    matrix: Option<&PathBuf>,
    config: Option<&PathBuf>,
) -> Result<bool, Error> {
    let config = config.map(|p| load(p, cli)).transpose()?;
    let opts = Options {
        seed: cli.seed.unwrap_or(0),
        matrix: matrix.cloned(),
        config,
    };
    let checks = run_suite(&opts);
    print!("{}", format_table(&checks));
    Ok(all_passed(&checks))
}

fn cmd_sweep(cli: &Cli, path: &Path, param: &str, values: &[f64]) -> Result<(), Error> {
    let cfg = load(path, cli)?;
    let sweep = run_sweep(&cfg, param, values)?;
    sweep.write_report(&cfg.output_dir, cfg.emit_svg)?;
    print!("{}", sweep.summary_csv());
    println!("reports written to {}", cfg.output_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config } => cmd_run(&cli, config).map(|_| true),
        Command::Validate { matrix, config } => {
            cmd_validate(&cli, matrix.as_ref(), config.as_ref())
        }
        Command::Sweep {
            config,
            param,
            values,
        } => cmd_sweep(&cli, config, param, values).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILURE),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
