use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mte_cli::commands;
use mte_cli::config::{Estimator, Overrides, Side};

#[derive(Parser)]
#[command(name = "mte", version, about = "Marginal treatment effects of deductible choice")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic Roy panel; writes panel.csv and oracle.json.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run pipeline and estimator; writes report.json, mte_curve.csv,
    /// support.csv and dropped_rows.csv.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        treatment: Option<Side>,
        #[arg(long, value_enum)]
        estimator: Option<Estimator>,
        /// Bootstrap replications; 0 reports point estimates only.
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        stable_only: bool,
        /// `dimension=band`, e.g. `household_size=3+`.
        #[arg(long)]
        stratum: Option<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Monte Carlo study against the DGP oracle; writes mc_summary.csv and
    /// mc_replicates.csv.
    McStudy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Bootstrap replications per replicate.
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Side-by-side table of report bundles.
    Report {
        #[arg(required = true)]
        bundles: Vec<PathBuf>,
        /// Also write comparison.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate { config, seed, out } => {
            commands::simulate(&config, seed, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Estimate { config, seed, treatment, estimator, reps, stable_only, stratum, out } => {
            let overrides = Overrides { seed, treatment, estimator, reps, stable_only, stratum };
            let result = commands::estimate(&config, &overrides, &out)?;
            let table = mte_cli::report::compare(std::slice::from_ref(&result.bundle))?;
            print!("{}", table.to_text());
            println!("wrote {}", out.display());
        }
        Command::McStudy { config, seed, reps, out } => {
            let summary = commands::mc_study(&config, seed, reps, &out)?;
            println!("estimator  quantity      u       n    bias     rmse  coverage");
            for s in &summary {
                let u = s.u.map(|u| format!("{u:.2}")).unwrap_or_else(|| "-".into());
                let cov = s.coverage.map(|c| format!("{c:.3}")).unwrap_or_else(|| "-".into());
                println!(
                    "{:<9}  {:<8}  {:>5}  {:>6}  {:>7.4}  {:>7.4}  {:>8}",
                    s.estimator, s.quantity, u, s.n, s.bias, s.rmse, cov
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Report { bundles, out } => {
            print!("{}", commands::report(&bundles, out.as_deref())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
