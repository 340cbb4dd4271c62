use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use overlap_lab::runner::{run, summarize, RunOptions};

/// Seeded experiments on random overlap structures.
#[derive(Parser)]
#[command(name = "overlap-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every suite of a config and write reports, summary.csv and manifest.json.
    Run {
        config: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// Multiply every realization budget.
        #[arg(long)]
        budget_scale: Option<f64>,
    },
    /// Print the table of a finished run and rewrite its summary.csv.
    Summarize { manifest: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, seed, out_dir, jobs, budget_scale } => {
            let opts = RunOptions { seed, out_dir, jobs, budget_scale };
            match run(&config, &opts) {
                Ok(m) if m.pass => {
                    println!("all {} suites pass ({:.2}s)", m.reports.len(), m.runtime_seconds);
                    ExitCode::SUCCESS
                }
                Ok(m) => {
                    eprintln!("failing suites: {}", m.failing_suites.join(", "));
                    ExitCode::from(1)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
        Command::Summarize { manifest } => match summarize(&manifest) {
            Ok(s) => {
                print!("{}", s.table);
                for p in &s.missing {
                    eprintln!("missing report: {}", p.display());
                }
                ExitCode::from(s.exit_code() as u8)
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
    }
}
