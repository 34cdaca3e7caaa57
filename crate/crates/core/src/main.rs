use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedthe::harness::{self, selftest};
use fedthe::Error;

/// Two-head personalized FL with test-time head ensembling.
#[derive(Debug, Parser)]
#[command(name = "fedthe", version)]
struct Cli {
    /// Replace the config's seed list with this single seed.
    #[arg(long, global = true)]
    seed_override: Option<u64>,

    /// Output directory (overrides the config's output_dir for `run`; where
    /// report and histogram files are written otherwise).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the experiment grid described by a TOML config.
    Run { config: PathBuf },
    /// Summarize a metrics.jsonl file into a table.
    Report { metrics: PathBuf },
    /// Histogram of 1 - e per stream from an etrace.csv file.
    Ehist {
        trace: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Only rows of this method.
        #[arg(long)]
        method: Option<String>,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

fn write_beside(out: Option<&Path>, name: &str, text: &str) -> Result<(), Error> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        })?;
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Run { config } => {
            let mut cfg = harness::load_config(&config)?;
            if let Some(seed) = cli.seed_override {
                cfg.seeds = vec![seed];
            }
            if let Some(out) = cli.out {
                cfg.output_dir = out;
            }
            let grid = harness::run_grid(&cfg)?;
            let table = harness::build_report(&grid.records().cloned().collect::<Vec<_>>())?;
            print!("{}", table.to_text());
            std::fs::write(cfg.output_dir.join("report.csv"), table.to_csv()).map_err(|e| {
                Error::Io {
                    path: cfg.output_dir.join("report.csv"),
                    source: e,
                }
            })?;
            eprintln!("metrics written to {}", grid.metrics_path.display());
            Ok(true)
        }
        Command::Report { metrics } => {
            let mut records = harness::read_metrics(&metrics)?;
            if let Some(seed) = cli.seed_override {
                records.retain(|r| r.seed == seed);
            }
            let table = harness::build_report(&records)?;
            print!("{}", table.to_text());
            write_beside(cli.out.as_deref(), "report.csv", &table.to_csv())?;
            Ok(true)
        }
        Command::Ehist {
            trace,
            bins,
            method,
        } => {
            let mut rows = harness::read_traces(&trace)?;
            if let Some(seed) = cli.seed_override {
                rows.retain(|r| r.seed == seed);
            }
            let hists = harness::e_histograms(
                rows.iter()
                    .filter(|r| method.as_ref().is_none_or(|m| &r.method == m)),
                bins,
            )?;
            let csv = harness::histograms_to_csv(&hists);
            print!("{csv}");
            write_beside(cli.out.as_deref(), "ehist.csv", &csv)?;
            Ok(true)
        }
        Command::Selftest => {
            let start = std::time::Instant::now();
            let verdicts = selftest::selftest();
            for v in &verdicts {
                println!("{}", v.line());
            }
            let failed = verdicts.iter().filter(|v| !v.passed()).count();
            println!(
                "{} / {} properties passed in {:.1}s",
                verdicts.len() - failed,
                verdicts.len(),
                start.elapsed().as_secs_f64()
            );
            Ok(failed == 0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
