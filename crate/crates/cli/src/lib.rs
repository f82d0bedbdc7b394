//! `uqkit` command line: run configs, benchmark method sweeps, render
//! comparison tables, and emit plot data.
//!
//! Exit codes: 0 on success, 1 with a one-line diagnostic on runtime
//! failures, 2 on usage errors.

use clap::{Parser, Subcommand, ValueEnum};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use uqkit::harness::{
    benchmark, collect_runs, emit_plot_data, run, rows_to_csv, rows_to_text, table_rows,
    ExperimentConfig, PlotKind,
};

#[derive(Parser)]
#[command(name = "uqkit", version, about = "Uncertainty-quantification benchmark harness")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one experiment config and persist its run directory.
    Run {
        /// Path to a TOML experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed (derived seeds follow).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every `.toml` config in a directory (sorted by file name) as
    /// one benchmark over a shared dataset and split.
    Benchmark {
        #[arg(long)]
        config_dir: PathBuf,
        /// Directory for benchmark.csv / benchmark.txt
        /// (default: `<config-dir>/results`).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Override every config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rebuild a comparison table from persisted run directories.
    Report {
        /// A run directory or a directory of run directories.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Write columnar plot data for one persisted run.
    PlotData {
        /// A run directory.
        #[arg(long)]
        input: PathBuf,
        /// calibration-curve | selective-curve | interval-series | group-bars
        #[arg(long)]
        kind: String,
    },
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
enum Format {
    Csv,
    Table,
}

/// Parse and execute; returns the process exit code.
pub fn cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(argv) {
        Ok(parsed) => parsed,
        Err(e) => {
            // clap renders its own help/version through the error path.
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(parsed) {
        Ok(stdout) => {
            print!("{stdout}");
            0
        }
        Err(e) => {
            eprintln!("uqkit: {e}");
            1
        }
    }
}

/// Run a parsed command, returning what should land on stdout.
pub fn execute(cli: Cli) -> Result<String, uqkit::harness::HarnessError> {
    match cli.command {
        Command::Run { config, seed } => {
            let config = ExperimentConfig::load(&config, seed)?;
            let record = run(&config)?;
            let mut out = format!(
                "run {} ({}) -> {}\n",
                record.method, record.task, record.config.output
            );
            for warning in &record.warnings {
                out.push_str(&format!("warning: {warning}\n"));
            }
            Ok(out)
        }
        Command::Benchmark {
            config_dir,
            output,
            seed,
        } => {
            let configs = load_config_dir(&config_dir, seed)?;
            let table_dir = output.unwrap_or_else(|| config_dir.join("results"));
            let records = benchmark(&configs, &table_dir)?;
            let rows = table_rows(&records)?;
            Ok(format!(
                "benchmark: {} methods -> {}\n{}",
                records.len(),
                table_dir.display(),
                rows_to_text(&rows)
            ))
        }
        Command::Report { input, format } => {
            let records = collect_runs(&input)?;
            let rows = table_rows(&records)?;
            Ok(match format {
                Format::Csv => rows_to_csv(&rows),
                Format::Table => rows_to_text(&rows),
            })
        }
        Command::PlotData { input, kind } => {
            let kind = PlotKind::parse(&kind).ok_or_else(|| {
                uqkit::harness::HarnessError::Config(format!(
                    "unknown plot kind {kind:?} (expected calibration-curve, selective-curve, \
                     interval-series, or group-bars)"
                ))
            })?;
            let path = emit_plot_data(&input, kind)?;
            Ok(format!("wrote {}\n", path.display()))
        }
    }
}

fn load_config_dir(
    dir: &Path,
    seed: Option<u64>,
) -> Result<Vec<ExperimentConfig>, uqkit::harness::HarnessError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| {
            uqkit::harness::HarnessError::Config(format!("cannot read {}: {e}", dir.display()))
        })?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|ext| ext == "toml"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(uqkit::harness::HarnessError::Config(format!(
            "no .toml configs under {}",
            dir.display()
        )));
    }
    paths
        .iter()
        .map(|p| ExperimentConfig::load(p, seed))
        .collect()
}
