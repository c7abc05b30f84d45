use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use datta::experiment::{
    compare, extract_stats_stage, gen_dataset_stage, run_experiment, train_source_stage, ExperimentConfig, ExperimentError,
};

#[derive(Parser)]
#[command(name = "datta", version, about = "Distribution-alignment test-time adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model on `data.train_dir`; writes `<out>/weights.datt`.
    TrainSource(Common),
    /// Extract source statistics for `data.weights`; writes `<out>/stats.datt`.
    ExtractStats(Common),
    /// Generate the synthetic dataset into `<out>/train` and `<out>/test`.
    GenDataset(Common),
    /// Run online adaptation over the configured stream; writes the CSV trace to `<out>`.
    RunTta(Common),
    /// Tabulate mean error per method and domain for finished runs.
    Compare {
        /// Output directories of `run-tta`.
        #[arg(required = true, num_args = 2..)]
        traces: Vec<PathBuf>,
        /// Also write the table to `<out>/compare.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), ExperimentError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::TrainSource(c) => {
            let (cfg, out) = load(&c)?;
            let path = out.join("weights.datt");
            train_source_stage(&cfg, &path)?;
            println!("wrote {}", path.display());
        }
        Command::ExtractStats(c) => {
            let (cfg, out) = load(&c)?;
            let path = out.join("stats.datt");
            extract_stats_stage(&cfg, &path)?;
            println!("wrote {}", path.display());
        }
        Command::GenDataset(c) => {
            let (cfg, out) = load(&c)?;
            gen_dataset_stage(&cfg, &out)?;
            println!("wrote {} and {}", out.join("train").display(), out.join("test").display());
        }
        Command::RunTta(c) => {
            let (cfg, out) = load(&c)?;
            let trace = run_experiment(&cfg, &out)?;
            println!(
                "{}: error {:.2}% over {} samples, {} resets; trace in {}",
                trace.method,
                trace.error_pct(),
                trace.n_samples(),
                trace.n_resets(),
                out.display()
            );
        }
        Command::Compare { traces, out } => {
            let table = compare(&traces)?;
            print!("{table}");
            if let Some(dir) = out {
                write(&dir, &table)?;
            }
        }
    }
    Ok(())
}

fn write(dir: &Path, table: &str) -> Result<(), ExperimentError> {
    let path = dir.join("compare.csv");
    std::fs::create_dir_all(dir)
        .and_then(|_| std::fs::write(&path, table))
        .map_err(|source| ExperimentError::Io { path, source })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
