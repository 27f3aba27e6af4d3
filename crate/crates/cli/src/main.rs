use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gapsim::artifacts::{self, LoadedRun};
use gapsim::config::{self, ExperimentConfig};
use gapsim::error::ConfigError;
use gapsim::error::Error;

/// Federated LoRA poisoning simulator.
#[derive(Debug, Parser)]
#[command(name = "gapsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment and write its run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to the config's output_dir, then
        /// $GAPSIM_OUT/<config name>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate one or more run directories as CSV.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Write the detection table here and the series and centroid
        /// tables beside it; without it all three go to stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the config once per value of one parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Dotted config key, e.g. `n_malicious` or `gap.kappa`.
        #[arg(long)]
        param: String,
        /// Comma-separated values; may be empty.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const USAGE: u8 = 1;
const RUNTIME: u8 = 2;
const IO: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => USAGE,
        Error::ConfigFile(ConfigError::Read { .. }) => IO,
        Error::ConfigFile(_) => USAGE,
        Error::Io { .. } | Error::Checkpoint(_) | Error::CorruptLog { .. } => IO,
        _ => RUNTIME,
    }
}

fn config_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

fn load(path: &Path) -> Result<ExperimentConfig, Error> {
    Ok(config::parse_config_file(path)?)
}

fn run(config_path: &Path, out: Option<PathBuf>) -> Result<(), Error> {
    let cfg = load(config_path)?;
    let dir = out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| artifacts::default_output_root().join(config_name(config_path)));
    let s = artifacts::write_run(cfg, &dir)?;
    println!("run directory: {}", dir.display());
    println!("rounds: {}", s.rounds);
    println!("final trigger success: {}", s.final_trigger_success);
    match s.rounds_to_threshold {
        Some(t) => println!("rounds to threshold: {t}"),
        None => println!("rounds to threshold: not reached"),
    }
    for (name, d) in &s.defenses {
        println!(
            "{name}: detection {:.3}, false positives {:.3}",
            d.per_round_mean.detection_rate, d.per_round_mean.false_positive_rate
        );
    }
    Ok(())
}

fn report(dirs: &[PathBuf], csv: Option<PathBuf>) -> Result<(), Error> {
    let runs = dirs
        .iter()
        .map(|d| artifacts::load_run(d))
        .collect::<Result<Vec<LoadedRun>, _>>()?;
    let r = artifacts::report(&runs);
    match csv {
        Some(path) => {
            for p in artifacts::write_report(&r, &path)? {
                println!("wrote {}", p.display());
            }
        }
        None => print!("{}\n{}\n{}", r.detection, r.series, r.centroid),
    }
    Ok(())
}

fn sweep(config_path: &Path, param: &str, values: &str, out: Option<PathBuf>) -> Result<u8, Error> {
    let cfg = load(config_path)?;
    let values: Vec<String> = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(String::from)
        .collect();
    let root = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| {
        artifacts::default_output_root().join(format!("{}-sweep-{param}", config_name(config_path)))
    });
    let outcome = artifacts::sweep(&cfg, param, &values, &root)?;
    for r in &outcome.runs {
        match &r.outcome {
            Ok(_) => println!("{param}={}: {}", r.value, r.dir.display()),
            Err(msg) => eprintln!("{param}={}: failed: {msg}", r.value),
        }
    }
    println!("wrote {}", outcome.csv_path.display());
    Ok(if outcome.failures() > 0 { RUNTIME } else { 0 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run { config, out } => run(&config, out).map(|_| 0),
        Command::Report { dirs, csv } => report(&dirs, csv).map(|_| 0),
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => sweep(&config, &param, &values, out),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
