use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prunefl::cost::{fit, read_timing_csv};
use prunefl::harness::{
    lottery_from_config, read_records, run_experiment, summarize_time_to_accuracy, write_outputs, write_records,
    ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "prunefl", version, about = "Federated learning with adaptive parameter pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its metrics CSV.
    Run(Common),
    /// Retrain a pruned architecture from its original and from a fresh initialization.
    Lottery(Common),
    /// Time to reach accuracy thresholds, per metrics CSV.
    Summarize {
        /// Metrics CSV files written by `run`.
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        /// Accuracy thresholds in [0, 1].
        #[arg(long, value_delimiter = ',', default_value = "0.8,0.9")]
        thresholds: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a cost preset from measured round times.
    FitCost {
        /// CSV with one kept-count column per layer and a final `seconds` column.
        samples: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Replaces the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics CSV for `run`; output directory for `lottery`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key.path=value`, applied in order.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> prunefl::Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        ExperimentConfig::load(&self.config, &overrides)
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn output(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn execute(command: Command) -> prunefl::Result<()> {
    match command {
        Command::Run(args) => {
            let cfg = args.load()?;
            let result = run_experiment(&cfg)?;
            write_outputs(&cfg, &result, args.out.as_deref())?;
            if args.out.is_none() && cfg.output.csv.is_none() {
                write_records(io::stdout().lock(), &result.records)?;
            }
            eprintln!("{}", result.summary);
        }
        Command::Lottery(args) => {
            let cfg = args.load()?;
            let lot = lottery_from_config(&cfg)?;
            let dir = args.out.unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&dir)?;
            for (name, run) in [("original", &lot.original), ("random", &lot.random), ("full", &lot.full)] {
                write_records(File::create(dir.join(format!("lottery_{name}.csv")))?, &run.records)?;
                eprintln!(
                    "{name:<9} density {:.4}  final accuracy {:.4}",
                    run.summary.final_density, run.summary.final_test_accuracy
                );
            }
        }
        Command::Summarize { csv, thresholds, out } => {
            let mut w = output(out.as_deref())?;
            writeln!(w, "file\tthreshold\tseconds\tround")?;
            for path in &csv {
                let records = read_records(BufReader::new(File::open(path)?))?;
                for row in summarize_time_to_accuracy(&records, &thresholds) {
                    writeln!(w, "{}\t{row}", path.display())?;
                }
            }
        }
        Command::FitCost { samples, out } => {
            let samples = read_timing_csv(BufReader::new(File::open(&samples)?))?;
            let report = fit(&samples)?;
            output(out.as_deref())?.write_all(report.model.to_toml().as_bytes())?;
            eprintln!("r_squared = {:.6}", report.r_squared);
            if !report.clamped_layers.is_empty() {
                eprintln!("clamped layers: {:?}", report.clamped_layers);
            }
        }
    }
    Ok(())
}
