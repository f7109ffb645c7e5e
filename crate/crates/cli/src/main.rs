use std::path::PathBuf;
use std::process::ExitCode;

use aisdet::experiment::Variant;
use aisdet_cli::commands::{self, ServeOptions};
use aisdet_cli::{load_config, CliError, Result, SCHEMA};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aisdet", version, about = "Lesion detection experiments on synthetic CT volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom cases.
    Phantom {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        first_index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the detector on every split.
    TrainDetector {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label detector outputs on the training cases.
    Mine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detectors: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the false-positive classifier ensemble.
    TrainFpr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// one-slice or three-slice
        #[arg(long)]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write candidates for every case in a dataset.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// one-stage, two-stage-1slice or two-stage-3slice
        #[arg(long)]
        mode: String,
        #[arg(long)]
        detectors: PathBuf,
        #[arg(long)]
        fpr: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lesion-level metrics at a fixed threshold.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        threshold: f64,
        #[arg(long, default_value = "candidates")]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// F1-optimal threshold sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long, default_value = "candidates")]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute the published summary table and paired test.
    ReportPaper {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve a reader session over HTTP.
    ReaderServe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        /// Event log; resumed when it exists.
        #[arg(long)]
        session: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "reader")]
        reader_id: String,
    },
    /// Full pipeline: phantoms, detector, mining, both classifiers, evaluation.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the config JSON schema.
    Schema,
}

fn config(c: &Common) -> Result<aisdet::experiment::ExperimentConfig> {
    load_config(c.config.as_deref(), c.seed)
}

fn variant(s: &str) -> Result<Variant> {
    Variant::parse(s).ok_or_else(|| CliError::Config(format!("unknown mode {s:?}")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom { common, cases, first_index, out } => commands::phantom(&config(&common)?, cases, first_index, &out),
        Command::TrainDetector { common, data, out } => commands::train_detector_cmd(&config(&common)?, &data, &out),
        Command::Mine { common, data, detectors, out } => commands::mine(&config(&common)?, &data, &detectors, &out),
        Command::TrainFpr { common, data, dataset, mode, out } => {
            let mode = commands::parse_mode(&mode)?;
            commands::train_fpr(&config(&common)?, &data, &dataset, mode, &out)
        }
        Command::Infer { common, data, mode, detectors, fpr, out } => {
            let v = variant(&mode)?;
            commands::infer(&config(&common)?, &data, &detectors, fpr.as_deref(), v, &out)
        }
        Command::Eval { common, data, candidates, threshold, name, out } => {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(CliError::Config(format!("threshold {threshold} outside [0, 1]")));
            }
            commands::eval(&config(&common)?, &data, &candidates, threshold, &name, &out)
        }
        Command::Sweep { common, data, candidates, name, out } => commands::sweep(&config(&common)?, &data, &candidates, &name, &out),
        Command::ReportPaper { out } => commands::report_paper(out.as_deref()),
        Command::ReaderServe { common, data, candidates, session, port, reader_id } => {
            commands::reader_serve(&config(&common)?, &ServeOptions { data, candidates, session, port, reader_id })
        }
        Command::Experiment { common, out } => {
            if !commands::experiment(&config(&common)?, &out)? {
                eprintln!("warning: not every expected ordering held for this seed");
            }
            Ok(())
        }
        Command::Schema => {
            print!("{SCHEMA}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
