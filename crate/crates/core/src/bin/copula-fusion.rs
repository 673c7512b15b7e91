use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use copula_fusion::design::write_trace;
use copula_fusion::harness::experiment::{run_design, run_estimate, run_rmse_experiment, run_roc_experiment, run_trace};
use copula_fusion::harness::{ExperimentReport, ScenarioConfig};
use copula_fusion::quantization::QuantizedHistogram;
use copula_fusion::Error;

#[derive(Parser)]
#[command(name = "copula-fusion", version, about = "Copula-based distributed detection with feedback quantizer design")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the scenario's Monte-Carlo seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Report path; stdout when omitted. A `<path>.meta.json` sidecar is written alongside.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the scenario's free parameters to a histogram file.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Histogram JSONL, one group per line.
        #[arg(long)]
        histogram: PathBuf,
    },
    /// Design quantizers and fusion rule under the true model for each cost point.
    Design {
        #[command(flatten)]
        common: Common,
    },
    /// RMSE of the feedback estimates against the number of stages.
    Rmse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// ROC points of the clairvoyant, independence-assumed and feedback detectors.
    Roc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// One feedback run with per-stage diagnostics.
    Trace {
        #[command(flatten)]
        common: Common,
        /// Stage trace log (JSONL).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Collected histogram (JSONL).
        #[arg(long)]
        histogram: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<ScenarioConfig, Error> {
    let mut cfg = ScenarioConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.monte_carlo.seed = seed;
    }
    Ok(cfg)
}

fn emit(report: &ExperimentReport, common: &Common) -> Result<(), Error> {
    let Format::Csv = common.format;
    match &common.out {
        Some(path) => {
            report.write_files(path)?;
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            report.write_csv(&mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    Ok(BufWriter::new(File::create(path)?))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Estimate { common, histogram } => {
            let cfg = load(&common)?;
            let hist = QuantizedHistogram::read_jsonl(BufReader::new(File::open(&histogram)?))?;
            emit(&run_estimate(&cfg, &hist)?, &common)
        }
        Command::Design { common } => {
            let cfg = load(&common)?;
            emit(&run_design(&cfg)?, &common)
        }
        Command::Rmse { common, replicates } => {
            let mut cfg = load(&common)?;
            if let Some(r) = replicates {
                cfg.rmse.replicates = r;
            }
            emit(&run_rmse_experiment(&cfg)?.report, &common)
        }
        Command::Roc { common, replicates } => {
            let mut cfg = load(&common)?;
            if let Some(r) = replicates {
                cfg.roc.replicates = r;
            }
            emit(&run_roc_experiment(&cfg)?.report, &common)
        }
        Command::Trace { common, log, histogram } => {
            let cfg = load(&common)?;
            let t = run_trace(&cfg)?;
            if let Some(path) = log {
                let mut w = create(&path)?;
                write_trace(&t.run, &mut w)?;
                w.flush()?;
            }
            if let Some(path) = histogram {
                let mut w = create(&path)?;
                t.run.histogram.write_jsonl(&mut w)?;
                w.flush()?;
            }
            emit(&t.report, &common)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Parse { .. } | Error::InvalidParameter(_) | Error::Dimension(_) => 2,
        Error::Experiment(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
