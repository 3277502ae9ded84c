use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mmtlab::missing::SubstitutionMethod;
use mmtlab_cli::*;

/// Missing-modality-robust multimodal transformers on synthetic audio-video data.
#[derive(Parser)]
#[command(name = "mmtlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and point the resolved config at it.
    GenData {
        /// Config file or preset name.
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// MAE-pretrain the encoder.
    Pretrain {
        #[arg(long)]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a classifier, optionally from a pretraining checkpoint.
    Train {
        #[arg(long)]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pretraining checkpoint to initialise the encoder from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a trained checkpoint over a grid of test missing rates.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Substitution methods; all three by default.
        #[arg(long, value_delimiter = ',')]
        method: Vec<SubstitutionMethod>,
        /// Test missing rates in percent, e.g. 0,25,50,75,100.
        #[arg(long)]
        rtest: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one model per grid value and seed.
    Sweep {
        #[arg(long)]
        config: String,
        /// p, fusion_layer or r_train.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values; rates as fractions.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy table and SVG charts from a metrics CSV.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the shipped presets as config files.
    Presets {
        #[arg(long, default_value = "presets")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = resolve(load_config(&config)?, None, out.as_deref());
            println!("{}", cmd_gen_data(&cfg)?.display());
        }
        Command::Pretrain { config, seed, out } => {
            let cfg = resolve(load_config(&config)?, seed, out.as_deref());
            println!("{}", cmd_pretrain(&cfg)?.display());
        }
        Command::Train {
            config,
            seed,
            out,
            checkpoint,
        } => {
            let cfg = resolve(load_config(&config)?, seed, out.as_deref());
            println!("{}", cmd_train(&cfg, checkpoint.as_deref())?.display());
        }
        Command::Eval {
            checkpoint,
            method,
            rtest,
            out,
        } => {
            let methods = if method.is_empty() { SubstitutionMethod::ALL.to_vec() } else { method };
            let rates = rtest.as_deref().map(parse_rtest).transpose()?;
            println!("{}", cmd_eval(&checkpoint, &methods, rates.as_deref(), out.as_deref())?.display());
        }
        Command::Sweep {
            config,
            axis,
            grid,
            seed,
            out,
        } => {
            let cfg = resolve(load_config(&config)?, seed, out.as_deref());
            println!("{}", cmd_sweep(&cfg, axis, &grid, thread_cap())?.display());
        }
        Command::Report { metrics, out } => {
            for p in cmd_report(&metrics, out.as_deref())? {
                println!("{}", p.display());
            }
        }
        Command::Presets { out } => {
            for p in cmd_presets(&out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.to_string().trim().to_string());
            eprintln!("{}", err.record());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::FAILURE
        }
    }
}
