//! The `capsprom` command line: data fetching, cross-validation, training,
//! evaluation, prediction and reporting.

pub mod commands;
pub mod error;
pub mod fetch;
pub mod report;

use std::path::PathBuf;

use capsprom_core::data::{DatasetKey, DATA_DIR_ENV};
use capsprom_core::model::ModelKind;
use clap::{Args, Parser, Subcommand};

pub use error::{CliError, ExitKind};

#[derive(Debug, Parser)]
#[command(name = "capsprom", version, about = "Capsule networks and CNN baselines for promoter prediction")]
pub struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DataDir {
    /// Directory holding the FASTA files and manifest.toml.
    #[arg(long, env = DATA_DIR_ENV, default_value = "data")]
    pub data_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Download (or import) dataset files and record their digests.
    FetchData {
        /// Dataset key, or `all`.
        #[arg(long)]
        dataset: String,
        /// Destination directory.
        #[arg(long, env = DATA_DIR_ENV, default_value = "data")]
        out: PathBuf,
        /// Copy files from this local directory instead of downloading.
        #[arg(long)]
        offline: Option<PathBuf>,
        /// Override the download base URL.
        #[arg(long)]
        base_url: Option<String>,
        /// Fetch again even when files are present.
        #[arg(long)]
        force: bool,
    },
    /// Stratified k-fold cross-validation of one model on one dataset.
    CrossValidate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: Option<ModelKind>,
        #[arg(long)]
        seed: Option<u64>,
        /// Fold plan to import, or to export when the file does not exist yet.
        #[arg(long)]
        folds_file: Option<PathBuf>,
        /// Folds trained in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Run directory (default runs/<dataset>-<model>-seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        data: DataDir,
        #[arg(long)]
        force: bool,
    },
    /// Train one model on a whole dataset and save a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: Option<ModelKind>,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataDir,
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint on a dataset or on one test fold.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: DatasetKey,
        #[arg(long)]
        folds_file: Option<PathBuf>,
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[command(flatten)]
        data: DataDir,
    },
    /// Promoter probabilities for the records of a FASTA file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fasta: PathBuf,
        /// Output CSV (id, probability, predicted).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        force: bool,
    },
    /// Summary table and metric boxplots across finished runs.
    Report {
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn dataset_keys(arg: &str) -> Result<Vec<DatasetKey>, CliError> {
    if arg.eq_ignore_ascii_case("all") {
        Ok(DatasetKey::ALL.to_vec())
    } else {
        Ok(vec![arg.parse()?])
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::FetchData {
            dataset,
            out,
            offline,
            base_url,
            force,
        } => {
            let keys = dataset_keys(&dataset)?;
            let opts = fetch::FetchOptions {
                out,
                offline,
                force,
                base_url,
            };
            let files = fetch::fetch(&keys, &opts)?;
            for f in &files {
                let status = match f.status {
                    fetch::FileStatus::Present => "present",
                    fetch::FileStatus::Fetched => "fetched",
                };
                println!("{} {:<30} {:>6} records  {status}  sha256 {}", f.dataset, f.file, f.records, f.sha256);
            }
            if files.iter().all(|f| f.status == fetch::FileStatus::Present) {
                println!("up to date");
            }
        }
        Command::CrossValidate {
            config,
            model,
            seed,
            folds_file,
            jobs,
            out,
            data,
            force,
        } => {
            commands::cross_validate_cmd(&commands::CrossValidateArgs {
                config,
                model,
                seed,
                folds_file,
                jobs,
                out,
                data_dir: data.data_dir,
                force,
            })?;
        }
        Command::Train {
            config,
            model,
            seed,
            out,
            data,
            force,
        } => {
            commands::train_cmd(&commands::TrainArgs {
                config,
                model,
                seed,
                out,
                data_dir: data.data_dir,
                force,
            })?;
        }
        Command::Evaluate {
            checkpoint,
            dataset,
            folds_file,
            fold,
            threshold,
            data,
        } => {
            commands::evaluate_cmd(&commands::EvaluateArgs {
                checkpoint,
                dataset,
                data_dir: data.data_dir,
                folds_file,
                fold,
                threshold,
            })?;
        }
        Command::Predict {
            checkpoint,
            fasta,
            out,
            threshold,
            force,
        } => {
            commands::predict_cmd(&commands::PredictArgs {
                checkpoint,
                fasta,
                out,
                threshold,
                force,
            })?;
        }
        Command::Report { runs, out } => {
            let r = report::report(&runs, &out)?;
            print!("{}", r.table);
            for p in &r.plots {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}
