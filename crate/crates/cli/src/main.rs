//! `vqa`: train, evaluate and score video quality models from the shell.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "vqa", version, about = "Parameter-efficient video quality assessment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select frame indices from one video and print them as JSON.
    Sample {
        /// Video file or directory of numbered frames.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "UNISampl")]
        strategy: String,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Include the per-frame motion profile in the output.
        #[arg(long)]
        profile: bool,
    },
    /// Train on the manifest named in a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config entry, e.g. `--set train.epochs=4`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Sets both the training and the initialization seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Receives checkpoint.bin, best.bin and train_log.jsonl.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score predictions against labels, or run the split protocol.
    Eval {
        /// Config file; runs the repeated train/test split protocol.
        #[arg(long, conflicts_with_all = ["predictions", "labels"])]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE", requires = "config")]
        overrides: Vec<String>,
        #[arg(long, requires = "config")]
        seed: Option<u64>,
        /// CSV with `video_id` and `q_pred` columns.
        #[arg(long, requires = "labels")]
        predictions: Option<PathBuf>,
        /// CSV or manifest with `video_id` and `mos` columns.
        #[arg(long, requires = "predictions")]
        labels: Option<PathBuf>,
        /// Fit a four-parameter logistic before PLCC and RMSE.
        #[arg(long)]
        logistic: bool,
        /// Print a text table instead of JSON.
        #[arg(long)]
        table: bool,
    },
    /// Predict quality for every video in a manifest.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        sampling: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write prompt and video embeddings as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also embed every video in this manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Embed without adapters.
        #[arg(long)]
        frozen: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate the synthetic blur/noise dataset and a matching config.
    MakeToyData {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 32)]
        clips: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            eprintln!("{}", serde_json::json!({ "error": "usage", "message": message.trim() }));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Sample {
            input,
            strategy,
            frames,
            seed,
            profile,
        } => commands::sample(&input, &strategy, frames, seed, profile),
        Command::Train {
            config,
            overrides,
            seed,
            out_dir,
        } => commands::train(&config, &overrides, seed, &out_dir),
        Command::Eval {
            config,
            overrides,
            seed,
            predictions,
            labels,
            logistic,
            table,
        } => match (config, predictions, labels) {
            (Some(c), _, _) => commands::eval_protocol(&c, &overrides, seed, table),
            (None, Some(p), Some(l)) => commands::eval_files(&p, &l, logistic, table),
            _ => Err(vqa_core::Error::Config(
                "eval needs --config, or both --predictions and --labels".into(),
            )),
        },
        Command::Score {
            checkpoint,
            manifest,
            out,
            frames,
            sampling,
            seed,
        } => commands::score(&checkpoint, &manifest, out.as_deref(), frames, sampling.as_deref(), seed),
        Command::ExportEmbeddings {
            checkpoint,
            manifest,
            out_dir,
            frozen,
            seed,
        } => commands::export_embeddings(&checkpoint, manifest.as_deref(), &out_dir, frozen, seed),
        Command::MakeToyData { out_dir, clips, seed } => commands::make_toy_data(&out_dir, clips, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.category(), "message": e.to_string() }));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
