//! Command-line surface: `gen-data`, `train`, `eval`, `adapt` and
//! `analyze-cka`, plus the run configuration and checkpoint formats.
//!
//! Exit codes: 0 on success, 1 on invalid input, IO or format errors, 2 when
//! a computation produced non-finite values.

mod checkpoint;
mod commands;
mod config;

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use commands::{
    analyze_cka, default_checkpoint, eval, evaluation_tasks, gen_data, load_model, train, training_tasks, Dataset,
    Manifest, ManifestFile, MethodSummary, Split, Summary, TaskSummary, TrainOutcome, CHECKPOINT, CKA, MANIFEST,
    METRICS, MODEL_METHOD, SUMMARY, TRAIN_LOG, ZERO_FILLED_METHOD,
};
pub use config::RunConfig;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::meta::{AdaptConfig, AdaptMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

const DEFAULT_RUN_DIR: &str = "run";

#[derive(Debug, Parser)]
#[command(
    name = "kmmaml",
    version,
    about = "Kernel-modulation meta-learning for undersampled reconstruction"
)]
pub struct Cli {
    /// Run configuration file (flat `key = value`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Writes zero wall-clock times so reruns are byte-identical.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory (gen-data: the dataset directory, default `data_dir`;
    /// other commands: default `run`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Dataset directory; overrides `data_dir`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to load (default `<out>/checkpoint.kmck`). Without
    /// `--config` the configuration stored in the checkpoint is used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Tasks to score: held-out test tasks or the training tasks.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes phantom images for both splits as KMR1 rasters plus a manifest.
    GenData,
    /// Meta-trains a model and writes a checkpoint and a CSV log.
    Train {
        /// Dataset directory; overrides `data_dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continues from this checkpoint up to `epochs`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Scores on-the-fly reconstructions against the zero-filled baseline.
    Eval(ModelArgs),
    /// Scores reconstructions after fine-tuning with the `adapt_*` keys.
    Adapt(ModelArgs),
    /// Writes the layer-wise CKA between plain and modulated activations.
    AnalyzeCka(ModelArgs),
}

fn command() -> clap::Command {
    Cli::command().after_long_help(RunConfig::reference())
}

/// Parses arguments and runs a command. Help and version requests print
/// and succeed.
pub fn run_from<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match command()
        .try_get_matches_from(args)
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_INVALID
    }
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::parse(&text)
}

/// Configuration from `--config`, else from `fallback`, else defaults,
/// with `--seed` applied.
fn resolve_config(cli: &Cli, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, fallback) {
        (Some(path), _) => read_config(path)?,
        (None, Some(ck)) => RunConfig::parse(&Checkpoint::load(ck)?.config)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let run_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_DIR));
    match &cli.command {
        Command::GenData => {
            let cfg = resolve_config(cli, None)?;
            let out = cli.out.clone().unwrap_or_else(|| cfg.data_dir.clone());
            let manifest = gen_data(&cfg, &out)?;
            println!(
                "wrote {} rasters and {} to {}",
                manifest.files.len(),
                MANIFEST,
                out.display()
            );
        }
        Command::Train { data, resume } => {
            let cfg = resolve_config(cli, None)?;
            let data = data.clone().unwrap_or_else(|| cfg.data_dir.clone());
            let outcome = train(&cfg, &data, &run_dir, resume.as_deref(), cli.deterministic)?;
            println!(
                "trained {} epochs (now at epoch {}), checkpoint {}",
                outcome.epochs_run,
                outcome.final_epoch,
                run_dir.join(CHECKPOINT).display()
            );
        }
        Command::Eval(args) | Command::Adapt(args) => {
            let ck = args.checkpoint.clone().unwrap_or_else(|| default_checkpoint(&run_dir));
            let cfg = resolve_config(cli, Some(&ck))?;
            let data = args.data.clone().unwrap_or_else(|| cfg.data_dir.clone());
            let adapt = match cli.command {
                Command::Eval(_) => AdaptConfig {
                    mode: AdaptMode::OnTheFly,
                    ..cfg.adapt()
                },
                _ => cfg.adapt(),
            };
            let summary = eval(&cfg, &data, &ck, &run_dir, &adapt, args.split.into())?;
            for t in &summary.tasks {
                let cells: Vec<String> = t
                    .rows
                    .iter()
                    .map(|r| format!("{} {:.3} dB / {:.4}", r.method, r.psnr_mean, r.ssim_mean))
                    .collect();
                println!("{}: {}", t.task, cells.join(", "));
            }
        }
        Command::AnalyzeCka(args) => {
            let ck = args.checkpoint.clone().unwrap_or_else(|| default_checkpoint(&run_dir));
            let cfg = resolve_config(cli, Some(&ck))?;
            let data = args.data.clone().unwrap_or_else(|| cfg.data_dir.clone());
            let profile = analyze_cka(&cfg, &data, &ck, &run_dir, args.split.into())?;
            for l in &profile.layers {
                println!("{:>14} {:.4} ± {:.4}", l.layer, l.mean, l.std);
            }
        }
    }
    Ok(())
}
