//! `tdml`: generate data, train, embed, reduce and evaluate from the shell.
//!
//! Exit status is 0 on success, 1 on runtime failure and 2 on usage errors.

mod commands;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "tdml", version, about = "Triplet metric learning for descriptor retrieval")]
pub struct Cli {
    /// Worker threads for parallel sections (0 picks the core count).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic Gaussian-cluster train/test embedding files.
    GenData(GenDataArgs),
    /// Convert a CSV file (`id,label,f0,f1,...`) into a TDML file.
    ImportCsv(ConvertArgs),
    /// Convert a TDML file into CSV.
    ExportCsv(ConvertArgs),
    /// Train an embedding network with batch-all triplet loss.
    Train(TrainArgs),
    /// Embed every record of a dataset with a trained checkpoint.
    Embed(EmbedArgs),
    /// Fit PCA on one embedding file and apply it to others.
    Pca(PcaArgs),
    /// Score leave-one-out retrieval with ANMRR, mAP and P@k.
    Evaluate(EvaluateArgs),
    /// Re-run the command recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Distance of each class center from the origin.
    #[arg(long, default_value_t = 4.0)]
    pub separation: f64,
    /// Standard deviation of the within-class noise.
    #[arg(long, default_value_t = 1.0)]
    pub spread: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Fraction of each class that goes to the training file.
    #[arg(long, default_value_t = 0.5)]
    pub split: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training embedding file.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint, history and manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub margin: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// Records per mini-batch; divided by --samples-per-class to get the class count.
    #[arg(long, default_value_t = 30)]
    pub batch: usize,
    #[arg(long, default_value_t = 3)]
    pub samples_per_class: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Dense layer widths; the last one is the embedding size.
    #[arg(long, value_delimiter = ',', default_value = "32,16")]
    pub dense: Vec<usize>,
    /// Output channels of a 3x3 convolution before pooling (needs --map).
    #[arg(long)]
    pub conv: Option<usize>,
    /// Reshape input vectors into HxW feature maps.
    #[arg(long, value_name = "HxW")]
    pub map: Option<String>,
    /// Width of an extra reduction layer after the embedding.
    #[arg(long)]
    pub fc_reduce: Option<usize>,
    /// Copy matching leading layers from this checkpoint before training.
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    /// Also save a checkpoint every N epochs (0 disables).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Loss normalization: sum, mean_valid or mean_active.
    #[arg(long, default_value = "sum")]
    pub normalization: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Disable random flips of map inputs.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Feature-map shape used at training time.
    #[arg(long, value_name = "HxW")]
    pub map: Option<String>,
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    /// Embeddings the projection is fitted on (the training split).
    #[arg(long)]
    pub fit: PathBuf,
    /// Further files to project; the fit file is always projected too.
    #[arg(long)]
    pub apply: Vec<PathBuf>,
    #[arg(long)]
    pub k: usize,
    /// Keep projected vectors unnormalized.
    #[arg(long)]
    pub no_renorm: bool,
    /// Output directory; each input keeps its file name.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Database embeddings; also the query set unless --queries is given.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Fix GTM instead of using the largest ground-truth count.
    #[arg(long)]
    pub gtm: Option<usize>,
    #[arg(long)]
    pub json: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    pub manifest: PathBuf,
    /// Replace the recorded output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// An error the user can fix by changing flags; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Parses `argv` and runs the selected subcommand.
pub fn execute(argv: Vec<OsString>) -> anyhow::Result<()> {
    let matches = match Cli::command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return Ok(());
        }
        Err(e) => return Err(usage(e.render().to_string().trim_end())),
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| usage(e.render().to_string().trim_end()))?;
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            log::debug!("thread pool already configured: {e}");
        }
    }
    let recorded = manifest::from_matches(&matches, cli.threads);
    commands::dispatch(&cli, &recorded)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    match execute(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}");
            if message.starts_with("error:") {
                eprintln!("{message}");
            } else {
                eprintln!("error: {message}");
            }
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
