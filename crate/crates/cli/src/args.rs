use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "maskprop", version, about = "Verify predicted segmentation masks cluster by cluster")]
pub struct Cli {
    /// Seed for sampling, fitting and annotation order.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// TOML config: engine settings for `run`, the experiment for `experiment`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one mixture per class to labeled masks.
    FitGmm {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 200)]
        max_iterations: usize,
    },
    /// Draw synthetic masks from a model file.
    Sample {
        #[arg(long)]
        model: PathBuf,
        /// Masks per class.
        #[arg(long)]
        n: usize,
    },
    /// Write masks from the built-in reference mixtures.
    Synth {
        #[arg(long, default_value_t = 1000)]
        per_class: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
    },
    /// Build one complete-linkage tree per class.
    Cluster {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Largest class clustered in full; bigger classes are subsampled.
        #[arg(long, default_value_t = maskprop::hac::DEFAULT_MASK_CAP)]
        cap: usize,
    },
    /// Learn quality likelihoods from labeled trees and derive K_pa.
    Calibrate(CalibrateArgs),
    /// Run the verification engine.
    Run(RunArgs),
    /// Serve verification sessions over HTTP.
    Serve(ServeArgs),
    /// Summarize a result as quantity, quality and cost.
    Report {
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        masks: PathBuf,
    },
    /// Export the per-event trade-off table as CSV.
    Curve {
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        /// Label for the rows; defaults to the strategy name.
        #[arg(long)]
        run: Option<String>,
        /// Append to an existing table instead of replacing it.
        #[arg(long)]
        append: bool,
    },
    /// Run a full pipeline from one config file into a fresh directory.
    Experiment {
        /// Reuse stage outputs already present in the output directory.
        #[arg(long)]
        resume: bool,
    },
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub trees: PathBuf,
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    #[arg(long, default_value_t = maskprop::calibration::DEFAULT_BINS)]
    pub bins: usize,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub tree: PathBuf,
    #[arg(long)]
    pub masks: PathBuf,
    /// `oracle`, `noisy:<rate>` or `queue:<session>`.
    #[arg(long, default_value = "oracle")]
    pub annotator: String,
    #[arg(long, default_value = "selection")]
    pub strategy: String,
    /// Session directory for `queue:` annotators.
    #[arg(long, default_value = "sessions")]
    pub store: PathBuf,
    /// Gold questions (one JSON object per line) for a new queue session.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub gold_rate: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "sessions")]
    pub store: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Directory served under /images for question image_uri values.
    #[arg(long)]
    pub images: Option<PathBuf>,
}
