use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "moflow", version, about = "Train, sample and search a normalizing flow over molecular graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

/// Flags shared by every command; each overrides the matching config entry.
#[derive(Debug, Default, Args)]
pub struct Flags {
    /// TOML run configuration layered over preset defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// SMILES file, one molecule per line.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// Skip validity correction when decoding.
    #[arg(long, global = true)]
    pub no_correction: bool,
    #[arg(long, global = true)]
    pub count: Option<usize>,
    /// Similarity threshold; repeat for several.
    #[arg(long, global = true)]
    pub delta: Vec<f64>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Seed molecule; repeat for several.
    #[arg(long, global = true)]
    pub smiles: Vec<String>,
    /// heavy_atoms, rings or bond_order_sum.
    #[arg(long, global = true)]
    pub property: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate and canonicalize a SMILES dataset, or synthesize one.
    Preprocess {
        /// Write this many random valid molecules instead of reading a dataset.
        #[arg(long)]
        synthesize: Option<usize>,
    },
    /// Maximum-likelihood training; writes a checkpoint after every epoch.
    Train,
    /// Sample from the prior, decode, and report metrics.
    Generate,
    /// Encode and decode the dataset and report the exact reconstruction rate.
    Reconstruct,
    /// Write latent codes and log-likelihoods.
    Encode,
    /// Decode points on the segment between two molecules.
    Interpolate,
    /// Decode a 2-D grid around a molecule along random orthonormal directions.
    Grid,
    /// Gradient ascent on a learned property predictor.
    Optimize,
    /// Property improvement under a similarity constraint.
    ConstrainedOptimize,
    /// Metrics for a generated SMILES file.
    Metrics {
        /// Generated SMILES, one per line; empty lines count as invalid.
        #[arg(long)]
        input: PathBuf,
    },
    /// Invertibility, log-determinant and gradient property suites.
    Selfcheck,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Preprocess { .. } => "preprocess",
            Command::Train => "train",
            Command::Generate => "generate",
            Command::Reconstruct => "reconstruct",
            Command::Encode => "encode",
            Command::Interpolate => "interpolate",
            Command::Grid => "grid",
            Command::Optimize => "optimize",
            Command::ConstrainedOptimize => "constrained-optimize",
            Command::Metrics { .. } => "metrics",
            Command::Selfcheck => "selfcheck",
        }
    }
}
