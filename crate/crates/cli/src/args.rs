use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bysgnn", version, about = "Forecast hourly POI visits with a dynamic busyness graph")]
pub struct Cli {
    /// Worker threads for batched tensor work. 1 keeps runs bit-reproducible.
    #[arg(long, global = true, env = "BYSGNN_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic visits/metadata pair.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus per-epoch log.
    Train(TrainArgs),
    /// Score a checkpoint and both seasonal baselines on the test split.
    Eval(EvalArgs),
    /// Train the full model and ablation variants over several seeds.
    Ablate(AblateArgs),
    /// Export the adjacency, node embeddings and gate value for one window.
    InspectGraph(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// `key = value` spec file; missing keys keep their defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Override one spec key, e.g. `--set days=30`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

/// Data location and training overrides shared by `train` and `ablate`.
#[derive(Debug, Args)]
pub struct FitArgs {
    /// Directory holding visits.csv and metadata.csv.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub distances: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning-rate multiplier applied every `--decay-every` epochs.
    #[arg(long)]
    pub decay_factor: Option<f64>,
    #[arg(long)]
    pub decay_every: Option<usize>,
    /// `mae` or `mse`.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable a component: no_semantics, no_space, no_metanodes,
    /// no_self_attention or no_adj_threshold. Repeatable.
    #[arg(long)]
    pub ablate: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub fit: FitArgs,
    /// Comma-separated variants; all five when omitted.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// First forecast hour (UTC, e.g. 2020-01-22T10:00:00Z); the graph is
    /// built from the window of hours just before it.
    #[arg(long)]
    pub timestamp: String,
    #[arg(long)]
    pub out: PathBuf,
}
