use std::path::PathBuf;

use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand, ValueEnum};

pub const VARIANT_NAMES: [&str; 6] =
    ["full", "cf_only", "kg_only", "no_fusion", "avgpool_baseline", "prodattn_baseline"];

/// Click-through-rate prediction over multiplex relational paths.
///
/// Stages run in order: gen-synth (or your own data), build-simgraph,
/// extract-paths, train, evaluate. Every command accepts `--config FILE`, a
/// TOML document of `key = value` settings; flags override the file. Each
/// command writes a run manifest with the resolved settings and the SHA-256
/// of every input and output file.
#[derive(Debug, Parser)]
#[command(name = "mtbrn", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world with planted theme and co-click structure.
    GenSynth(GenSynthArgs),
    /// Build instances, the chronological split, and the item similarity graph.
    BuildSimgraph(BuildSimgraphArgs),
    /// Extract similarity-graph and knowledge-graph paths for each instance.
    ExtractPaths(ExtractPathsArgs),
    /// Train a model variant and write a checkpoint and loss log.
    Train(TrainArgs),
    /// Score instances with a checkpoint and report AUC and log loss.
    Evaluate(EvaluateArgs),
    /// Click rate by path count and path length, per graph.
    AnalyzePaths(AnalyzePathsArgs),
    /// Compare analytic and finite-difference gradients on a micro model.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML settings file; flags given on the command line take precedence.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Where to write the run manifest (default: next to the outputs).
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory for interactions.tsv, profiles.tsv, triples.tsv,
    /// ground_truth.tsv, and world_manifest.json.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_users: Option<u32>,
    #[arg(long)]
    pub n_items: Option<u32>,
    /// Total knowledge-graph entities (themes, parents, brands, styles).
    #[arg(long)]
    pub n_entities: Option<u32>,
    /// Number of latent item themes.
    #[arg(long)]
    pub theme_count: Option<u32>,
    #[arg(long)]
    pub impressions_per_user: Option<u32>,
    /// Click-model intercept.
    #[arg(long, allow_hyphen_values = true)]
    pub bias: Option<f64>,
    /// Click-model weight on knowledge-graph relatedness.
    #[arg(long, allow_hyphen_values = true)]
    pub w_kg: Option<f64>,
    /// Click-model weight on co-click relatedness.
    #[arg(long, allow_hyphen_values = true)]
    pub w_cf: Option<f64>,
    /// Click-model weight on Gaussian noise.
    #[arg(long, allow_hyphen_values = true)]
    pub w_noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BuildSimgraphArgs {
    #[command(flatten)]
    pub common: Common,
    /// Interactions TSV: user, item, timestamp, label.
    #[arg(long, value_name = "FILE")]
    pub interactions: PathBuf,
    /// Profiles TSV: entity_kind, entity_id, field_id, kind, value.
    #[arg(long, value_name = "FILE")]
    pub profiles: PathBuf,
    /// Output directory for simgraph.tsv and train/test/graph_source.jsonl.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Neighbors kept per item.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Behavior window length.
    #[arg(long)]
    pub max_behaviors: Option<usize>,
    /// Most recent instances per user held out for testing.
    #[arg(long)]
    pub test_tail: Option<usize>,
    /// Instances per user before the test tail used for training; older
    /// ones only feed the similarity graph.
    #[arg(long)]
    pub train_window: Option<usize>,
    /// Negatives sampled per positive for positive-only logs; 0 keeps the
    /// logged labels.
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ExtractPathsArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "FILE")]
    pub simgraph: PathBuf,
    /// Knowledge-graph triples TSV: head, relation, tail.
    #[arg(long, value_name = "FILE")]
    pub triples: PathBuf,
    /// Profiles TSV; its items define which triple nodes are items.
    #[arg(long, value_name = "FILE")]
    pub profiles: PathBuf,
    /// Instances JSONL.
    #[arg(long, value_name = "FILE")]
    pub instances: PathBuf,
    /// Paths JSONL, one record per instance in input order.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long)]
    pub max_hops_cf: Option<usize>,
    #[arg(long)]
    pub max_hops_kg: Option<usize>,
    /// Similarity-graph paths kept per instance.
    #[arg(long)]
    pub k_cf: Option<usize>,
    /// Knowledge-graph paths kept per instance.
    #[arg(long)]
    pub k_kg: Option<usize>,
    /// Longest path in tokens (a path of h hops has 2h + 1).
    #[arg(long)]
    pub max_path_len: Option<usize>,
    /// Worker threads; output is identical for any count.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training instances JSONL.
    #[arg(long, value_name = "FILE")]
    pub instances: PathBuf,
    /// Paths JSONL aligned with the instances.
    #[arg(long, value_name = "FILE")]
    pub paths: PathBuf,
    /// Output directory for checkpoint.json and loss_log.csv.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_parser = PossibleValuesParser::new(VARIANT_NAMES))]
    pub variant: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adagrad learning rate.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Weights start uniform in [-r, r].
    #[arg(long)]
    pub init_range: Option<f64>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    /// Hidden size of each LSTM direction.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Three MLP layer widths, e.g. 32,16,8.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub mlp_hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub instances: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub paths: PathBuf,
    /// Report file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Also write per-instance predictions as CSV.
    #[arg(long, value_name = "FILE")]
    pub predictions: Option<PathBuf>,
    /// Synthetic ground truth; adds the oracle AUC of the true click
    /// probabilities on the same instances.
    #[arg(long, value_name = "FILE")]
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzePathsArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "FILE")]
    pub instances: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub paths: PathBuf,
    /// Output directory for path_stats.json and path_buckets.csv.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_parser = PossibleValuesParser::new(VARIANT_NAMES))]
    pub variant: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Largest accepted relative error.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Central-difference step.
    #[arg(long)]
    pub step: Option<f64>,
    /// JSON report file.
    #[arg(long, value_name = "FILE", default_value = "grad_check.json")]
    pub out: PathBuf,
}
