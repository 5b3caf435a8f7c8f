//! Command-line surface: one binary, six pipeline stages plus an embedding
//! fetcher, all driven by a shared config file that flags override.

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "lecop",
    version,
    about = "News recommendation pipeline: click co-occurrence graphs, node \
             embeddings, LLM-vector fusion, and an attention-based recommender"
)]
pub struct Cli {
    /// TOML config file; command-line flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Worker threads for parallel stages; 0 means all cores. With
    /// --threads 1 every stage is bit-reproducible.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// Base seed; each stage derives its own stream from it.
    #[arg(long, global = true, value_name = "SEED")]
    pub seed: Option<u64>,

    /// Fail on missing lookups instead of falling back to zero vectors.
    #[arg(long, global = true)]
    pub strict: bool,

    /// Count and skip malformed dataset rows instead of failing the parse.
    #[arg(long, global = true)]
    pub skip_bad_rows: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corpus statistics and train/dev overlap reports
    Stats,
    /// Contrastive triples plus embedding and keyword prompt files
    Prompts,
    /// Build the three co-occurrence graphs from click histories
    Graphs,
    /// Learn node embeddings for each graph (biased walks + skip-gram)
    EmbedGraphs,
    /// Fetch LLM embeddings for the prompt file from an HTTP endpoint
    FetchEmbeddings,
    /// Train the recommender and write the fused news vector table
    Train,
    /// Score the dev split with a trained checkpoint
    Evaluate {
        /// Checkpoint to load (default: <work_dir>/checkpoints/model.ckpt).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
}
