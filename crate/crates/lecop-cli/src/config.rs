//! Declarative pipeline configuration. One TOML file captures a whole run;
//! the handful of global flags (--seed, --threads, --strict,
//! --skip-bad-rows) override the corresponding keys.

use serde::Deserialize;
use std::path::{Path, PathBuf};

use crate::error::{one_line, CliError};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Base seed; stages derive their own streams via labeled hashing.
    pub seed: u64,
    /// Worker threads; 0 means all cores, 1 is bit-reproducible.
    pub threads: usize,
    /// Fail on missing lookups instead of zero fallbacks.
    pub strict: bool,
    /// Count and skip malformed dataset rows instead of failing.
    pub skip_bad_rows: bool,
    pub paths: PathsSection,
    pub prompts: PromptsSection,
    pub graphs: GraphsSection,
    pub node2vec: Node2vecSection,
    pub train: TrainSection,
    pub embedding: EmbeddingSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            threads: 0,
            strict: false,
            skip_bad_rows: false,
            paths: PathsSection::default(),
            prompts: PromptsSection::default(),
            graphs: GraphsSection::default(),
            node2vec: Node2vecSection::default(),
            train: TrainSection::default(),
            embedding: EmbeddingSection::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub train_news: Option<PathBuf>,
    pub train_behaviors: Option<PathBuf>,
    pub dev_news: Option<PathBuf>,
    pub dev_behaviors: Option<PathBuf>,
    /// JSONL of per-item keyword lists; absent = empty keyword map.
    pub keywords: Option<PathBuf>,
    /// LLM embedding table (binary or TSV) keyed by news id.
    pub embeddings: Option<PathBuf>,
    /// Root for generated artifacts: graphs/, embeddings/, checkpoints/,
    /// reports/, prompts/.
    pub work_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            train_news: None,
            train_behaviors: None,
            dev_news: None,
            dev_behaviors: None,
            keywords: None,
            embeddings: None,
            work_dir: PathBuf::from("lecop-work"),
        }
    }
}

impl PathsSection {
    pub fn graphs_dir(&self) -> PathBuf {
        self.work_dir.join("graphs")
    }

    pub fn embeddings_dir(&self) -> PathBuf {
        self.work_dir.join("embeddings")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.work_dir.join("checkpoints")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.work_dir.join("reports")
    }

    pub fn prompts_dir(&self) -> PathBuf {
        self.work_dir.join("prompts")
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptsSection {
    /// Repeat the content block inside each embedding prompt so late tokens
    /// attend to a complete copy of the text.
    pub echo: bool,
}

impl Default for PromptsSection {
    fn default() -> Self {
        PromptsSection { echo: true }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphsSection {
    /// Sliding-window length over click histories.
    pub window: usize,
    /// Count each distinct item once per history in the within-item keyword
    /// graph instead of once per occurrence.
    pub intra_per_distinct_item: bool,
    /// Use every impression's history instead of one (the longest) per user.
    pub per_impression_histories: bool,
}

impl Default for GraphsSection {
    fn default() -> Self {
        GraphsSection {
            window: 5,
            intra_per_distinct_item: false,
            per_impression_histories: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Node2vecSection {
    /// Return parameter: higher p discourages revisiting the previous node.
    pub p: f64,
    /// In-out parameter: higher q keeps walks local.
    pub q: f64,
    pub walk_length: usize,
    pub walks_per_node: usize,
    /// Embedding width per graph: [id graph, cross-item keyword graph,
    /// within-item keyword graph]. The sum is the fused dimension.
    pub dims: Vec<usize>,
    pub context_window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Linear-decay floor for the learning rate.
    pub final_learning_rate: f64,
}

impl Default for Node2vecSection {
    fn default() -> Self {
        Node2vecSection {
            p: 1.0,
            q: 1.0,
            walk_length: 40,
            walks_per_node: 10,
            dims: vec![100, 100, 100],
            context_window: 5,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            final_learning_rate: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub negatives_per_positive: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// 0 epochs writes a checkpoint of the untouched initial parameters.
    pub epochs: usize,
    /// Most recent clicks kept per user.
    pub max_history: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Inner width of the additive attention pooler.
    pub attn_dim: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            negatives_per_positive: 4,
            batch_size: 512,
            learning_rate: 2e-4,
            epochs: 5,
            max_history: 50,
            heads: 15,
            head_dim: 20,
            attn_dim: 200,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSection {
    /// HTTP endpoint accepting {"input": [...], "ids": [...]}.
    pub endpoint: Option<String>,
    pub batch_size: usize,
    pub bearer_token: Option<String>,
    pub max_attempts: u32,
    pub timeout_secs: u64,
    pub initial_backoff_ms: u64,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        EmbeddingSection {
            endpoint: None,
            batch_size: 16,
            bearer_token: None,
            max_attempts: 3,
            timeout_secs: 30,
            initial_backoff_ms: 500,
        }
    }
}

impl PipelineConfig {
    /// No config path = all defaults; flags still apply on top.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: PipelineConfig = toml::from_str(&text).map_err(|e| {
            CliError::Usage(format!("config {}: {}", path.display(), one_line(&e.to_string())))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_overrides(
        &mut self,
        threads: Option<usize>,
        seed: Option<u64>,
        strict: bool,
        skip_bad_rows: bool,
    ) {
        if let Some(t) = threads {
            self.threads = t;
        }
        if let Some(s) = seed {
            self.seed = s;
        }
        if strict {
            self.strict = true;
        }
        if skip_bad_rows {
            self.skip_bad_rows = true;
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.node2vec.dims.len() != 3 {
            return Err(CliError::Usage(format!(
                "node2vec.dims must list exactly 3 widths (one per graph), got {}",
                self.node2vec.dims.len()
            )));
        }
        if self.graphs.window < 2 {
            return Err(CliError::Usage(format!(
                "graphs.window must be at least 2, got {}",
                self.graphs.window
            )));
        }
        Ok(())
    }

    /// Fused vector width implied by the per-graph embedding dims.
    pub fn fused_dim(&self) -> usize {
        self.node2vec.dims.iter().sum()
    }
}

/// Unwrap an optional path key or fail with a usage error naming it.
pub fn require_path<'a>(opt: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    opt.as_deref().ok_or_else(|| {
        CliError::Usage(format!("config key paths.{key} is required for this command"))
    })
}
