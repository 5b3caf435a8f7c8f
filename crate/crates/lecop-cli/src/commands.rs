//! Subcommand implementations. Each one reads inputs named by the config,
//! runs one pipeline stage, and writes artifacts under the work dir. All
//! artifact writers are deterministic: rerunning a command on identical
//! inputs with the same seed and a single thread is byte-identical.

use std::path::{Path, PathBuf};
use std::time::Duration;

use lecop::embeddings::{fetch_embeddings, FetchConfig};
use lecop::fusion::{build_cooc_table, fuse_tables, CoocEmbeddingSet, LlmCoverage, ProjectionParams};
use lecop::graphs::{
    accumulate, build_graph, collect_histories, read_graph, write_graph, IntraCounting,
};
use lecop::ingest::{
    compute_overlap, compute_stats, merge_catalogs, parse_behaviors_with, parse_news_with,
    Impression, NewsItem, ParseOutcome, RowPolicy,
};
use lecop::keywords::{load_keywords, KeywordMap, KeywordPolicy};
use lecop::node2vec::{generate_walks, train_sgns, SgnsConfig, WalkConfig, WalkGraph};
use lecop::prompts::{
    build_contrastive_triples, build_embedding_prompt, build_keyword_prompt, read_prompts,
    write_prompts, write_triples, PromptRecord,
};
use lecop::recommender::{
    evaluate_model, read_checkpoint, train, write_checkpoint, TrainConfig, UserEncoderParams,
};
use lecop::seeds::derive_seed;
use lecop::VectorTable;

use crate::config::{require_path, PipelineConfig};
use crate::error::CliError;

/// Fixed artifact order: id graph, cross-item keyword graph, within-item
/// keyword graph. Matches the fused vector's segment order.
pub const GRAPH_NAMES: [&str; 3] = ["id_id", "item_item_kw", "intra_item_kw"];
pub const CHECKPOINT_FILE: &str = "model.ckpt";

fn row_policy(cfg: &PipelineConfig) -> RowPolicy {
    if cfg.skip_bad_rows {
        RowPolicy::Skip
    } else {
        RowPolicy::Fail
    }
}

fn effective_threads(cfg: &PipelineConfig) -> usize {
    if cfg.threads == 0 {
        rayon::current_num_threads()
    } else {
        cfg.threads
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("cannot serialize {}: {e}", path.display())))?;
    write_text(path, &format!("{text}\n"))
}

fn load_news(path: &Path, policy: RowPolicy) -> Result<ParseOutcome<NewsItem>, CliError> {
    Ok(parse_news_with(path, policy)?)
}

fn load_behaviors(path: &Path, policy: RowPolicy) -> Result<ParseOutcome<Impression>, CliError> {
    Ok(parse_behaviors_with(path, policy)?)
}

fn load_keyword_map(cfg: &PipelineConfig) -> Result<KeywordMap, CliError> {
    match &cfg.paths.keywords {
        None => Ok(KeywordMap::new()),
        Some(path) => {
            let policy = if cfg.strict {
                KeywordPolicy::Strict
            } else {
                KeywordPolicy::Lenient
            };
            let (map, report) = load_keywords(path, policy)?;
            if !report.truncated_ids.is_empty() {
                println!(
                    "truncated {} oversized keyword lists to 3 entries",
                    report.truncated_ids.len()
                );
            }
            Ok(map)
        }
    }
}

#[derive(serde::Serialize)]
struct StatsJson {
    user_count: u64,
    news_count: u64,
    click_count: u64,
    skipped_news_rows: u64,
    skipped_behavior_rows: u64,
}

/// Corpus statistics over the configured splits plus, when a dev split is
/// present, a train-vs-dev occurrence overlap report.
pub fn cmd_stats(cfg: &PipelineConfig) -> Result<(), CliError> {
    let policy = row_policy(cfg);
    let train_news = load_news(require_path(&cfg.paths.train_news, "train_news")?, policy)?;
    let train_beh = load_behaviors(
        require_path(&cfg.paths.train_behaviors, "train_behaviors")?,
        policy,
    )?;
    let dev_news = match &cfg.paths.dev_news {
        Some(p) => Some(load_news(p, policy)?),
        None => None,
    };
    let dev_beh = match &cfg.paths.dev_behaviors {
        Some(p) => Some(load_behaviors(p, policy)?),
        None => None,
    };
    let kw_map = load_keyword_map(cfg)?;

    let reports = cfg.paths.reports_dir();
    ensure_dir(&reports)?;

    // Overlap is computed on the separate splits before they are merged.
    let overlap = dev_beh
        .as_ref()
        .map(|dev| compute_overlap(&train_beh.records, &dev.records, &kw_map));

    let catalog = match &dev_news {
        Some(dev) => merge_catalogs(&[&train_news.records, &dev.records]),
        None => train_news.records.clone(),
    };
    let skipped_news = train_news.skipped_rows + dev_news.as_ref().map_or(0, |d| d.skipped_rows);
    let skipped_beh = train_beh.skipped_rows + dev_beh.as_ref().map_or(0, |d| d.skipped_rows);
    let mut impressions = train_beh.records;
    if let Some(dev) = dev_beh {
        impressions.extend(dev.records);
    }
    let stats = compute_stats(&catalog, &impressions);

    let mut text = stats.to_text();
    text.push_str(&format!(
        "skipped_news_rows = {skipped_news}\nskipped_behavior_rows = {skipped_beh}\n"
    ));
    write_text(&reports.join("dataset_stats.txt"), &text)?;
    write_json(
        &reports.join("dataset_stats.json"),
        &StatsJson {
            user_count: stats.user_count,
            news_count: stats.news_count,
            click_count: stats.click_count,
            skipped_news_rows: skipped_news,
            skipped_behavior_rows: skipped_beh,
        },
    )?;
    print!("{text}");

    if let Some(overlap) = overlap {
        write_text(&reports.join("overlap.txt"), &overlap.to_text())?;
        write_text(&reports.join("overlap.json"), &format!("{}\n", overlap.to_json()))?;
        print!("{}", overlap.to_text());
    }
    Ok(())
}

/// Contrastive triples (train split only) plus embedding and keyword prompts
/// for the whole catalog.
pub fn cmd_prompts(cfg: &PipelineConfig) -> Result<(), CliError> {
    let policy = row_policy(cfg);
    let train_news = load_news(require_path(&cfg.paths.train_news, "train_news")?, policy)?;
    let dev_news = match &cfg.paths.dev_news {
        Some(p) => Some(load_news(p, policy)?),
        None => None,
    };
    let catalog = match &dev_news {
        Some(dev) => merge_catalogs(&[&train_news.records, &dev.records]),
        None => train_news.records.clone(),
    };

    let dir = cfg.paths.prompts_dir();
    ensure_dir(&dir)?;
    let triples_path = dir.join("contrastive_triples.jsonl");
    let embed_path = dir.join("embedding_prompts.jsonl");
    let keyword_path = dir.join("keyword_prompts.jsonl");

    if catalog.is_empty() {
        write_triples(&triples_path, &[])?;
        write_prompts(&embed_path, &[])?;
        write_prompts(&keyword_path, &[])?;
        println!("empty catalog: wrote 0 triples, 0 embedding prompts, 0 keyword prompts");
        return Ok(());
    }

    let build = build_contrastive_triples(&train_news.records, cfg.seed)?;
    write_triples(&triples_path, &build.triples)?;
    let embed: Vec<PromptRecord> = catalog
        .iter()
        .map(|n| build_embedding_prompt(n, cfg.prompts.echo))
        .collect();
    write_prompts(&embed_path, &embed)?;
    let keyword: Vec<PromptRecord> = catalog.iter().map(build_keyword_prompt).collect();
    write_prompts(&keyword_path, &keyword)?;

    println!(
        "wrote {} triples ({} items skipped for empty abstracts), {} embedding prompts, {} keyword prompts",
        build.triples.len(),
        build.skipped_empty_abstract,
        embed.len(),
        keyword.len()
    );
    Ok(())
}

/// Extract windowed co-occurrence pairs from the training click histories and
/// dump the three weighted edge lists.
pub fn cmd_graphs(cfg: &PipelineConfig) -> Result<(), CliError> {
    let policy = row_policy(cfg);
    let behaviors = load_behaviors(
        require_path(&cfg.paths.train_behaviors, "train_behaviors")?,
        policy,
    )?;
    let kw_map = load_keyword_map(cfg)?;
    let histories = collect_histories(&behaviors.records, cfg.graphs.per_impression_histories);
    let intra = if cfg.graphs.intra_per_distinct_item {
        IntraCounting::PerDistinctItem
    } else {
        IntraCounting::PerOccurrence
    };
    let pairs = accumulate(&histories, cfg.graphs.window, &kw_map, intra)?;

    let graphs_dir = cfg.paths.graphs_dir();
    ensure_dir(&graphs_dir)?;
    let reports = cfg.paths.reports_dir();
    ensure_dir(&reports)?;

    let multisets = [
        (GRAPH_NAMES[0], &pairs.id_id),
        (GRAPH_NAMES[1], &pairs.item_item_kw),
        (GRAPH_NAMES[2], &pairs.intra_item_kw),
    ];
    for (name, multiset) in multisets {
        let graph = build_graph(multiset);
        write_graph(&graphs_dir.join(format!("{name}.tsv")), &graph)?;
        println!(
            "{name}: {} nodes, {} edges",
            graph.nodes().count(),
            graph.edges().count()
        );
    }
    write_json(&reports.join("graph_coverage.json"), &pairs.coverage)?;
    println!(
        "keyword coverage: {}/{} history positions uncovered ({} distinct ids)",
        pairs.coverage.positions_without_keywords,
        pairs.coverage.positions_total,
        pairs.coverage.distinct_ids_without_keywords
    );
    Ok(())
}

/// Biased random walks plus skip-gram training on each stored graph; writes
/// one node-embedding table per graph.
pub fn cmd_embed_graphs(cfg: &PipelineConfig) -> Result<(), CliError> {
    let graphs_dir = cfg.paths.graphs_dir();
    let emb_dir = cfg.paths.embeddings_dir();
    ensure_dir(&emb_dir)?;
    let n2v = &cfg.node2vec;

    for (i, name) in GRAPH_NAMES.iter().enumerate() {
        let graph = read_graph(&graphs_dir.join(format!("{name}.tsv")))?;
        let out_path = emb_dir.join(format!("{name}.lec1"));
        let node_total = graph.nodes().count();
        if node_total == 0 {
            VectorTable::new(n2v.dims[i]).write_binary(&out_path)?;
            println!("{name}: empty graph, wrote empty table (dim {})", n2v.dims[i]);
            continue;
        }
        // One derived seed per graph keeps their random streams independent.
        let seed = derive_seed(cfg.seed, &format!("node2vec:{name}"));
        let walk_cfg = WalkConfig {
            p: n2v.p,
            q: n2v.q,
            walk_length: n2v.walk_length,
            walks_per_node: n2v.walks_per_node,
            seed,
        };
        let walks = generate_walks(&WalkGraph::from_graph(&graph), &walk_cfg)?;
        let sgns_cfg = SgnsConfig {
            dim: n2v.dims[i],
            context_window: n2v.context_window,
            negatives: n2v.negatives,
            epochs: n2v.epochs,
            learning_rate: n2v.learning_rate,
            final_learning_rate: n2v.final_learning_rate,
            seed,
            workers: effective_threads(cfg),
        };
        let result = train_sgns(&walks, &sgns_cfg)?;
        result.embeddings.write_binary(&out_path)?;
        match result.epoch_losses.last() {
            Some(loss) => println!(
                "{name}: {node_total} nodes -> dim {}, final epoch loss {loss:.6}",
                n2v.dims[i]
            ),
            None => println!(
                "{name}: {node_total} nodes -> dim {}, no trainable pairs",
                n2v.dims[i]
            ),
        }
    }
    Ok(())
}

/// Send the embedding prompts to an HTTP service and store the returned
/// vector table at the configured embeddings path.
pub fn cmd_fetch_embeddings(cfg: &PipelineConfig) -> Result<(), CliError> {
    let endpoint = cfg.embedding.endpoint.clone().ok_or_else(|| {
        CliError::Usage("config key embedding.endpoint is required for this command".to_string())
    })?;
    let out_path = require_path(&cfg.paths.embeddings, "embeddings")?;
    let prompts = read_prompts(&cfg.paths.prompts_dir().join("embedding_prompts.jsonl"))?;
    let fetch_cfg = FetchConfig {
        endpoint,
        batch_size: cfg.embedding.batch_size,
        bearer_token: cfg.embedding.bearer_token.clone(),
        max_attempts: cfg.embedding.max_attempts,
        initial_backoff: Duration::from_millis(cfg.embedding.initial_backoff_ms),
        timeout: Duration::from_secs(cfg.embedding.timeout_secs),
    };
    let table = fetch_embeddings(&fetch_cfg, &prompts)?;
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    table.write_binary(out_path)?;
    println!(
        "fetched {} vectors (dim {}) -> {}",
        table.len(),
        table.dim(),
        out_path.display()
    );
    Ok(())
}

/// Assemble per-item co-occurrence vectors, train the user encoder together
/// with the LLM projection, and write the checkpoint plus the fused news
/// vector table the evaluator reads.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<(), CliError> {
    let policy = row_policy(cfg);
    let train_news = load_news(require_path(&cfg.paths.train_news, "train_news")?, policy)?;
    let behaviors = load_behaviors(
        require_path(&cfg.paths.train_behaviors, "train_behaviors")?,
        policy,
    )?;
    let dev_news = match &cfg.paths.dev_news {
        Some(p) => Some(load_news(p, policy)?),
        None => None,
    };
    let llm = VectorTable::read_auto(require_path(&cfg.paths.embeddings, "embeddings")?)?;
    let kw_map = load_keyword_map(cfg)?;

    let emb_dir = cfg.paths.embeddings_dir();
    let cooc = CoocEmbeddingSet {
        id_vecs: VectorTable::read_auto(&emb_dir.join(format!("{}.lec1", GRAPH_NAMES[0])))?,
        item_item_kw_vecs: VectorTable::read_auto(&emb_dir.join(format!("{}.lec1", GRAPH_NAMES[1])))?,
        intra_kw_vecs: VectorTable::read_auto(&emb_dir.join(format!("{}.lec1", GRAPH_NAMES[2])))?,
    };

    // Candidates in evaluation come from either split, so the vector table
    // covers the union catalog.
    let catalog = match &dev_news {
        Some(dev) => merge_catalogs(&[&train_news.records, &dev.records]),
        None => train_news.records.clone(),
    };
    if catalog.is_empty() {
        return Err(CliError::Data("news catalog is empty".to_string()));
    }
    let catalog_ids: Vec<String> = catalog.iter().map(|n| n.news_id.clone()).collect();

    let (cooc_table, coverage) = build_cooc_table(&catalog_ids, &cooc, &kw_map)?;
    ensure_dir(&emb_dir)?;
    let reports = cfg.paths.reports_dir();
    ensure_dir(&reports)?;
    let ckpt_dir = cfg.paths.checkpoints_dir();
    ensure_dir(&ckpt_dir)?;
    cooc_table.write_binary(&emb_dir.join("cooc_vectors.lec1"))?;
    write_json(&reports.join("fusion_coverage.json"), &coverage)?;

    let d_out = cooc_table.dim();
    let encoder_dim = cfg.train.heads * cfg.train.head_dim;
    if encoder_dim != d_out {
        return Err(CliError::Data(format!(
            "encoder width {encoder_dim} (train.heads {} x train.head_dim {}) does not match \
             fused vector width {d_out} (sum of node2vec.dims)",
            cfg.train.heads, cfg.train.head_dim
        )));
    }

    let llm_policy = if cfg.strict {
        LlmCoverage::Strict
    } else {
        LlmCoverage::ZeroFallback
    };
    let train_cfg = TrainConfig {
        negatives_per_positive: cfg.train.negatives_per_positive,
        batch_size: cfg.train.batch_size,
        learning_rate: cfg.train.learning_rate,
        epochs: cfg.train.epochs,
        max_history: cfg.train.max_history,
        seed: cfg.seed,
    };
    let encoder = UserEncoderParams::init(cfg.train.heads, cfg.train.head_dim, cfg.train.attn_dim, cfg.seed);
    let projection = ProjectionParams::init(d_out, llm.dim(), cfg.seed);

    let (encoder, projection, stats) = train(
        &behaviors.records,
        &llm,
        &cooc_table,
        encoder,
        projection,
        &train_cfg,
        llm_policy,
    )?;

    let ckpt_path = ckpt_dir.join(CHECKPOINT_FILE);
    write_checkpoint(&ckpt_path, &encoder, &projection, &train_cfg)?;
    let (news_vectors, _) = fuse_tables(&llm, &cooc_table, &projection, llm_policy)?;
    let vectors_path = emb_dir.join("news_vectors.lec1");
    news_vectors.write_binary(&vectors_path)?;
    write_json(&reports.join("train_stats.json"), &stats)?;

    let total = stats.epoch_losses.len();
    for (i, loss) in stats.epoch_losses.iter().enumerate() {
        println!("epoch {}/{total}: mean loss {loss:.6}", i + 1);
    }
    println!(
        "{} groups per epoch, {} skipped for empty history, {} items without llm vectors",
        stats.groups_per_epoch, stats.skipped_empty_history, stats.missing_llm_zeroed
    );
    println!(
        "checkpoint -> {}; news vectors -> {}",
        ckpt_path.display(),
        vectors_path.display()
    );
    Ok(())
}

/// Score the dev impressions with a stored checkpoint and the fused news
/// vectors; writes and prints the ranking-metric report.
pub fn cmd_evaluate(cfg: &PipelineConfig, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let policy = row_policy(cfg);
    let dev = load_behaviors(
        require_path(&cfg.paths.dev_behaviors, "dev_behaviors")?,
        policy,
    )?;
    let default_ckpt: PathBuf = cfg.paths.checkpoints_dir().join(CHECKPOINT_FILE);
    let ckpt_path = checkpoint.unwrap_or(&default_ckpt);
    let (encoder, _projection, train_cfg) = read_checkpoint(ckpt_path)?;
    let news_vectors = VectorTable::read_auto(&cfg.paths.embeddings_dir().join("news_vectors.lec1"))?;
    let report = evaluate_model(
        &dev.records,
        &encoder,
        &news_vectors,
        train_cfg.max_history,
        cfg.strict,
    )?;

    let reports = cfg.paths.reports_dir();
    ensure_dir(&reports)?;
    write_text(&reports.join("metrics.txt"), &report.to_text())?;
    write_text(&reports.join("metrics.json"), &format!("{}\n", report.to_json()))?;
    print!("{}", report.to_text());
    Ok(())
}
