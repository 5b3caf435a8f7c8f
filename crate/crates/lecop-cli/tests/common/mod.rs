//! Deterministic synthetic corpus with two latent topics, shared by the
//! integration tests. Warm items (index < 450) appear in training click
//! histories; cold items (450..499) never do, but draw keywords from the
//! same per-topic pools, so only the keyword graphs can describe them.

// Each integration test target compiles its own copy and uses a subset.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lecop::VectorTable;

pub const NEWS_TOTAL: usize = 500;
pub const COLD_START: usize = 450;
pub const USERS: usize = 200;
pub const LLM_DIM: usize = 32;
pub const KW_PER_TOPIC: usize = 10;
pub const HISTORY_LEN: usize = 20;
pub const HISTORY_MIXED: usize = 7;

/// Per-coordinate topic signal in the synthetic LLM vectors; the uniform
/// noise amplitude is 1.0, so the text embedding alone separates topics only
/// weakly and the co-occurrence segments carry most of the signal.
const LLM_SIGNAL: f64 = 0.25;
const LLM_SIGNAL_COORDS: usize = 8;

pub struct Corpus {
    pub news: PathBuf,
    pub train_behaviors: PathBuf,
    /// 400 warm-positive impressions followed by 200 cold-positive ones.
    pub dev_behaviors: PathBuf,
    /// The 200 cold-positive impressions alone.
    pub dev_cold_behaviors: PathBuf,
    pub keywords: PathBuf,
    /// Zero-entry keyword file: switches both keyword graphs off.
    pub empty_keywords: PathBuf,
    pub llm_vectors: PathBuf,
}

pub fn news_id(i: usize) -> String {
    format!("N{i:03}")
}

pub fn topic_of(i: usize) -> usize {
    i % 2
}

pub fn keyword_name(topic: usize, k: usize) -> String {
    format!("topic{topic}kw{k}")
}

pub fn is_cold(i: usize) -> bool {
    i >= COLD_START
}

fn pick_distinct(rng: &mut ChaCha8Rng, pool: &[usize], count: usize) -> Vec<usize> {
    let mut indices: Vec<usize> = pool.to_vec();
    indices.shuffle(rng);
    indices.truncate(count);
    indices
}

fn behavior_row(
    out: &mut String,
    impression_id: usize,
    user: usize,
    history: &[usize],
    positive: usize,
    negatives: &[usize],
    rng: &mut ChaCha8Rng,
) {
    let hist: Vec<String> = history.iter().map(|&i| news_id(i)).collect();
    let mut cands: Vec<String> = vec![format!("{}-1", news_id(positive))];
    cands.extend(negatives.iter().map(|&i| format!("{}-0", news_id(i))));
    cands.shuffle(rng);
    out.push_str(&format!(
        "{impression_id}\tU{user:03}\t11/15/2019 8:00:00 AM\t{}\t{}\n",
        hist.join(" "),
        cands.join(" ")
    ));
}

/// Write the whole corpus under `dir`. Deterministic: same bytes every call.
pub fn write_corpus(dir: &Path) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(0x00C0FFEE);

    // Item keywords: three distinct draws from the item's topic pool.
    let kw_pool: Vec<usize> = (0..KW_PER_TOPIC).collect();
    let item_keywords: Vec<Vec<usize>> = (0..NEWS_TOTAL)
        .map(|_| pick_distinct(&mut rng, &kw_pool, 3))
        .collect();

    let mut news = String::new();
    let mut keywords = String::new();
    for i in 0..NEWS_TOTAL {
        let t = topic_of(i);
        let kws: Vec<String> = item_keywords[i]
            .iter()
            .map(|&k| keyword_name(t, k))
            .collect();
        news.push_str(&format!(
            "{}\ttopic{t}\tgeneral\tTopic {t} story {i} about {}\tCoverage of {} developments.\n",
            news_id(i),
            kws[0],
            kws.join(" and ")
        ));
        keywords.push_str(&format!(
            "{{\"news_id\":\"{}\",\"keywords\":[{}]}}\n",
            news_id(i),
            kws.iter()
                .map(|k| format!("\"{k}\""))
                .collect::<Vec<_>>()
                .join(",")
        ));
    }

    let warm: [Vec<usize>; 2] = [
        (0..COLD_START).filter(|i| topic_of(*i) == 0).collect(),
        (0..COLD_START).filter(|i| topic_of(*i) == 1).collect(),
    ];
    let cold: [Vec<usize>; 2] = [
        (COLD_START..NEWS_TOTAL).filter(|i| topic_of(*i) == 0).collect(),
        (COLD_START..NEWS_TOTAL).filter(|i| topic_of(*i) == 1).collect(),
    ];

    // A quarter of every history comes from the other topic. The cross-topic
    // edges this adds spread the embedding clusters, so an untrained encoder
    // scores near chance while the majority-topic preference stays learnable.
    let histories: Vec<Vec<usize>> = (0..USERS)
        .map(|u| {
            let mut h = pick_distinct(&mut rng, &warm[u % 2], HISTORY_LEN - HISTORY_MIXED);
            h.extend(pick_distinct(&mut rng, &warm[1 - u % 2], HISTORY_MIXED));
            h.shuffle(&mut rng);
            h
        })
        .collect();

    let mut train = String::new();
    let mut imp_id = 0usize;
    for (u, history) in histories.iter().enumerate() {
        let own = &warm[u % 2];
        let other = &warm[1 - u % 2];
        for _ in 0..6 {
            imp_id += 1;
            let positive = own[rng.random_range(0..own.len())];
            let negatives = pick_distinct(&mut rng, other, 4);
            behavior_row(&mut train, imp_id, u, history, positive, &negatives, &mut rng);
        }
    }

    let mut dev_warm = String::new();
    let mut dev_imp = 0usize;
    for (u, history) in histories.iter().enumerate() {
        let own = &warm[u % 2];
        let other = &warm[1 - u % 2];
        for _ in 0..2 {
            dev_imp += 1;
            let positive = own[rng.random_range(0..own.len())];
            let negatives = pick_distinct(&mut rng, other, 4);
            behavior_row(&mut dev_warm, dev_imp, u, history, positive, &negatives, &mut rng);
        }
    }

    let mut dev_cold = String::new();
    for (u, history) in histories.iter().enumerate() {
        let own = &cold[u % 2];
        let other = &cold[1 - u % 2];
        dev_imp += 1;
        let positive = own[rng.random_range(0..own.len())];
        let negatives = pick_distinct(&mut rng, other, 4);
        behavior_row(&mut dev_cold, dev_imp, u, history, positive, &negatives, &mut rng);
    }

    let mut llm = VectorTable::new(LLM_DIM);
    for i in 0..NEWS_TOTAL {
        let sign = if topic_of(i) == 0 { 1.0 } else { -1.0 };
        let vec: Vec<f32> = (0..LLM_DIM)
            .map(|j| {
                let signal = if j < LLM_SIGNAL_COORDS { LLM_SIGNAL * sign } else { 0.0 };
                let noise = rng.random::<f64>() * 2.0 - 1.0;
                (signal + noise) as f32
            })
            .collect();
        llm.insert(news_id(i), vec).expect("fresh id, right dim");
    }

    let corpus = Corpus {
        news: dir.join("news.tsv"),
        train_behaviors: dir.join("train_behaviors.tsv"),
        dev_behaviors: dir.join("dev_behaviors.tsv"),
        dev_cold_behaviors: dir.join("dev_cold_behaviors.tsv"),
        keywords: dir.join("keywords.jsonl"),
        empty_keywords: dir.join("keywords_empty.jsonl"),
        llm_vectors: dir.join("llm_vectors.lec1"),
    };
    std::fs::write(&corpus.news, news).unwrap();
    std::fs::write(&corpus.train_behaviors, train).unwrap();
    std::fs::write(&corpus.dev_behaviors, format!("{dev_warm}{dev_cold}")).unwrap();
    std::fs::write(&corpus.dev_cold_behaviors, dev_cold).unwrap();
    std::fs::write(&corpus.keywords, keywords).unwrap();
    std::fs::write(&corpus.empty_keywords, "").unwrap();
    llm.write_binary(&corpus.llm_vectors).unwrap();
    corpus
}

/// Variable parts of a pipeline run over the corpus; everything else is
/// fixed small enough to train in seconds: fused width 48 = 3 x 16 and a
/// 4-head x 12 encoder.
pub struct RunSpec<'a> {
    pub work_dir: &'a Path,
    pub keywords: &'a Path,
    pub dev_behaviors: &'a Path,
    pub embeddings: &'a Path,
    pub train_epochs: usize,
    /// Raw TOML appended at the end (for example an [embedding] section).
    pub extra: &'a str,
}

pub fn pipeline_config(corpus: &Corpus, spec: &RunSpec) -> String {
    format!(
        r#"seed = 1

[paths]
train_news = "{news}"
train_behaviors = "{train}"
dev_news = "{news}"
dev_behaviors = "{dev}"
keywords = "{keywords}"
embeddings = "{llm}"
work_dir = "{work}"

[graphs]
window = 5

[node2vec]
dims = [16, 16, 16]
walk_length = 20
walks_per_node = 8
context_window = 4
negatives = 4
epochs = 3

[train]
heads = 4
head_dim = 12
attn_dim = 32
negatives_per_positive = 4
batch_size = 256
learning_rate = 0.03
epochs = {epochs}
max_history = 50
{extra}"#,
        news = corpus.news.display(),
        train = corpus.train_behaviors.display(),
        dev = spec.dev_behaviors.display(),
        keywords = spec.keywords.display(),
        llm = spec.embeddings.display(),
        work = spec.work_dir.display(),
        epochs = spec.train_epochs,
        extra = spec.extra,
    )
}

pub struct CmdResult {
    pub status: i32,
    pub stdout: String,
    pub stderr: String,
}

impl CmdResult {
    pub fn assert_success(&self, what: &str) {
        assert_eq!(
            self.status, 0,
            "{what} failed (exit {}):\nstdout:\n{}\nstderr:\n{}",
            self.status, self.stdout, self.stderr
        );
    }
}

/// Run the pipeline binary with the given arguments.
pub fn run_lecop(args: &[&str]) -> CmdResult {
    let out = Command::new(env!("CARGO_BIN_EXE_lecop"))
        .args(args)
        .output()
        .expect("pipeline binary spawns");
    CmdResult {
        status: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Extract a metric value from the aligned text report.
pub fn metric_from_report(text: &str, column: usize) -> f64 {
    let mut lines = text.lines();
    let header = lines.next().expect("report has a header line");
    assert!(header.starts_with("AUC"), "unexpected report header: {header}");
    let values = lines.next().expect("report has a value line");
    values
        .split_whitespace()
        .nth(column)
        .expect("value column present")
        .parse()
        .expect("metric parses as f64")
}
