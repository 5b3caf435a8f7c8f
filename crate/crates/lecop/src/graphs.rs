//! Co-occurrence extraction from click histories: a sliding window produces
//! three pair multisets (news-id pairs, cross-item keyword pairs, within-item
//! keyword pairs), which become three weighted undirected graphs.
//!
//! Keyword tokens are normalized (trimmed, lowercased) and deduplicated per
//! item before pairing, so graph nodes match the overlap counting and the
//! fusion lookups.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::Impression;
use crate::keywords::{normalize_keyword, KeywordMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PairKind {
    IdId,
    ItemItemKw,
    IntraItemKw,
}

/// Counted unordered token pairs. Endpoints are stored lexicographically
/// ordered; self-pairs are never admitted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairMultiset {
    pub kind: PairKind,
    counts: BTreeMap<(String, String), u64>,
}

impl PairMultiset {
    pub fn new(kind: PairKind) -> Self {
        PairMultiset {
            kind,
            counts: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, a: &str, b: &str, n: u64) {
        debug_assert_ne!(a, b, "self-pairs are excluded upstream");
        if a == b || n == 0 {
            return;
        }
        let key = if a <= b {
            (a.to_string(), b.to_string())
        } else {
            (b.to_string(), a.to_string())
        };
        *self.counts.entry(key).or_insert(0) += n;
    }

    pub fn count(&self, a: &str, b: &str) -> u64 {
        let key = if a <= b {
            (a.to_string(), b.to_string())
        } else {
            (b.to_string(), a.to_string())
        };
        self.counts.get(&key).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, String), u64)> {
        self.counts.iter().map(|(k, v)| (k, *v))
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Sum of all pair counts.
    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn merge(&mut self, other: &PairMultiset) {
        debug_assert_eq!(self.kind, other.kind);
        for (pair, n) in &other.counts {
            *self.counts.entry(pair.clone()).or_insert(0) += n;
        }
    }
}

/// How often within-item keyword pairs are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IntraCounting {
    /// Every history position counts (popular items get heavier edges).
    #[default]
    PerOccurrence,
    /// Each distinct item counts once per history.
    PerDistinctItem,
}

/// Keyword-map coverage over the processed history positions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CoverageReport {
    pub positions_total: u64,
    pub positions_without_keywords: u64,
    pub distinct_ids_without_keywords: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractedPairs {
    pub id_id: PairMultiset,
    pub item_item_kw: PairMultiset,
    pub intra_item_kw: PairMultiset,
    pub coverage: CoverageReport,
}

impl ExtractedPairs {
    fn empty() -> Self {
        ExtractedPairs {
            id_id: PairMultiset::new(PairKind::IdId),
            item_item_kw: PairMultiset::new(PairKind::ItemItemKw),
            intra_item_kw: PairMultiset::new(PairKind::IntraItemKw),
            coverage: CoverageReport::default(),
        }
    }

    fn merge(&mut self, other: &ExtractedPairs) {
        self.id_id.merge(&other.id_id);
        self.item_item_kw.merge(&other.item_item_kw);
        self.intra_item_kw.merge(&other.intra_item_kw);
        self.coverage.positions_total += other.coverage.positions_total;
        self.coverage.positions_without_keywords += other.coverage.positions_without_keywords;
        // Distinct missing ids cannot be summed across histories; accumulate
        // recomputes them at corpus level.
        self.coverage.distinct_ids_without_keywords = 0;
    }
}

/// Normalized keywords of one item, deduplicated, original order kept.
fn normalized_keywords(map: &KeywordMap, news_id: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    if let Some(kws) = map.get(news_id) {
        for kw in kws {
            let token = normalize_keyword(kw);
            if !out.contains(&token) {
                out.push(token);
            }
        }
    }
    out
}

/// Slide a `window`-length frame (stride 1) over one history and collect the
/// three pair multisets. Within-item pairs are counted independently of the
/// window per `intra` mode.
pub fn extract_pairs(
    history: &[String],
    window: usize,
    keyword_map: &KeywordMap,
    intra: IntraCounting,
) -> Result<ExtractedPairs> {
    if window < 2 {
        return Err(Error::invalid(format!(
            "co-occurrence window must be at least 2, got {window}"
        )));
    }
    let mut out = ExtractedPairs::empty();
    extract_into(history, window, keyword_map, intra, &mut out);
    let missing: BTreeSet<&str> = history
        .iter()
        .map(|id| id.as_str())
        .filter(|id| !keyword_map.contains(id))
        .collect();
    out.coverage.distinct_ids_without_keywords = missing.len() as u64;
    Ok(out)
}

fn extract_into(
    history: &[String],
    window: usize,
    keyword_map: &KeywordMap,
    intra: IntraCounting,
    out: &mut ExtractedPairs,
) {
    let mut memo: HashMap<&str, Vec<String>> = HashMap::new();
    for id in history {
        memo.entry(id.as_str())
            .or_insert_with(|| normalized_keywords(keyword_map, id));
    }
    let kw_at: Vec<&[String]> = history
        .iter()
        .map(|id| memo[id.as_str()].as_slice())
        .collect();

    out.coverage.positions_total += history.len() as u64;
    out.coverage.positions_without_keywords += history
        .iter()
        .filter(|id| !keyword_map.contains(id))
        .count() as u64;

    // Within-item pairs, window-independent.
    let intra_positions: Vec<usize> = match intra {
        IntraCounting::PerOccurrence => (0..history.len()).collect(),
        IntraCounting::PerDistinctItem => {
            let mut seen = BTreeSet::new();
            (0..history.len())
                .filter(|&pos| seen.insert(history[pos].as_str()))
                .collect()
        }
    };
    for pos in intra_positions {
        let kws = kw_at[pos];
        for i in 0..kws.len() {
            for j in i + 1..kws.len() {
                out.intra_item_kw.add(&kws[i], &kws[j], 1);
            }
        }
    }

    // Cross-position pairs inside each window.
    if history.len() < window {
        return;
    }
    for start in 0..=history.len() - window {
        for i in start..start + window {
            for j in i + 1..start + window {
                let (a, b) = (&history[i], &history[j]);
                if a == b {
                    continue;
                }
                out.id_id.add(a, b, 1);
                for ka in kw_at[i] {
                    for kb in kw_at[j] {
                        if ka != kb {
                            out.item_item_kw.add(ka, kb, 1);
                        }
                    }
                }
            }
        }
    }
}

/// Sum of per-history extractions over a corpus. Merge order does not affect
/// the result (pair addition is commutative), so histories run in parallel.
pub fn accumulate(
    corpus: &[Vec<String>],
    window: usize,
    keyword_map: &KeywordMap,
    intra: IntraCounting,
) -> Result<ExtractedPairs> {
    if window < 2 {
        return Err(Error::invalid(format!(
            "co-occurrence window must be at least 2, got {window}"
        )));
    }
    let mut out = corpus
        .par_iter()
        .fold(ExtractedPairs::empty, |mut acc, history| {
            extract_into(history, window, keyword_map, intra, &mut acc);
            acc
        })
        .reduce(ExtractedPairs::empty, |mut a, b| {
            a.merge(&b);
            a
        });
    let missing: BTreeSet<&str> = corpus
        .iter()
        .flatten()
        .map(|id| id.as_str())
        .filter(|id| !keyword_map.contains(id))
        .collect();
    out.coverage.distinct_ids_without_keywords = missing.len() as u64;
    Ok(out)
}

/// One history per user for graph building. By default a user keeps their
/// longest history (first such on ties, in input order); `per_impression`
/// keeps every impression's history. Output is sorted for determinism.
pub fn collect_histories(impressions: &[Impression], per_impression: bool) -> Vec<Vec<String>> {
    if per_impression {
        let mut out: Vec<Vec<String>> = impressions
            .iter()
            .filter(|imp| !imp.history.is_empty())
            .map(|imp| imp.history.clone())
            .collect();
        out.sort();
        return out;
    }
    let mut per_user: BTreeMap<&str, &Vec<String>> = BTreeMap::new();
    for imp in impressions {
        if imp.history.is_empty() {
            continue;
        }
        per_user
            .entry(imp.user_id.as_str())
            .and_modify(|best| {
                if imp.history.len() > best.len() {
                    *best = &imp.history;
                }
            })
            .or_insert(&imp.history);
    }
    per_user.into_values().cloned().collect()
}

pub const ID_NODE_PREFIX: &str = "id:";
pub const KW_NODE_PREFIX: &str = "kw:";

pub fn id_node(news_id: &str) -> String {
    format!("{ID_NODE_PREFIX}{news_id}")
}

pub fn kw_node(keyword: &str) -> String {
    format!("{KW_NODE_PREFIX}{}", normalize_keyword(keyword))
}

/// Weighted undirected graph. Nodes carry an `id:`/`kw:` namespace prefix
/// according to the multiset they came from, keeping the three graphs' node
/// spaces disjoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightedGraph {
    nodes: BTreeSet<String>,
    edges: BTreeMap<(String, String), u64>,
}

impl WeightedGraph {
    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|s| s.as_str())
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str, u64)> {
        self.edges.iter().map(|((a, b), w)| (a.as_str(), b.as_str(), *w))
    }

    pub fn weight(&self, a: &str, b: &str) -> u64 {
        let key = if a <= b {
            (a.to_string(), b.to_string())
        } else {
            (b.to_string(), a.to_string())
        };
        self.edges.get(&key).copied().unwrap_or(0)
    }

    pub fn total_weight(&self) -> u64 {
        self.edges.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Namespace the multiset's tokens and copy its counts as edge weights.
pub fn build_graph(pairs: &PairMultiset) -> WeightedGraph {
    let prefix = match pairs.kind {
        PairKind::IdId => ID_NODE_PREFIX,
        PairKind::ItemItemKw | PairKind::IntraItemKw => KW_NODE_PREFIX,
    };
    let mut nodes = BTreeSet::new();
    let mut edges = BTreeMap::new();
    for ((a, b), w) in pairs.iter() {
        let na = format!("{prefix}{a}");
        let nb = format!("{prefix}{b}");
        nodes.insert(na.clone());
        nodes.insert(nb.clone());
        let key = if na <= nb { (na, nb) } else { (nb, na) };
        edges.insert(key, w);
    }
    WeightedGraph { nodes, edges }
}

/// Sorted `node_a\tnode_b\tweight` lines.
pub fn write_graph(path: &Path, graph: &WeightedGraph) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (a, b, weight) in graph.edges() {
        writeln!(w, "{a}\t{b}\t{weight}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_graph(path: &Path) -> Result<WeightedGraph> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut nodes = BTreeSet::new();
    let mut edges = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (a, b, w) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(w), None) => (a, b, w),
            _ => {
                return Err(Error::malformed(
                    path,
                    idx + 1,
                    "expected node_a<TAB>node_b<TAB>weight",
                ))
            }
        };
        let weight: u64 = w.parse().map_err(|_| {
            Error::malformed(path, idx + 1, format!("bad edge weight {w:?}"))
        })?;
        if weight == 0 {
            return Err(Error::malformed(path, idx + 1, "zero edge weight"));
        }
        if a == b {
            return Err(Error::malformed(path, idx + 1, format!("self-loop on {a:?}")));
        }
        nodes.insert(a.to_string());
        nodes.insert(b.to_string());
        let key = if a <= b {
            (a.to_string(), b.to_string())
        } else {
            (b.to_string(), a.to_string())
        };
        if edges.insert(key, weight).is_some() {
            return Err(Error::malformed(
                path,
                idx + 1,
                format!("duplicate edge {a:?} {b:?}"),
            ));
        }
    }
    Ok(WeightedGraph { nodes, edges })
}
