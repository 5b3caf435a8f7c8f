//! MIND-format ingestion: news catalogs, behavior logs, dataset statistics,
//! and train/test overlap reports.
//!
//! Both input files are UTF-8, tab-separated, one record per line, no header.
//! News rows carry news_id, category, subcategory, title, abstract (extra
//! columns such as URL and entities are ignored). Behavior rows carry
//! impression_id, user_id, time, a space-separated click history, and
//! space-separated `newsid-label` candidates.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::keywords::{normalize_keyword, KeywordMap};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewsItem {
    pub news_id: String,
    pub category: String,
    pub subcategory: String,
    pub title: String,
    pub abstract_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Impression {
    pub impression_id: String,
    pub user_id: String,
    pub timestamp: String,
    /// Clicked news ids, oldest first.
    pub history: Vec<String>,
    /// Shown candidates with 0/1 click labels.
    pub candidates: Vec<(String, u8)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DatasetStats {
    pub user_count: u64,
    pub news_count: u64,
    /// Positive candidate labels across behavior rows; histories are not
    /// counted. The text report states this rule.
    pub click_count: u64,
}

/// How malformed rows are handled while parsing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RowPolicy {
    /// Any malformed row fails the whole parse.
    #[default]
    Fail,
    /// Malformed rows are counted and skipped.
    Skip,
}

#[derive(Debug)]
pub struct ParseOutcome<T> {
    pub records: Vec<T>,
    pub skipped_rows: u64,
}

impl<T> Default for ParseOutcome<T> {
    fn default() -> Self {
        ParseOutcome {
            records: Vec::new(),
            skipped_rows: 0,
        }
    }
}

pub fn parse_news(path: &Path) -> Result<Vec<NewsItem>> {
    Ok(parse_news_with(path, RowPolicy::Fail)?.records)
}

pub fn parse_news_with(path: &Path, policy: RowPolicy) -> Result<ParseOutcome<NewsItem>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = ParseOutcome::default();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        match parse_news_row(&line) {
            Ok(item) => {
                if !seen.insert(item.news_id.clone()) {
                    return Err(Error::DuplicateId {
                        id: item.news_id.clone(),
                    });
                }
                out.records.push(item);
            }
            Err(msg) => match policy {
                RowPolicy::Fail => return Err(Error::malformed(path, idx + 1, msg)),
                RowPolicy::Skip => out.skipped_rows += 1,
            },
        }
    }
    Ok(out)
}

fn parse_news_row(line: &str) -> std::result::Result<NewsItem, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() < 4 {
        return Err(format!(
            "expected at least 4 tab-separated fields, found {}",
            fields.len()
        ));
    }
    let news_id = fields[0];
    let title = fields[3];
    if news_id.is_empty() {
        return Err("empty news_id".to_string());
    }
    if title.is_empty() {
        return Err("empty title".to_string());
    }
    Ok(NewsItem {
        news_id: news_id.to_string(),
        category: fields[1].to_string(),
        subcategory: fields[2].to_string(),
        title: title.to_string(),
        abstract_text: fields.get(4).unwrap_or(&"").to_string(),
    })
}

pub fn parse_behaviors(path: &Path) -> Result<Vec<Impression>> {
    Ok(parse_behaviors_with(path, RowPolicy::Fail)?.records)
}

pub fn parse_behaviors_with(path: &Path, policy: RowPolicy) -> Result<ParseOutcome<Impression>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = ParseOutcome::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        match parse_behavior_row(&line) {
            Ok(imp) => out.records.push(imp),
            Err(msg) => match policy {
                RowPolicy::Fail => return Err(Error::malformed(path, idx + 1, msg)),
                RowPolicy::Skip => out.skipped_rows += 1,
            },
        }
    }
    Ok(out)
}

fn parse_behavior_row(line: &str) -> std::result::Result<Impression, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() < 5 {
        return Err(format!(
            "expected 5 tab-separated fields, found {}",
            fields.len()
        ));
    }
    let history: Vec<String> = fields[3]
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect();
    let mut candidates = Vec::new();
    for token in fields[4].split(' ').filter(|t| !t.is_empty()) {
        let (id, label) = token
            .rsplit_once('-')
            .ok_or_else(|| format!("candidate token {token:?} lacks a -0/-1 suffix"))?;
        let label = match label {
            "0" => 0u8,
            "1" => 1u8,
            other => return Err(format!("candidate token {token:?} has bad label {other:?}")),
        };
        if id.is_empty() {
            return Err(format!("candidate token {token:?} has empty news id"));
        }
        candidates.push((id.to_string(), label));
    }
    if candidates.is_empty() {
        return Err("empty candidate list".to_string());
    }
    Ok(Impression {
        impression_id: fields[0].to_string(),
        user_id: fields[1].to_string(),
        timestamp: fields[2].to_string(),
        history,
        candidates,
    })
}

/// Serialize news back to the tab-separated layout (round-trips with
/// [`parse_news`]).
pub fn write_news(path: &Path, news: &[NewsItem]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in news {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            item.news_id, item.category, item.subcategory, item.title, item.abstract_text
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Serialize behaviors back to the tab-separated layout (round-trips with
/// [`parse_behaviors`]).
pub fn write_behaviors(path: &Path, impressions: &[Impression]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for imp in impressions {
        let history = imp.history.join(" ");
        let candidates: Vec<String> = imp
            .candidates
            .iter()
            .map(|(id, label)| format!("{id}-{label}"))
            .collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            imp.impression_id,
            imp.user_id,
            imp.timestamp,
            history,
            candidates.join(" ")
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn compute_stats(news: &[NewsItem], impressions: &[Impression]) -> DatasetStats {
    let users: HashSet<&str> = impressions.iter().map(|i| i.user_id.as_str()).collect();
    let clicks: u64 = impressions
        .iter()
        .map(|i| i.candidates.iter().filter(|(_, l)| *l == 1).count() as u64)
        .sum();
    DatasetStats {
        user_count: users.len() as u64,
        news_count: news.len() as u64,
        click_count: clicks,
    }
}

/// One overlap cell: what fraction of the test stream was seen/unseen in the
/// train stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OverlapCell {
    pub fraction_unseen: f64,
    pub fraction_seen: f64,
    pub unseen: u64,
    pub total: u64,
}

impl OverlapCell {
    fn from_counts(unseen: u64, total: u64) -> Self {
        // An empty stream carries no unseen occurrences.
        let fraction_unseen = if total == 0 {
            0.0
        } else {
            unseen as f64 / total as f64
        };
        OverlapCell {
            fraction_unseen,
            fraction_seen: 1.0 - fraction_unseen,
            unseen,
            total,
        }
    }
}

/// Train/test overlap along the news-id and keyword dimensions, each with and
/// without duplicate removal over the test stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapReport {
    pub news_id_dedup: OverlapCell,
    pub news_id_non_dedup: OverlapCell,
    pub keyword_dedup: OverlapCell,
    pub keyword_non_dedup: OverlapCell,
    /// Distinct test-stream ids with no keyword entry.
    pub test_ids_without_keywords: u64,
    /// Distinct train-stream ids with no keyword entry.
    pub train_ids_without_keywords: u64,
    /// The occurrence-stream rule the counts are based on.
    pub stream_rule: String,
}

const STREAM_RULE: &str =
    "occurrence stream per impression = history ids followed by candidate ids; \
     non-dedup counts every occurrence, dedup counts each distinct token once; \
     keywords are trimmed and lowercased";

/// Every id occurrence in a split, impression by impression: history first,
/// then candidates.
fn id_stream(impressions: &[Impression]) -> impl Iterator<Item = &str> {
    impressions.iter().flat_map(|imp| {
        imp.history
            .iter()
            .map(|s| s.as_str())
            .chain(imp.candidates.iter().map(|(id, _)| id.as_str()))
    })
}

pub fn compute_overlap(
    train: &[Impression],
    test: &[Impression],
    keyword_map: &KeywordMap,
) -> OverlapReport {
    let train_ids: HashSet<&str> = id_stream(train).collect();

    // Keyword tokens present anywhere in the train stream.
    let mut train_kws: HashSet<String> = HashSet::new();
    let mut train_uncovered: HashSet<&str> = HashSet::new();
    for id in &train_ids {
        match keyword_map.get(id) {
            Some(kws) => {
                train_kws.extend(kws.iter().map(|k| normalize_keyword(k)));
            }
            None => {
                train_uncovered.insert(id);
            }
        }
    }

    let mut id_total = 0u64;
    let mut id_unseen = 0u64;
    let mut kw_total = 0u64;
    let mut kw_unseen = 0u64;
    let mut distinct_ids: HashMap<&str, bool> = HashMap::new();
    let mut distinct_kws: HashMap<String, bool> = HashMap::new();
    let mut test_uncovered: HashSet<&str> = HashSet::new();

    for id in id_stream(test) {
        let seen = train_ids.contains(id);
        id_total += 1;
        if !seen {
            id_unseen += 1;
        }
        distinct_ids.entry(id).or_insert(seen);
        match keyword_map.get(id) {
            Some(kws) => {
                for kw in kws {
                    let token = normalize_keyword(kw);
                    let kw_seen = train_kws.contains(&token);
                    kw_total += 1;
                    if !kw_seen {
                        kw_unseen += 1;
                    }
                    distinct_kws.entry(token).or_insert(kw_seen);
                }
            }
            None => {
                test_uncovered.insert(id);
            }
        }
    }

    let id_dedup_unseen = distinct_ids.values().filter(|seen| !**seen).count() as u64;
    let kw_dedup_unseen = distinct_kws.values().filter(|seen| !**seen).count() as u64;

    OverlapReport {
        news_id_dedup: OverlapCell::from_counts(id_dedup_unseen, distinct_ids.len() as u64),
        news_id_non_dedup: OverlapCell::from_counts(id_unseen, id_total),
        keyword_dedup: OverlapCell::from_counts(kw_dedup_unseen, distinct_kws.len() as u64),
        keyword_non_dedup: OverlapCell::from_counts(kw_unseen, kw_total),
        test_ids_without_keywords: test_uncovered.len() as u64,
        train_ids_without_keywords: train_uncovered.len() as u64,
        stream_rule: STREAM_RULE.to_string(),
    }
}

impl OverlapReport {
    /// Flat key-value text rendering; one `key = value` line per figure.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# {}\n", self.stream_rule));
        let cells = [
            ("news_id.dedup", &self.news_id_dedup),
            ("news_id.non_dedup", &self.news_id_non_dedup),
            ("keyword.dedup", &self.keyword_dedup),
            ("keyword.non_dedup", &self.keyword_non_dedup),
        ];
        for (name, cell) in cells {
            out.push_str(&format!(
                "{name}.fraction_unseen = {:.6}\n{name}.fraction_seen = {:.6}\n{name}.unseen = {}\n{name}.total = {}\n",
                cell.fraction_unseen, cell.fraction_seen, cell.unseen, cell.total
            ));
        }
        out.push_str(&format!(
            "test_ids_without_keywords = {}\ntrain_ids_without_keywords = {}\n",
            self.test_ids_without_keywords, self.train_ids_without_keywords
        ));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl DatasetStats {
    pub fn to_text(&self) -> String {
        format!(
            "# click_count = positive candidate labels across behavior rows (histories excluded)\n\
             user_count = {}\nnews_count = {}\nclick_count = {}\n",
            self.user_count, self.news_count, self.click_count
        )
    }
}

/// Merge split catalogs by id; the first occurrence of an id wins.
pub fn merge_catalogs(catalogs: &[&[NewsItem]]) -> Vec<NewsItem> {
    let mut seen = HashSet::new();
    let mut merged = Vec::new();
    for catalog in catalogs {
        for item in *catalog {
            if seen.insert(item.news_id.clone()) {
                merged.push(item.clone());
            }
        }
    }
    merged
}

/// Distinct news ids referenced by a set of impressions (history plus
/// candidates), in sorted order.
pub fn referenced_ids(impressions: &[Impression]) -> Vec<String> {
    let set: BTreeSet<&str> = id_stream(impressions).collect();
    set.into_iter().map(|s| s.to_string()).collect()
}

/// Index a catalog by id.
pub fn catalog_index(news: &[NewsItem]) -> BTreeMap<&str, &NewsItem> {
    news.iter().map(|n| (n.news_id.as_str(), n)).collect()
}
