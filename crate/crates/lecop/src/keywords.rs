//! Keyword files produced by an external LLM extraction run: loading,
//! validation against the news text, and the shared normalization rule.
//!
//! Input is JSON-lines, one object per line with a `news_id` string and a
//! `keywords` value that is either an array of strings or a single bracketed
//! string such as `"[keyword1, keyword2, keyword3]"`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::NewsItem;

/// Canonical keyword token: trimmed and lowercased. Graph nodes, overlap
/// counting, and pooling lookups all compare keywords through this.
pub fn normalize_keyword(raw: &str) -> String {
    raw.trim().to_lowercase()
}

/// Ordered keywords per news id. Entries hold 1 to 3 keywords, each non-empty
/// after trimming; original casing and order are preserved.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeywordMap {
    entries: BTreeMap<String, Vec<String>>,
}

pub const MAX_KEYWORDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KeywordPolicy {
    /// Oversized lists keep their first three keywords; the truncation is
    /// reported.
    #[default]
    Lenient,
    /// Oversized lists fail the load.
    Strict,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeywordLoadReport {
    /// Ids whose lists were truncated to three keywords (lenient mode only).
    pub truncated_ids: Vec<String>,
}

impl KeywordMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert after trimming; rejects empty ids, empty or oversized lists,
    /// blank keywords, and duplicate ids.
    pub fn insert(&mut self, news_id: &str, keywords: Vec<String>) -> Result<()> {
        if news_id.is_empty() {
            return Err(Error::invalid("keyword entry with empty news_id"));
        }
        if keywords.is_empty() {
            return Err(Error::invalid(format!(
                "keyword entry {news_id:?} has an empty keyword list"
            )));
        }
        if keywords.len() > MAX_KEYWORDS {
            return Err(Error::invalid(format!(
                "keyword entry {news_id:?} has {} keywords, maximum is {MAX_KEYWORDS}",
                keywords.len()
            )));
        }
        let trimmed: Vec<String> = keywords.iter().map(|k| k.trim().to_string()).collect();
        if trimmed.iter().any(|k| k.is_empty()) {
            return Err(Error::invalid(format!(
                "keyword entry {news_id:?} contains a blank keyword"
            )));
        }
        if self.entries.contains_key(news_id) {
            return Err(Error::DuplicateId {
                id: news_id.to_string(),
            });
        }
        self.entries.insert(news_id.to_string(), trimmed);
        Ok(())
    }

    pub fn get(&self, news_id: &str) -> Option<&[String]> {
        self.entries.get(news_id).map(|v| v.as_slice())
    }

    pub fn contains(&self, news_id: &str) -> bool {
        self.entries.contains_key(news_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Deserialize)]
struct RawKeywordLine {
    news_id: String,
    keywords: RawKeywords,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawKeywords {
    List(Vec<String>),
    Bracketed(String),
}

impl RawKeywords {
    fn into_tokens(self) -> Vec<String> {
        match self {
            RawKeywords::List(list) => list
                .into_iter()
                .map(|k| k.trim().to_string())
                .filter(|k| !k.is_empty())
                .collect(),
            RawKeywords::Bracketed(s) => {
                let inner = s.trim();
                let inner = inner.strip_prefix('[').unwrap_or(inner);
                let inner = inner.strip_suffix(']').unwrap_or(inner);
                inner
                    .split(',')
                    .map(|k| k.trim().to_string())
                    .filter(|k| !k.is_empty())
                    .collect()
            }
        }
    }
}

pub fn load_keywords(path: &Path, policy: KeywordPolicy) -> Result<(KeywordMap, KeywordLoadReport)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut map = KeywordMap::new();
    let mut report = KeywordLoadReport::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawKeywordLine = serde_json::from_str(&line)
            .map_err(|e| Error::malformed(path, idx + 1, format!("bad keyword line: {e}")))?;
        let mut tokens = raw.keywords.into_tokens();
        if tokens.is_empty() {
            return Err(Error::malformed(
                path,
                idx + 1,
                format!("entry {:?} has an empty keyword list", raw.news_id),
            ));
        }
        if tokens.len() > MAX_KEYWORDS {
            match policy {
                KeywordPolicy::Strict => {
                    return Err(Error::malformed(
                        path,
                        idx + 1,
                        format!(
                            "entry {:?} has {} keywords, maximum is {MAX_KEYWORDS}",
                            raw.news_id,
                            tokens.len()
                        ),
                    ));
                }
                KeywordPolicy::Lenient => {
                    tokens.truncate(MAX_KEYWORDS);
                    report.truncated_ids.push(raw.news_id.clone());
                }
            }
        }
        map.insert(&raw.news_id, tokens)
            .map_err(|e| match e {
                Error::DuplicateId { id } => Error::malformed(
                    path,
                    idx + 1,
                    format!("duplicate entry for news id {id:?}"),
                ),
                other => other,
            })?;
    }
    report.truncated_ids.sort();
    Ok((map, report))
}

/// Serialize as JSON-lines; round-trips with [`load_keywords`].
pub fn write_keywords(path: &Path, map: &KeywordMap) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        news_id: &'a str,
        keywords: &'a [String],
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (news_id, keywords) in map.iter() {
        let line = serde_json::to_string(&Line { news_id, keywords })
            .map_err(|e| Error::invalid(format!("keyword entry serialization: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct KeywordValidationReport {
    /// Entries scanned.
    pub total: u64,
    /// Keywords not found case-insensitively in their item's title+abstract.
    pub violations_absent_from_text: u64,
    /// Entries outside the 1..=3 length range.
    pub violations_count_range: u64,
    /// Ids with at least one violation, sorted.
    pub violating_ids: Vec<String>,
    /// Map ids absent from the catalog (their text cannot be checked), sorted.
    pub ids_missing_from_catalog: Vec<String>,
}

/// Check every keyword against its item's text: valid iff it appears
/// case-insensitively as a substring of `title + " " + abstract`.
pub fn validate_keywords(map: &KeywordMap, catalog: &[NewsItem]) -> KeywordValidationReport {
    let by_id: HashMap<&str, &NewsItem> =
        catalog.iter().map(|n| (n.news_id.as_str(), n)).collect();
    let mut report = KeywordValidationReport::default();
    for (news_id, keywords) in map.iter() {
        report.total += 1;
        let mut violated = false;
        if keywords.is_empty() || keywords.len() > MAX_KEYWORDS {
            report.violations_count_range += 1;
            violated = true;
        }
        match by_id.get(news_id) {
            Some(item) => {
                let haystack =
                    format!("{} {}", item.title, item.abstract_text).to_lowercase();
                for kw in keywords {
                    if !haystack.contains(&kw.trim().to_lowercase()) {
                        report.violations_absent_from_text += 1;
                        violated = true;
                    }
                }
            }
            None => report.ids_missing_from_catalog.push(news_id.to_string()),
        }
        if violated {
            report.violating_ids.push(news_id.to_string());
        }
    }
    report.violating_ids.sort();
    report.ids_missing_from_catalog.sort();
    report
}

impl KeywordValidationReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "total = {}\nviolations_absent_from_text = {}\nviolations_count_range = {}\n",
            self.total, self.violations_absent_from_text, self.violations_count_range
        );
        out.push_str(&format!(
            "violating_ids = {}\nids_missing_from_catalog = {}\n",
            self.violating_ids.join(" "),
            self.ids_missing_from_catalog.join(" ")
        ));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
