//! LLM-facing artifacts built from the news catalog: contrastive
//! fine-tuning triples, embedding prompts (optionally echo-duplicated), and
//! keyword-extraction prompts. All outputs are JSON-lines files consumed by
//! external tooling; nothing here runs a model.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::NewsItem;
use crate::seeds::{derive_seed, split_seed};

pub const EMBEDDING_INSTRUCTION: &str =
    "Given the information of a news, compress it into a maximum of 5 words for recommendation:";

pub const KEYWORD_INSTRUCTION: &str = "Given the information of a news, extract one to three \
keywords (The keywords must appear in the news information and must be nouns. Please provide \
the results in the following format: [keyword1, keyword2, keyword3]):";

/// Title/abstract pair with a mismatched abstract from another item, used to
/// fine-tune a retrieval-style encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveTriple {
    pub query: String,
    pub positive: String,
    pub negative: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub news_id: String,
    #[serde(rename = "prompt")]
    pub prompt_text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripleBuild {
    pub triples: Vec<ContrastiveTriple>,
    /// Items skipped for having an empty abstract.
    pub skipped_empty_abstract: u64,
}

/// One triple per item with a non-empty abstract: query = title, positive =
/// own abstract, negative = a seeded uniform draw from the other eligible
/// items' abstracts. The negative never equals the positive text and never
/// comes from the item itself.
pub fn build_contrastive_triples(news: &[NewsItem], seed: u64) -> Result<TripleBuild> {
    let eligible: Vec<&NewsItem> = news
        .iter()
        .filter(|n| !n.abstract_text.trim().is_empty())
        .collect();
    let skipped = (news.len() - eligible.len()) as u64;
    if eligible.len() < 2 {
        return Err(Error::invalid(format!(
            "contrastive triples need at least 2 items with non-empty abstracts, found {}",
            eligible.len()
        )));
    }
    let base = derive_seed(seed, "contrastive-triples");
    let mut triples = Vec::with_capacity(eligible.len());
    for (idx, item) in eligible.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(base, idx as u64));
        let negative = draw_negative(&eligible, idx, &mut rng)?;
        triples.push(ContrastiveTriple {
            query: item.title.clone(),
            positive: item.abstract_text.clone(),
            negative,
        });
    }
    Ok(TripleBuild {
        triples,
        skipped_empty_abstract: skipped,
    })
}

fn draw_negative(
    eligible: &[&NewsItem],
    self_idx: usize,
    rng: &mut ChaCha8Rng,
) -> Result<String> {
    let own = &eligible[self_idx].abstract_text;
    // Uniform over the other items, resampling when the drawn abstract text
    // happens to match the positive.
    for _ in 0..16 {
        let mut pick = rng.random_range(0..eligible.len() - 1);
        if pick >= self_idx {
            pick += 1;
        }
        if eligible[pick].abstract_text != *own {
            return Ok(eligible[pick].abstract_text.clone());
        }
    }
    // Degenerate corpus: fall back to the first item with a different text.
    eligible
        .iter()
        .enumerate()
        .find(|(i, n)| *i != self_idx && n.abstract_text != *own)
        .map(|(_, n)| n.abstract_text.clone())
        .ok_or_else(|| {
            Error::invalid(format!(
                "no distinct negative abstract exists for {:?}: every eligible abstract is identical",
                eligible[self_idx].news_id
            ))
        })
}

fn content_block(item: &NewsItem) -> String {
    format!(
        "category : {}\nsubcategory : {}\ntitle : {}\nabstract : {}",
        item.category, item.subcategory, item.title, item.abstract_text
    )
}

/// Instruction line plus the four `field : value` content lines. With `echo`
/// on, the content block (not the instruction) appears a second time.
pub fn build_embedding_prompt(item: &NewsItem, echo: bool) -> PromptRecord {
    let block = content_block(item);
    let prompt_text = if echo {
        format!("{EMBEDDING_INSTRUCTION}\n{block}\n{block}")
    } else {
        format!("{EMBEDDING_INSTRUCTION}\n{block}")
    };
    PromptRecord {
        news_id: item.news_id.clone(),
        prompt_text,
    }
}

/// Instruction line plus title and abstract.
pub fn build_keyword_prompt(item: &NewsItem) -> PromptRecord {
    PromptRecord {
        news_id: item.news_id.clone(),
        prompt_text: format!(
            "{KEYWORD_INSTRUCTION}\n{}\n{}",
            item.title, item.abstract_text
        ),
    }
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::invalid(format!("record serialization: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_triples(path: &Path, triples: &[ContrastiveTriple]) -> Result<()> {
    write_jsonl(path, triples)
}

pub fn write_prompts(path: &Path, prompts: &[PromptRecord]) -> Result<()> {
    write_jsonl(path, prompts)
}

pub fn read_prompts(path: &Path) -> Result<Vec<PromptRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PromptRecord = serde_json::from_str(&line)
            .map_err(|e| Error::malformed(path, idx + 1, format!("bad prompt line: {e}")))?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn news(id: &str, title: &str, abstract_text: &str) -> NewsItem {
        NewsItem {
            news_id: id.to_string(),
            category: "sports".to_string(),
            subcategory: "football_nfl".to_string(),
            title: title.to_string(),
            abstract_text: abstract_text.to_string(),
        }
    }

    fn nfl_item() -> NewsItem {
        news(
            "N1",
            "Should NFL be able to fine players for criticizing officiating?",
            "Several fines came down against NFL players for criticizing officiating this week. It's a very bad look for the league.",
        )
    }

    #[test]
    fn embedding_prompt_lines_match_expected_layout() {
        let record = build_embedding_prompt(&nfl_item(), false);
        let expected = "Given the information of a news, compress it into a maximum of 5 words for recommendation:\n\
category : sports\n\
subcategory : football_nfl\n\
title : Should NFL be able to fine players for criticizing officiating?\n\
abstract : Several fines came down against NFL players for criticizing officiating this week. It's a very bad look for the league.";
        assert_eq!(record.prompt_text, expected);
        assert_eq!(record.news_id, "N1");
    }

    #[test]
    fn empty_abstract_keeps_the_abstract_line() {
        let record = build_embedding_prompt(&news("N2", "Title", ""), false);
        assert!(record.prompt_text.ends_with("abstract : "));
        assert!(!record.prompt_text.is_empty());
    }

    #[test]
    fn echo_doubles_content_but_not_instruction() {
        let item = nfl_item();
        let plain = build_embedding_prompt(&item, false);
        let echoed = build_embedding_prompt(&item, true);
        let title_line = format!("title : {}", item.title);
        assert_eq!(plain.prompt_text.matches(&title_line).count(), 1);
        assert_eq!(echoed.prompt_text.matches(&title_line).count(), 2);
        assert_eq!(
            echoed.prompt_text.matches(EMBEDDING_INSTRUCTION).count(),
            1
        );
        for line in [
            format!("category : {}", item.category),
            format!("subcategory : {}", item.subcategory),
            format!("abstract : {}", item.abstract_text),
        ] {
            let n = echoed
                .prompt_text
                .lines()
                .filter(|l| **l == line)
                .count();
            assert_eq!(n, 2, "{line:?} should appear exactly twice");
        }
    }

    #[test]
    fn keyword_prompt_contains_instruction_and_title() {
        let record = build_keyword_prompt(&nfl_item());
        assert!(record.prompt_text.contains("extract one to three keywords"));
        assert!(record
            .prompt_text
            .contains("[keyword1, keyword2, keyword3]"));
        assert!(record
            .prompt_text
            .contains("Should NFL be able to fine players"));
    }

    #[test]
    fn keyword_prompts_contain_only_their_own_title() {
        let items = [
            news("N1", "first headline", "a1"),
            news("N2", "second headline", "a2"),
            news("N3", "third headline", "a3"),
        ];
        let prompts: Vec<PromptRecord> = items.iter().map(build_keyword_prompt).collect();
        for (i, prompt) in prompts.iter().enumerate() {
            for (j, item) in items.iter().enumerate() {
                assert_eq!(prompt.prompt_text.contains(&item.title), i == j);
            }
        }
    }

    #[test]
    fn keyword_prompt_with_empty_abstract() {
        let record = build_keyword_prompt(&news("N1", "Only title", ""));
        assert!(record.prompt_text.ends_with("Only title\n"));
    }

    #[test]
    fn triples_use_own_title_and_abstract() {
        let items = vec![
            news(
                "N10",
                "5 Classic Appetizers That Make Holiday Hosting a Breeze",
                "These five appetizers come together fast.",
            ),
            news("N11", "Other story", "A different abstract entirely."),
        ];
        let build = build_contrastive_triples(&items, 7).unwrap();
        assert_eq!(build.triples.len(), 2);
        let first = &build.triples[0];
        assert_eq!(
            first.query,
            "5 Classic Appetizers That Make Holiday Hosting a Breeze"
        );
        assert_eq!(first.positive, "These five appetizers come together fast.");
        // With two eligible items each negative is forced to be the other's.
        assert_eq!(first.negative, "A different abstract entirely.");
        assert_eq!(
            build.triples[1].negative,
            "These five appetizers come together fast."
        );
    }

    #[test]
    fn empty_abstracts_are_skipped_and_counted() {
        let items = vec![
            news("N1", "t1", "a1"),
            news("N2", "t2", "   "),
            news("N3", "t3", "a3"),
            news("N4", "t4", ""),
        ];
        let build = build_contrastive_triples(&items, 1).unwrap();
        assert_eq!(build.triples.len(), 2);
        assert_eq!(build.skipped_empty_abstract, 2);
    }

    #[test]
    fn fewer_than_two_eligible_items_fails() {
        let items = vec![news("N1", "t1", "a1"), news("N2", "t2", "")];
        assert!(build_contrastive_triples(&items, 1).is_err());
    }

    #[test]
    fn all_identical_abstracts_fails() {
        let items = vec![news("N1", "t1", "same"), news("N2", "t2", "same")];
        assert!(build_contrastive_triples(&items, 1).is_err());
    }

    #[test]
    fn hundred_item_fixture_is_reproducible_and_never_self_paired() {
        let items: Vec<NewsItem> = (0..100)
            .map(|i| news(&format!("N{i}"), &format!("title {i}"), &format!("abstract {i}")))
            .collect();
        let a = build_contrastive_triples(&items, 42).unwrap();
        let b = build_contrastive_triples(&items, 42).unwrap();
        assert_eq!(a, b);
        let c = build_contrastive_triples(&items, 43).unwrap();
        assert_ne!(a, c);
        for (i, triple) in a.triples.iter().enumerate() {
            assert_eq!(triple.positive, format!("abstract {i}"));
            assert_ne!(triple.negative, triple.positive);
            // The negative must belong to some other item.
            assert!(items
                .iter()
                .enumerate()
                .any(|(j, n)| j != i && n.abstract_text == triple.negative));
        }
    }

    #[test]
    fn duplicate_abstract_text_forces_resample_or_fallback() {
        // N1 and N2 share an abstract; each of their negatives must come from
        // N3, the only differing text.
        let items = vec![
            news("N1", "t1", "shared"),
            news("N2", "t2", "shared"),
            news("N3", "t3", "unique"),
        ];
        for seed in 0..20 {
            let build = build_contrastive_triples(&items, seed).unwrap();
            assert_eq!(build.triples[0].negative, "unique");
            assert_eq!(build.triples[1].negative, "unique");
            assert_ne!(build.triples[2].negative, "unique");
        }
    }

    #[test]
    fn jsonl_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let triples = vec![ContrastiveTriple {
            query: "q".into(),
            positive: "p".into(),
            negative: "n".into(),
        }];
        let tpath = dir.path().join("triples.jsonl");
        write_triples(&tpath, &triples).unwrap();
        let line = std::fs::read_to_string(&tpath).unwrap();
        assert_eq!(line, "{\"query\":\"q\",\"positive\":\"p\",\"negative\":\"n\"}\n");

        let prompts = vec![
            build_embedding_prompt(&nfl_item(), true),
            build_keyword_prompt(&nfl_item()),
        ];
        let ppath = dir.path().join("prompts.jsonl");
        write_prompts(&ppath, &prompts).unwrap();
        assert_eq!(read_prompts(&ppath).unwrap(), prompts);
        let raw = std::fs::read_to_string(&ppath).unwrap();
        assert!(raw.lines().next().unwrap().contains("\"news_id\":\"N1\""));
        assert!(raw.lines().next().unwrap().contains("\"prompt\":"));
    }

    #[test]
    fn triple_files_are_byte_identical_across_runs() {
        let items: Vec<NewsItem> = (0..30)
            .map(|i| news(&format!("N{i}"), &format!("t{i}"), &format!("a{i}")))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("t1.jsonl");
        let p2 = dir.path().join("t2.jsonl");
        write_triples(&p1, &build_contrastive_triples(&items, 9).unwrap().triples).unwrap();
        write_triples(&p2, &build_contrastive_triples(&items, 9).unwrap().triples).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap()
        );
    }
}
