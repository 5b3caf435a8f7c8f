//! Final news vectors: the three graph-embedding segments are concatenated
//! (id segment, cross-item keyword pool, within-item keyword pool) and an
//! affine projection of the LLM embedding is added on top.
//!
//! All arithmetic is in f64; vectors read from disk are f32 and widened.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graphs::{id_node, kw_node};
use crate::keywords::KeywordMap;
use crate::node2vec::NodeEmbeddings;
use crate::seeds::derive_seed;
use crate::vectors::VectorTable;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The three per-graph node embedding tables. Segment order is fixed: id
/// graph, cross-item keyword graph, within-item keyword graph.
pub struct CoocEmbeddingSet {
    pub id_vecs: NodeEmbeddings,
    pub item_item_kw_vecs: NodeEmbeddings,
    pub intra_kw_vecs: NodeEmbeddings,
}

impl CoocEmbeddingSet {
    pub fn d_out(&self) -> usize {
        self.id_vecs.dim() + self.item_item_kw_vecs.dim() + self.intra_kw_vecs.dim()
    }
}

/// Affine map from the LLM embedding space onto the co-occurrence space.
/// Trained together with the user encoder; frozen at fusion time.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    d_out: usize,
    d_llm: usize,
    /// Row-major d_out x d_llm.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl ProjectionParams {
    pub fn zeros(d_out: usize, d_llm: usize) -> ProjectionParams {
        ProjectionParams {
            d_out,
            d_llm,
            weight: vec![0.0; d_out * d_llm],
            bias: vec![0.0; d_out],
        }
    }

    /// Uniform Glorot initialization, seeded.
    pub fn init(d_out: usize, d_llm: usize, seed: u64) -> ProjectionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "projection-init"));
        let bound = (6.0 / (d_out + d_llm) as f64).sqrt();
        ProjectionParams {
            d_out,
            d_llm,
            weight: (0..d_out * d_llm)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
            bias: vec![0.0; d_out],
        }
    }

    pub fn from_parts(d_out: usize, d_llm: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != d_out * d_llm || bias.len() != d_out {
            return Err(Error::invalid(format!(
                "projection shape mismatch: weight {} (want {}), bias {} (want {d_out})",
                weight.len(),
                d_out * d_llm,
                bias.len()
            )));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::invalid("projection contains non-finite values"));
        }
        Ok(ProjectionParams {
            d_out,
            d_llm,
            weight,
            bias,
        })
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn d_llm(&self) -> usize {
        self.d_llm
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// Both tensors borrowed at once, for optimizers that walk every
    /// parameter slice in lockstep.
    pub fn parts_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.weight, &mut self.bias)
    }
}

/// Mean of the item's keyword node vectors found in `kw_vecs`; zeros when no
/// keyword resolves. The flag reports whether anything was found.
pub fn pool_keywords(
    news_id: &str,
    keyword_map: &KeywordMap,
    kw_vecs: &NodeEmbeddings,
) -> (Vec<f64>, bool) {
    let dim = kw_vecs.dim();
    let mut acc = vec![0.0f64; dim];
    let mut found = 0usize;
    if let Some(keywords) = keyword_map.get(news_id) {
        for kw in keywords {
            if let Some(vec) = kw_vecs.get(&kw_node(kw)) {
                for (a, &v) in acc.iter_mut().zip(vec) {
                    *a += v as f64;
                }
                found += 1;
            }
        }
    }
    if found == 0 {
        return (acc, false);
    }
    for a in &mut acc {
        *a /= found as f64;
    }
    (acc, true)
}

/// Which of the three segments fell back to zeros for one item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentPresence {
    pub id: bool,
    pub item_item_kw: bool,
    pub intra_kw: bool,
}

/// Concatenated co-occurrence vector: [id segment ; cross-keyword pool ;
/// within-keyword pool], each segment zero-filled when its source has no
/// entry for this item.
pub fn assemble_cooc(
    news_id: &str,
    cooc: &CoocEmbeddingSet,
    keyword_map: &KeywordMap,
) -> (Vec<f64>, SegmentPresence) {
    let mut out = Vec::with_capacity(cooc.d_out());
    let id_found = match cooc.id_vecs.get(&id_node(news_id)) {
        Some(vec) => {
            out.extend(vec.iter().map(|&v| v as f64));
            true
        }
        None => {
            out.extend(std::iter::repeat(0.0).take(cooc.id_vecs.dim()));
            false
        }
    };
    let (cross, cross_found) = pool_keywords(news_id, keyword_map, &cooc.item_item_kw_vecs);
    out.extend_from_slice(&cross);
    let (intra, intra_found) = pool_keywords(news_id, keyword_map, &cooc.intra_kw_vecs);
    out.extend_from_slice(&intra);
    (
        out,
        SegmentPresence {
            id: id_found,
            item_item_kw: cross_found,
            intra_kw: intra_found,
        },
    )
}

/// (weight . llm_vec + bias) + cooc_vec.
pub fn fuse(llm_vec: &[f64], cooc_vec: &[f64], proj: &ProjectionParams) -> Result<Vec<f64>> {
    if llm_vec.len() != proj.d_llm {
        return Err(Error::invalid(format!(
            "llm vector length {} does not match projection input {}",
            llm_vec.len(),
            proj.d_llm
        )));
    }
    if cooc_vec.len() != proj.d_out {
        return Err(Error::invalid(format!(
            "cooc vector length {} does not match projection output {}",
            cooc_vec.len(),
            proj.d_out
        )));
    }
    let mut out = Vec::with_capacity(proj.d_out);
    for i in 0..proj.d_out {
        let row = &proj.weight[i * proj.d_llm..(i + 1) * proj.d_llm];
        let mut acc = proj.bias[i];
        for (w, x) in row.iter().zip(llm_vec) {
            acc += w * x;
        }
        out.push(acc + cooc_vec[i]);
    }
    Ok(out)
}

/// Zero-fallback tallies across a fused table build.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FusionCoverage {
    pub items: u64,
    pub missing_id_segment: u64,
    pub missing_item_item_kw_segment: u64,
    pub missing_intra_kw_segment: u64,
    pub missing_llm_vector: u64,
}

/// How items without an LLM vector are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LlmCoverage {
    /// Any catalog id missing from the LLM table fails the build.
    #[default]
    Strict,
    /// Missing LLM vectors are replaced by zeros and counted.
    ZeroFallback,
}

/// Fused vector for every catalog item. Output rows are f32.
pub fn build_table(
    catalog_ids: &[String],
    llm_table: &VectorTable,
    cooc: &CoocEmbeddingSet,
    keyword_map: &KeywordMap,
    proj: &ProjectionParams,
    policy: LlmCoverage,
) -> Result<(VectorTable, FusionCoverage)> {
    if llm_table.dim() != proj.d_llm() && !llm_table.is_empty() {
        return Err(Error::invalid(format!(
            "llm table dim {} does not match projection input {}",
            llm_table.dim(),
            proj.d_llm()
        )));
    }
    if cooc.d_out() != proj.d_out() {
        return Err(Error::invalid(format!(
            "cooc dim {} does not match projection output {}",
            cooc.d_out(),
            proj.d_out()
        )));
    }
    if policy == LlmCoverage::Strict {
        let missing: Vec<String> = catalog_ids
            .iter()
            .filter(|id| !llm_table.contains(id))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingIds {
                context: "llm embedding table".to_string(),
                ids: missing,
            });
        }
    }

    let zero_llm = vec![0.0f64; proj.d_llm()];
    let rows: Vec<(String, Vec<f32>, SegmentPresence, bool)> = catalog_ids
        .par_iter()
        .map(|id| {
            let (cooc_vec, presence) = assemble_cooc(id, cooc, keyword_map);
            let (llm_vec, llm_found) = match llm_table.get(id) {
                Some(v) => (v.iter().map(|&x| x as f64).collect::<Vec<f64>>(), true),
                None => (zero_llm.clone(), false),
            };
            let fused = fuse(&llm_vec, &cooc_vec, proj).expect("dims validated above");
            let row: Vec<f32> = fused.iter().map(|&v| v as f32).collect();
            (id.clone(), row, presence, llm_found)
        })
        .collect();

    let mut table = VectorTable::new(proj.d_out());
    let mut coverage = FusionCoverage::default();
    for (id, row, presence, llm_found) in rows {
        coverage.items += 1;
        if !presence.id {
            coverage.missing_id_segment += 1;
        }
        if !presence.item_item_kw {
            coverage.missing_item_item_kw_segment += 1;
        }
        if !presence.intra_kw {
            coverage.missing_intra_kw_segment += 1;
        }
        if !llm_found {
            coverage.missing_llm_vector += 1;
        }
        table.insert(id, row)?;
    }
    Ok((table, coverage))
}

/// Pre-projection co-occurrence vector for every catalog item, stored as f32
/// so it can be persisted once and reused across training runs.
pub fn build_cooc_table(
    catalog_ids: &[String],
    cooc: &CoocEmbeddingSet,
    keyword_map: &KeywordMap,
) -> Result<(VectorTable, FusionCoverage)> {
    let rows: Vec<(String, Vec<f32>, SegmentPresence)> = catalog_ids
        .par_iter()
        .map(|id| {
            let (vec, presence) = assemble_cooc(id, cooc, keyword_map);
            let row: Vec<f32> = vec.iter().map(|&v| v as f32).collect();
            (id.clone(), row, presence)
        })
        .collect();
    let mut table = VectorTable::new(cooc.d_out());
    let mut coverage = FusionCoverage::default();
    for (id, row, presence) in rows {
        coverage.items += 1;
        if !presence.id {
            coverage.missing_id_segment += 1;
        }
        if !presence.item_item_kw {
            coverage.missing_item_item_kw_segment += 1;
        }
        if !presence.intra_kw {
            coverage.missing_intra_kw_segment += 1;
        }
        table.insert(id, row)?;
    }
    Ok((table, coverage))
}

/// Fuse a stored cooc-vector table with LLM vectors under a (typically
/// trained) projection. Items are the cooc table's keys.
pub fn fuse_tables(
    llm_table: &VectorTable,
    cooc_vectors: &VectorTable,
    proj: &ProjectionParams,
    policy: LlmCoverage,
) -> Result<(VectorTable, u64)> {
    if cooc_vectors.dim() != proj.d_out() && !cooc_vectors.is_empty() {
        return Err(Error::invalid(format!(
            "cooc vector dim {} does not match projection output {}",
            cooc_vectors.dim(),
            proj.d_out()
        )));
    }
    if llm_table.dim() != proj.d_llm() && !llm_table.is_empty() {
        return Err(Error::invalid(format!(
            "llm table dim {} does not match projection input {}",
            llm_table.dim(),
            proj.d_llm()
        )));
    }
    if policy == LlmCoverage::Strict {
        let missing: Vec<String> = cooc_vectors
            .ids()
            .filter(|id| !llm_table.contains(id))
            .map(str::to_string)
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingIds {
                context: "llm embedding table".to_string(),
                ids: missing,
            });
        }
    }
    let zero_llm = vec![0.0f64; proj.d_llm()];
    let ids: Vec<&str> = cooc_vectors.ids().collect();
    let rows: Vec<(Vec<f32>, bool)> = ids
        .par_iter()
        .map(|id| {
            let cooc_vec: Vec<f64> = cooc_vectors
                .get(id)
                .expect("id from same table")
                .iter()
                .map(|&v| v as f64)
                .collect();
            let (llm_vec, found) = match llm_table.get(id) {
                Some(v) => (v.iter().map(|&x| x as f64).collect::<Vec<f64>>(), true),
                None => (zero_llm.clone(), false),
            };
            let fused = fuse(&llm_vec, &cooc_vec, proj).expect("dims validated above");
            (fused.iter().map(|&v| v as f32).collect(), found)
        })
        .collect();
    let mut table = VectorTable::new(proj.d_out());
    let mut missing_llm = 0u64;
    for (id, (row, found)) in ids.iter().zip(rows) {
        if !found {
            missing_llm += 1;
        }
        table.insert(*id, row)?;
    }
    Ok((table, missing_llm))
}
