//! Ranking metrics over scored impressions: AUC, MRR, nDCG@5, nDCG@10,
//! macro-averaged with equal weight per impression.
//!
//! Tie handling: AUC counts tied (positive, negative) pairs as 0.5; MRR and
//! nDCG break score ties by original candidate index so results are
//! deterministic.

use serde::Serialize;

use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "scores ({}) and labels ({}) differ in length",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::invalid("empty score list"));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("non-finite score {bad}")));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    Ok(())
}

/// Fraction of (positive, negative) pairs ranked correctly, ties worth 0.5.
/// Computed via tie-averaged ranks, which equals the pairwise definition.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::invalid(
            "auc needs at least one positive and one negative",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Average 1-based ranks over runs of equal scores.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let p = positives as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// 1-based ranks under descending score, ties keeping original index order.
/// rank_of[i] is the rank of candidate i.
fn descending_ranks(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut rank_of = vec![0usize; scores.len()];
    for (pos, &idx) in order.iter().enumerate() {
        rank_of[idx] = pos + 1;
    }
    rank_of
}

/// Mean over positives of 1/rank. Positives are visited in ascending
/// candidate index so the sum is reproducible to the bit.
pub fn mrr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    if !labels.contains(&1) {
        return Err(Error::invalid("mrr needs at least one positive"));
    }
    let rank_of = descending_ranks(scores);
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        if label == 1 {
            sum += 1.0 / rank_of[i] as f64;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Binary-gain nDCG at cutoff `k` over the descending-score ranking.
pub fn ndcg_at(scores: &[f64], labels: &[u8], k: usize) -> Result<f64> {
    check_inputs(scores, labels)?;
    if k == 0 {
        return Err(Error::invalid("ndcg cutoff must be at least 1"));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(Error::invalid("ndcg needs at least one positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut dcg = 0.0f64;
    for (pos, &idx) in order.iter().take(k).enumerate() {
        if labels[idx] == 1 {
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let mut idcg = 0.0f64;
    for pos in 0..positives.min(k) {
        idcg += 1.0 / ((pos + 2) as f64).log2();
    }
    Ok(dcg / idcg)
}

/// One impression's metrics. Requires at least one positive and one negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpressionMetrics {
    pub auc: f64,
    pub mrr: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

pub fn impression_metrics(scores: &[f64], labels: &[u8]) -> Result<ImpressionMetrics> {
    Ok(ImpressionMetrics {
        auc: auc(scores, labels)?,
        mrr: mrr(scores, labels)?,
        ndcg5: ndcg_at(scores, labels, 5)?,
        ndcg10: ndcg_at(scores, labels, 10)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub mrr: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub impressions_evaluated: u64,
    pub impressions_skipped: u64,
}

impl MetricsReport {
    /// Aligned text table; column order AUC, MRR, nDCG@5, nDCG@10.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<8} {:<8} {:<8} {:<8}\n",
            "AUC", "MRR", "nDCG@5", "nDCG@10"
        ));
        out.push_str(&format!(
            "{:<8.4} {:<8.4} {:<8.4} {:<8.4}\n",
            self.auc, self.mrr, self.ndcg5, self.ndcg10
        ));
        out.push_str(&format!(
            "impressions evaluated: {}\nimpressions skipped (no positive or no negative): {}\n",
            self.impressions_evaluated, self.impressions_skipped
        ));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Macro-average per-impression metrics. Impressions without a positive or
/// without a negative are skipped and counted. Input order fixes the
/// summation order, so the result is independent of upstream parallelism.
pub fn aggregate<'a, I>(impressions: I) -> Result<MetricsReport>
where
    I: IntoIterator<Item = (&'a [f64], &'a [u8])>,
{
    let mut sums = [0.0f64; 4];
    let mut evaluated = 0u64;
    let mut skipped = 0u64;
    for (scores, labels) in impressions {
        check_inputs(scores, labels)?;
        let positives = labels.iter().filter(|&&l| l == 1).count();
        if positives == 0 || positives == labels.len() {
            skipped += 1;
            continue;
        }
        let m = impression_metrics(scores, labels)?;
        sums[0] += m.auc;
        sums[1] += m.mrr;
        sums[2] += m.ndcg5;
        sums[3] += m.ndcg10;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::invalid("no evaluable impressions"));
    }
    let n = evaluated as f64;
    Ok(MetricsReport {
        auc: sums[0] / n,
        mrr: sums[1] / n,
        ndcg5: sums[2] / n,
        ndcg10: sums[3] / n,
        impressions_evaluated: evaluated,
        impressions_skipped: skipped,
    })
}
