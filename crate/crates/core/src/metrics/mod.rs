//! Neutral-vs-variant list similarity, per-group means, disparity statistics
//! and the personality-aware fairness score.

mod table;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BaseMetric, PragNormalization, RankedList};

pub use table::{
    compute_context_report, compute_fairness_table, CellMetric, ExclusionCounts, FairnessCell, FairnessReport, MatrixDesign,
    ShortfallStats, SimilarityMeta, SimilarityRow, SimilarityTable,
};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("PRAG* needs k ≥ 2, got {0}")]
    KTooSmall(usize),
    #[error("cannot average an empty group")]
    EmptyGroup,
    #[error("disparity needs ≥ 2 groups, got {0}")]
    TooFewGroups(usize),
    #[error("no {metric} similarities for {attribute} = {value}")]
    MissingCoverage {
        attribute: String,
        value: String,
        metric: String,
    },
    #[error("similarity table: {0}")]
    Table(String),
}

/// `|A ∩ B| / |A ∪ B|`; two empty lists score 1.0.
pub fn jaccard_at_k(neutral: &RankedList, variant: &RankedList) -> f64 {
    if neutral.is_empty() && variant.is_empty() {
        return 1.0;
    }
    let mut a: Vec<&str> = neutral.canonical().collect();
    let mut b: Vec<&str> = variant.canonical().collect();
    a.sort_unstable();
    b.sort_unstable();
    let (mut i, mut j, mut common) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                common += 1;
                i += 1;
                j += 1;
            }
        }
    }
    common as f64 / (a.len() + b.len() - common) as f64
}

/// Overlap weighted by the item's rank in the variant list, normalized by
/// `k(k+1)/2`. Ranks beyond `k` contribute nothing.
pub fn serp_star_at_k(neutral: &RankedList, variant: &RankedList, k: usize) -> f64 {
    let present: std::collections::HashSet<&str> = neutral.canonical().collect();
    let weight: usize = variant
        .canonical()
        .enumerate()
        .filter(|(_, v)| present.contains(v))
        .map(|(i, _)| k.saturating_sub(i))
        .sum();
    weight as f64 / (k * (k + 1)) as f64 * 2.0
}

/// Ordered variant pairs `(v1, v2)` that agree in both lists, with `v1`
/// required in the neutral list. Items missing from the neutral list rank
/// after every neutral item.
pub fn prag_star_at_k(
    neutral: &RankedList,
    variant: &RankedList,
    k: usize,
    normalization: PragNormalization,
) -> Result<f64, MetricError> {
    if k < 2 {
        return Err(MetricError::KTooSmall(k));
    }
    let neutral_rank: HashMap<&str, usize> = neutral.canonical().enumerate().map(|(i, c)| (c, i)).collect();
    // Walk the variant list from the bottom, keeping the neutral ranks of the
    // items already passed sorted; each neutral-present item then pairs with
    // every later item ranked after it in the neutral list.
    let mut below: Vec<usize> = Vec::with_capacity(variant.len());
    let mut pairs = 0usize;
    for item in variant.canonical().collect::<Vec<_>>().into_iter().rev() {
        let rank = neutral_rank.get(item).copied().unwrap_or(usize::MAX);
        if rank != usize::MAX {
            pairs += below.len() - below.partition_point(|&r| r <= rank);
        }
        let at = below.partition_point(|&r| r < rank);
        below.insert(at, rank);
    }
    let denominator = match normalization {
        PragNormalization::TableConsistent => (k * (k + 1)) as f64 / 2.0,
        PragNormalization::PrintedEq6 => (k * (k + 1)) as f64,
    };
    Ok(pairs as f64 / denominator)
}

/// Dispatches to the requested base metric.
pub fn similarity(
    metric: BaseMetric,
    neutral: &RankedList,
    variant: &RankedList,
    k: usize,
    normalization: PragNormalization,
) -> Result<f64, MetricError> {
    match metric {
        BaseMetric::Jaccard => Ok(jaccard_at_k(neutral, variant)),
        BaseMetric::SerpStar => Ok(serp_star_at_k(neutral, variant, k)),
        BaseMetric::PragStar => prag_star_at_k(neutral, variant, k, normalization),
    }
}

/// Mean similarity of one attribute value (or trait) under one base metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSimilarity {
    pub attribute: String,
    pub value: String,
    pub base_metric: BaseMetric,
    pub mean: f64,
    pub n: usize,
}

/// Arithmetic mean of a group's similarity values.
pub fn mean_similarity(
    attribute: impl Into<String>,
    value: impl Into<String>,
    base_metric: BaseMetric,
    values: &[f64],
) -> Result<GroupSimilarity, MetricError> {
    if values.is_empty() {
        return Err(MetricError::EmptyGroup);
    }
    Ok(GroupSimilarity {
        attribute: attribute.into(),
        value: value.into(),
        base_metric,
        mean: values.iter().sum::<f64>() / values.len() as f64,
        n: values.len(),
    })
}

/// Range of group means: `max − min`.
pub fn snsr(means: &[f64]) -> Result<f64, MetricError> {
    if means.len() < 2 {
        return Err(MetricError::TooFewGroups(means.len()));
    }
    let max = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = means.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

/// Population standard deviation of group means.
pub fn snsv(means: &[f64]) -> Result<f64, MetricError> {
    if means.len() < 2 {
        return Err(MetricError::TooFewGroups(means.len()));
    }
    if means.iter().all(|&m| m == means[0]) {
        return Ok(0.0);
    }
    let n = means.len() as f64;
    let grand = means.iter().sum::<f64>() / n;
    let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt())
}

/// `1 − mean |sim(p) − mean(sim)|` over personality-conditioned prompts.
pub fn pafs(sims: &[f64]) -> Result<f64, MetricError> {
    if sims.is_empty() {
        return Err(MetricError::EmptyGroup);
    }
    if sims.iter().all(|&s| s == sims[0]) {
        return Ok(1.0);
    }
    let n = sims.len() as f64;
    let mean = sims.iter().sum::<f64>() / n;
    let mad = sims.iter().map(|s| (s - mean).abs()).sum::<f64>() / n;
    Ok(1.0 - mad)
}
