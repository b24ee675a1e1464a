//! Empirical likelihood of cluster quality given mean score, and the early
//! split threshold derived from it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hac::Dendrogram;
use crate::model::MaskRecord;

pub const DEFAULT_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodBin {
    pub lower: f64,
    pub upper: f64,
    pub support: u64,
    pub high: u64,
    pub low: u64,
    /// `None` when the bin is empty.
    pub p_high: Option<f64>,
    pub p_low: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodTable {
    pub k_a: f64,
    pub k_iou: f64,
    pub bins: Vec<LikelihoodBin>,
}

impl LikelihoodTable {
    pub fn total_support(&self) -> u64 {
        self.bins.iter().map(|b| b.support).sum()
    }

    pub fn bin_index(&self, score: f64) -> usize {
        bin_index(score, self.bins.len())
    }

    /// Builds a table from raw per-bin counts `(support, high, low)`.
    pub fn from_counts(k_a: f64, k_iou: f64, counts: &[(u64, u64, u64)]) -> Self {
        let n = counts.len();
        let bins = counts
            .iter()
            .enumerate()
            .map(|(i, &(support, high, low))| LikelihoodBin {
                lower: i as f64 / n as f64,
                upper: (i + 1) as f64 / n as f64,
                support,
                high,
                low,
                p_high: (support > 0).then(|| high as f64 / support as f64),
                p_low: (support > 0).then(|| low as f64 / support as f64),
            })
            .collect();
        Self { k_a, k_iou, bins }
    }
}

fn bin_index(score: f64, bins: usize) -> usize {
    ((score * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// Bins every node of every tree by its mean score and counts how many are
/// high quality (`Q >= k_a`) and low quality (`Q <= 1 - k_a`).
pub fn learn_likelihoods(
    trees: &[Dendrogram],
    masks: &[MaskRecord],
    k_iou: f64,
    k_a: f64,
    bins: usize,
) -> Result<LikelihoodTable> {
    if bins == 0 {
        return Err(Error::Config("need at least one bin".into()));
    }
    let mut counts = vec![(0u64, 0u64, 0u64); bins];
    for tree in trees {
        let leaves = tree.align_masks(masks)?;
        let mut correct: Vec<u64> = Vec::with_capacity(tree.nodes().len());
        for m in &leaves {
            let ok = m.is_correct(k_iou).ok_or_else(|| Error::MissingGroundTruth(m.id.clone()))?;
            correct.push(ok as u64);
        }
        for node in tree.nodes() {
            if let Some((l, r)) = node.children {
                correct.push(correct[l] + correct[r]);
            }
            let q = correct[node.id] as f64 / node.size as f64;
            let slot = &mut counts[bin_index(node.score, bins)];
            slot.0 += 1;
            if q >= k_a {
                slot.1 += 1;
            }
            if q <= 1.0 - k_a {
                slot.2 += 1;
            }
        }
    }
    Ok(LikelihoodTable::from_counts(k_a, k_iou, &counts))
}

/// Largest bin edge `t` at which the pooled share of high-quality clusters
/// with score below `t` is at most `epsilon`. `0` disables early splitting.
pub fn derive_kpa(table: &LikelihoodTable, epsilon: f64) -> f64 {
    let n = table.bins.len();
    let mut support = vec![0u64; n + 1];
    let mut high = vec![0u64; n + 1];
    for (i, b) in table.bins.iter().enumerate() {
        support[i + 1] = support[i] + b.support;
        high[i + 1] = high[i] + b.high;
    }
    for edge in (1..=n).rev() {
        let ok = support[edge] == 0 || (high[edge] as f64) <= epsilon * support[edge] as f64;
        if ok {
            return edge as f64 / n as f64;
        }
    }
    0.0
}

/// Pooled empirical `P(Q >= k_a | S < t)`; `None` when no cluster lies below `t`.
pub fn pooled_high_below(table: &LikelihoodTable, t: f64) -> Option<f64> {
    let (support, high) = table
        .bins
        .iter()
        .filter(|b| b.upper <= t + 1e-12)
        .fold((0u64, 0u64), |acc, b| (acc.0 + b.support, acc.1 + b.high));
    (support > 0).then(|| high as f64 / support as f64)
}
