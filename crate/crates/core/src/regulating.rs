//! Stage 2: compound risk, threshold derivation, three-regime routing,
//! branch counts and consensus selection among branch outputs.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::sensing::{cluster_embeddings, cosine};
use crate::types::{Mode, Verdict};

pub const FALLBACK_HIGH: f64 = 0.7;
pub const FALLBACK_LOW: f64 = 0.3;
/// History length below which the fixed thresholds apply.
pub const MIN_HISTORY: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdSource {
    Adaptive,
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingThresholds {
    pub high: f64,
    pub low: f64,
    pub source: ThresholdSource,
}

impl RoutingThresholds {
    pub const FALLBACK: RoutingThresholds = RoutingThresholds {
        high: FALLBACK_HIGH,
        low: FALLBACK_LOW,
        source: ThresholdSource::Fallback,
    };
}

/// Worst slot plus the mean over slots above `tau_slot`:
/// `alpha * max + (1 - alpha) * mean(H)`, the mean term being 0 when no slot
/// exceeds the threshold.
pub fn slot_risk(slot_us: &[f64], alpha: f64, tau_slot: f64) -> f64 {
    if slot_us.is_empty() {
        return 0.0;
    }
    let max = slot_us.iter().copied().fold(0.0, f64::max);
    let high: Vec<f64> = slot_us.iter().copied().filter(|&u| u > tau_slot).collect();
    let mean_high = if high.is_empty() {
        0.0
    } else {
        high.iter().sum::<f64>() / high.len() as f64
    };
    alpha * max + (1.0 - alpha) * mean_high
}

pub fn compound_risk(propagated: f64, slot_us: &[f64], alpha: f64, tau_slot: f64) -> f64 {
    propagated.max(slot_risk(slot_us, alpha, tau_slot))
}

/// Linear-interpolation quantile of sorted data (the "type 7" estimator).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `high = Q3`, `low = Q1 - 0.5 * IQR` over the running confidences, or the
/// fixed `(0.7, 0.3)` for short histories.
pub fn adaptive_thresholds(history: &[f64]) -> RoutingThresholds {
    if history.len() < MIN_HISTORY {
        return RoutingThresholds::FALLBACK;
    }
    let mut sorted = history.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let low = (q1 - 0.5 * (q3 - q1)).max(0.0).min(q3);
    RoutingThresholds {
        high: q3,
        low,
        source: ThresholdSource::Adaptive,
    }
}

pub fn route(confidence: f64, thresholds: &RoutingThresholds) -> Mode {
    if confidence > thresholds.high {
        Mode::Direct
    } else if confidence >= thresholds.low {
        Mode::Branch
    } else {
        Mode::Refine
    }
}

/// `clamp(ceil(kappa * (1 - c)), 2, k_max)`.
pub fn branch_count(confidence: f64, kappa: f64, k_max: usize) -> usize {
    let raw = (kappa * (1.0 - confidence)).ceil();
    let raw = if raw.is_finite() && raw > 0.0 { raw as usize } else { 0 };
    raw.clamp(2, k_max.max(2))
}

/// Mean pairwise cosine clamped to `[0, 1]`; a singleton is fully cohesive.
pub fn cohesion(embeddings: &[&[f64]]) -> f64 {
    let n = embeddings.len();
    if n < 2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += cosine(embeddings[i], embeddings[j]);
            pairs += 1;
        }
    }
    (sum / pairs as f64).clamp(0.0, 1.0)
}

/// Member with the largest similarity sum to the others; lowest index wins
/// ties.
pub fn medoid(embeddings: &[&[f64]]) -> usize {
    let mut best = 0;
    let mut best_sum = f64::NEG_INFINITY;
    for i in 0..embeddings.len() {
        let s: f64 = (0..embeddings.len())
            .filter(|&j| j != i)
            .map(|j| cosine(embeddings[i], embeddings[j]))
            .sum();
        if s > best_sum {
            best = i;
            best_sum = s;
        }
    }
    best
}

/// `eta * valid + (1 - eta) * cohesion + ln(size)`.
pub fn score_cluster(valid_fraction: f64, cohesion: f64, size: usize, eta: f64) -> f64 {
    eta * valid_fraction + (1.0 - eta) * cohesion + (size.max(1) as f64).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CandidateOrigin {
    Primary,
    Alternative,
    Conservative,
    Extra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchCandidate {
    pub text: String,
    pub embedding: Vec<f64>,
    pub verifier_outcome: Verdict,
    pub origin: CandidateOrigin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Consensus {
    Selected {
        text: String,
        /// Index into the candidate list of the winning medoid.
        index: usize,
        cluster_id: usize,
        score: f64,
        verdict: Verdict,
    },
    Escalate,
}

/// Clusters the candidates, scores every cluster holding at least one
/// passing member, and returns the medoid of the best one. Ties go to the
/// larger cluster, then to the lower medoid index.
pub fn consensus_select(candidates: &[BranchCandidate], threshold: f64, eta: f64) -> Result<Consensus> {
    if candidates.is_empty() {
        return Ok(Consensus::Escalate);
    }
    let embeddings: Vec<Vec<f64>> = candidates.iter().map(|c| c.embedding.clone()).collect();
    let clusters = cluster_embeddings(&embeddings, threshold)?;
    let mut best: Option<(f64, usize, usize, usize)> = None; // (score, size, medoid, cluster)
    for (cid, members) in clusters.iter().enumerate() {
        let passing = members
            .iter()
            .filter(|&&i| candidates[i].verifier_outcome == Verdict::Pass)
            .count();
        if passing == 0 {
            continue;
        }
        let member_embeddings: Vec<&[f64]> = members.iter().map(|&i| embeddings[i].as_slice()).collect();
        let coh = cohesion(&member_embeddings);
        let m = members[medoid(&member_embeddings)];
        let score = score_cluster(passing as f64 / members.len() as f64, coh, members.len(), eta);
        let better = match best {
            None => true,
            Some((s, size, med, _)) => {
                score > s || (score == s && (members.len() > size || (members.len() == size && m < med)))
            }
        };
        if better {
            best = Some((score, members.len(), m, cid));
        }
    }
    Ok(match best {
        None => Consensus::Escalate,
        Some((score, _, index, cluster_id)) => Consensus::Selected {
            text: candidates[index].text.clone(),
            index,
            cluster_id,
            score,
            verdict: candidates[index].verifier_outcome,
        },
    })
}
