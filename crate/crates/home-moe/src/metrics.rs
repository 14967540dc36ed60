//! Ranking metrics: AUC via rank-sum, grouped AUC weighted by per-user log
//! counts, and the serving-score fusion of per-task probabilities.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("AUC is undefined on single-class input")]
    SingleClass,
    #[error("labels must be 0 or 1, got {0}")]
    InvalidLabel(f64),
    #[error("scores and labels disagree in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("grouped AUC: no user has both classes")]
    NoRankableUsers,
    #[error("ranking score: no coefficient for task {0}")]
    MissingCoefficient(String),
}

fn check_labels(scores: &[f64], labels: &[f64]) -> Result<(), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    if let Some(bad) = labels.iter().find(|y| **y != 0.0 && **y != 1.0) {
        return Err(MetricsError::InvalidLabel(*bad));
    }
    Ok(())
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Rank-sum (Mann-Whitney) formulation with average
/// ranks over tie groups:
/// `AUC = (R⁺ − P(P+1)/2) / (P·N)`.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64, MetricsError> {
    check_labels(scores, labels)?;
    let positives = labels.iter().filter(|y| **y == 1.0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the average rank.
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1.0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }

    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Grouped AUC: each user's AUC weighted by their log count,
/// `GAUC = Σᵤ wᵤ·AUCᵤ`, `wᵤ = #logsᵤ / Σᵢ #logsᵢ`. Users whose labels are
/// single-class cannot be ranked; they are excluded and their logs leave
/// the weight denominator.
pub fn gauc(scores: &[f64], labels: &[f64], user_ids: &[u64]) -> Result<f64, MetricsError> {
    check_labels(scores, labels)?;
    if user_ids.len() != scores.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), user_ids.len()));
    }
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, u) in user_ids.iter().enumerate() {
        groups.entry(*u).or_default().push(i);
    }

    let mut weighted = 0.0;
    let mut total_logs = 0.0;
    for rows in groups.values() {
        let s: Vec<f64> = rows.iter().map(|&i| scores[i]).collect();
        let l: Vec<f64> = rows.iter().map(|&i| labels[i]).collect();
        match auc(&s, &l) {
            Ok(a) => {
                weighted += rows.len() as f64 * a;
                total_logs += rows.len() as f64;
            }
            Err(MetricsError::SingleClass) => {}
            Err(e) => return Err(e),
        }
    }
    if total_logs == 0.0 {
        return Err(MetricsError::NoRankableUsers);
    }
    Ok(weighted / total_logs)
}

/// Serving-side fusion: `Σ coefficient · ŷ` over the provided tasks.
pub fn ranking_score(
    xtrs: &BTreeMap<String, f64>,
    weights: &BTreeMap<String, f64>,
) -> Result<f64, MetricsError> {
    let mut total = 0.0;
    for (task, prob) in xtrs {
        let w = weights
            .get(task)
            .ok_or_else(|| MetricsError::MissingCoefficient(task.clone()))?;
        total += w * prob;
    }
    Ok(total)
}

/// Brute-force pairwise AUC; the oracle the rank-sum implementation is
/// checked against.
pub fn auc_bruteforce(scores: &[f64], labels: &[f64]) -> Result<f64, MetricsError> {
    check_labels(scores, labels)?;
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, yi) in labels.iter().enumerate() {
        if *yi != 1.0 {
            continue;
        }
        for (j, yj) in labels.iter().enumerate() {
            if *yj != 0.0 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    if pairs == 0.0 {
        return Err(MetricsError::SingleClass);
    }
    Ok(wins / pairs)
}
