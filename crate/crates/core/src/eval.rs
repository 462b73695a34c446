//! AUC, log loss, and the path-count / path-length click-rate analysis.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use crate::data::Instance;
use crate::pathfinder::{Path, PathSet};
use crate::tensor::binary_cross_entropy;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalError {
    /// AUC needs at least one positive and one negative.
    SingleClass { n_pos: usize, n_neg: usize },
    NonFiniteScore,
    EmptyDataset,
    Misaligned { instances: usize, path_sets: usize },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::SingleClass { n_pos, n_neg } => {
                write!(f, "AUC undefined with {n_pos} positives and {n_neg} negatives")
            }
            EvalError::NonFiniteScore => write!(f, "scores must be finite"),
            EvalError::EmptyDataset => write!(f, "empty dataset"),
            EvalError::Misaligned { instances, path_sets } => {
                write!(f, "{instances} instances but {path_sets} path records")
            }
        }
    }
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half.
///
/// Ranks are handled as doubled integers, so the result is the exact pair
/// count divided by the pair total, rounded once.
pub fn auc(scores: &[(f64, bool)]) -> Result<f64, EvalError> {
    if scores.iter().any(|(s, _)| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore);
    }
    let n_pos = scores.iter().filter(|(_, y)| *y).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass { n_pos, n_neg });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].0.total_cmp(&scores[b].0));
    // sum over positives of twice their average 1-based rank
    let mut rank_sum2: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]].0 == scores[order[start]].0 {
            end += 1;
        }
        let positives = order[start..end].iter().filter(|&&i| scores[i].1).count() as u128;
        rank_sum2 += positives * (start as u128 + 1 + end as u128);
        start = end;
    }
    let p = n_pos as u128;
    let wins2 = rank_sum2 - p * (p + 1);
    Ok(wins2 as f64 / (2 * p * n_neg as u128) as f64)
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-12, 1 - 1e-12]`.
pub fn logloss(scores: &[(f64, bool)]) -> f64 {
    let probs: Vec<f64> = scores.iter().map(|s| s.0).collect();
    let labels: Vec<f64> = scores.iter().map(|s| if s.1 { 1.0 } else { 0.0 }).collect();
    binary_cross_entropy(&probs, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub auc: Option<f64>,
    pub logloss: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

pub fn evaluate(scores: &[(f64, bool)]) -> Result<EvalReport, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let n_pos = scores.iter().filter(|s| s.1).count();
    let auc = match auc(scores) {
        Ok(a) => Some(a),
        Err(EvalError::SingleClass { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport { auc, logloss: logloss(scores), n_pos, n_neg: scores.len() - n_pos })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bucket {
    pub key: usize,
    pub instances: usize,
    pub clicks: usize,
    pub click_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphPathStats {
    /// Keyed by the number of paths an instance has.
    pub by_count: Vec<Bucket>,
    /// Keyed by the instance's mean path token length, rounded; instances
    /// without paths fall in bucket 0.
    pub by_length: Vec<Bucket>,
    /// Spearman correlation of bucket key against click rate, when at least
    /// two buckets exist and neither side is constant.
    pub count_spearman: Option<f64>,
    pub length_spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathStatsReport {
    pub cf: GraphPathStats,
    pub kg: GraphPathStats,
}

fn buckets(keys: impl Iterator<Item = (usize, bool)>) -> Vec<Bucket> {
    let mut map: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (k, label) in keys {
        let e = map.entry(k).or_default();
        e.0 += 1;
        e.1 += usize::from(label);
    }
    map.into_iter()
        .map(|(key, (instances, clicks))| Bucket { key, instances, clicks, click_rate: clicks as f64 / instances as f64 })
        .collect()
}

fn mean_length_key(paths: &[Path]) -> usize {
    if paths.is_empty() {
        return 0;
    }
    let total: usize = paths.iter().map(Path::len).sum();
    libm::round(total as f64 / paths.len() as f64) as usize
}

fn graph_stats(instances: &[Instance], sets: &[&[Path]]) -> GraphPathStats {
    let by_count = buckets(instances.iter().zip(sets).map(|(i, p)| (p.len(), i.label)));
    let by_length = buckets(instances.iter().zip(sets).map(|(i, p)| (mean_length_key(p), i.label)));
    let corr = |b: &[Bucket]| {
        let xs: Vec<f64> = b.iter().map(|b| b.key as f64).collect();
        let ys: Vec<f64> = b.iter().map(|b| b.click_rate).collect();
        spearman(&xs, &ys)
    };
    GraphPathStats { count_spearman: corr(&by_count), length_spearman: corr(&by_length), by_count, by_length }
}

pub fn path_validity_analysis(instances: &[Instance], path_sets: &[PathSet]) -> Result<PathStatsReport, EvalError> {
    if instances.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if instances.len() != path_sets.len() {
        return Err(EvalError::Misaligned { instances: instances.len(), path_sets: path_sets.len() });
    }
    let cf: Vec<&[Path]> = path_sets.iter().map(|p| p.cf.as_slice()).collect();
    let kg: Vec<&[Path]> = path_sets.iter().map(|p| p.kg.as_slice()).collect();
    Ok(PathStatsReport { cf: graph_stats(instances, &cf), kg: graph_stats(instances, &kg) })
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = alloc::vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        let r = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

/// Pearson correlation of average ranks. `None` for fewer than two points or
/// a constant input.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / libm::sqrt(sxx * syy))
}
