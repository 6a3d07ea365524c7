//! Evaluation metrics: accuracy, Recall@k, median rank and corpus BLEU.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::models::SimilarityMatrix;
use crate::{Error, Result};

/// Fraction of positions where prediction equals gold.
pub fn accuracy<P: PartialEq>(predictions: &[P], golds: &[P]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::usage(format!("{} predictions for {} golds", predictions.len(), golds.len())));
    }
    if golds.is_empty() {
        return Err(Error::usage("accuracy of an empty set"));
    }
    let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / golds.len() as f64)
}

fn require_square(m: &SimilarityMatrix) -> Result<()> {
    if m.rows() != m.cols() || m.rows() == 0 {
        return Err(Error::usage(format!("ranking metrics need a non-empty square matrix, got {}×{}", m.rows(), m.cols())));
    }
    Ok(())
}

/// 1-based rank of candidate `gt` in `row` under descending score; equal
/// scores rank the lower candidate index first.
pub fn rank_of(row: &[f64], gt: usize) -> usize {
    let s = row[gt];
    1 + row.iter().enumerate().filter(|&(j, &x)| x > s || (x == s && j < gt)).count()
}

/// Ground-truth rank of every query; query `i` matches candidate `i`.
pub fn ranks(m: &SimilarityMatrix) -> Result<Vec<usize>> {
    require_square(m)?;
    Ok((0..m.rows()).map(|i| rank_of(m.row(i), i)).collect())
}

/// Fraction of queries whose ground truth ranks within the first `k`.
pub fn recall_at_k(m: &SimilarityMatrix, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::usage("k must be at least 1"));
    }
    let r = ranks(m)?;
    Ok(r.iter().filter(|&&x| x <= k).count() as f64 / r.len() as f64)
}

/// Median ground-truth rank; an even count takes the lower middle.
pub fn median_rank(m: &SimilarityMatrix) -> Result<usize> {
    let mut r = ranks(m)?;
    r.sort_unstable();
    Ok(r[(r.len() - 1) / 2])
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut c = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *c.entry(w).or_insert(0) += 1;
        }
    }
    c
}

/// Corpus-level BLEU-`n` with uniform weights, clipped n-gram counts, the
/// closest-reference brevity penalty and no smoothing.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::usage(format!("BLEU order {n} outside 1..=4")));
    }
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::usage(format!("{} candidates for {} reference sets", candidates.len(), references.len())));
    }
    if references.iter().any(|r| r.is_empty() || r.iter().any(Vec::is_empty)) {
        return Err(Error::usage("empty reference"));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("non-empty references");
        for order in 1..=n {
            let cc = ngram_counts(cand, order);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (g, k) in ngram_counts(r, order) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &cc {
                matched[order - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
            }
            total[order - 1] += cand.len().saturating_sub(order - 1);
        }
    }
    if c_len == 0 || matched.iter().zip(&total).any(|(&m, &t)| m == 0 || t == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched.iter().zip(&total).map(|(&m, &t)| (m as f64 / t as f64).ln()).sum::<f64>() / n as f64;
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    Ok(bp * log_p.exp())
}

/// One metric value as written by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<serde_json::Value>,
}

impl MetricReport {
    pub fn new(metric: &str, value: f64) -> Self {
        MetricReport { metric: metric.to_string(), value, k: None, n: None, run: None }
    }
}
