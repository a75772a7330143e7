//! Exact ROUGE-1 / ROUGE-2 / ROUGE-L scoring.
//!
//! Serves double duty as the evaluation metric and the reinforcement-learning
//! reward. Texts are normalized with [`crate::tokenizer::tokenize`] so the
//! reward and the reported metric always see the same token stream.

use std::collections::HashMap;
use std::io::{self, Write};

use thiserror::Error;

use crate::tokenizer::tokenize;

#[derive(Debug, Error)]
pub enum RougeError {
    #[error("reward weights must sum to 1, got {sum}")]
    BadWeights { sum: f64 },
    #[error("corpus_eval requires a non-empty pair list")]
    EmptyCorpus,
}

/// Precision/recall/F1 triple for one ROUGE variant.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_counts(overlap: usize, cand_total: usize, ref_total: usize) -> Self {
        if cand_total == 0 || ref_total == 0 {
            return RougeScore::default();
        }
        let precision = overlap as f64 / cand_total as f64;
        let recall = overlap as f64 / ref_total as f64;
        RougeScore {
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Scores for all three variants of one candidate/reference pair.
#[derive(Debug, Clone, Copy, Default)]
pub struct RougeSet {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
}

/// Clipped n-gram overlap. Empty n-gram sets on either side score zero.
pub fn rouge_n(candidate: &[String], reference: &[String], n: usize) -> RougeScore {
    assert!(n >= 1, "rouge_n requires n >= 1");
    let cand = ngram_counts(candidate, n);
    let reff = ngram_counts(reference, n);
    let cand_total = candidate.len().saturating_sub(n - 1);
    let ref_total = reference.len().saturating_sub(n - 1);
    let overlap: usize = cand
        .iter()
        .map(|(gram, &c)| c.min(reff.get(gram).copied().unwrap_or(0)))
        .sum();
    RougeScore::from_counts(overlap, cand_total, ref_total)
}

fn ngram_counts<'a>(tokens: &'a [String], n: usize) -> HashMap<&'a [String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Longest-common-subsequence F1 over the whole token streams.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> RougeScore {
    let lcs = lcs_length(candidate, reference);
    RougeScore::from_counts(lcs, candidate.len(), reference.len())
}

pub fn lcs_length(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// All three variants after tokenizer normalization.
pub fn score_pair(candidate: &str, reference: &str) -> RougeSet {
    let cand = tokenize(candidate);
    let reff = tokenize(reference);
    RougeSet {
        rouge1: rouge_n(&cand, &reff, 1),
        rouge2: rouge_n(&cand, &reff, 2),
        rouge_l: rouge_l(&cand, &reff),
    }
}

/// Nonnegative per-variant F1 weights that must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardWeights {
    pub w1: f64,
    pub w2: f64,
    pub wl: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            w1: 0.4,
            w2: 0.3,
            wl: 0.3,
        }
    }
}

impl RewardWeights {
    pub fn new(w1: f64, w2: f64, wl: f64) -> Result<Self, RougeError> {
        let sum = w1 + w2 + wl;
        if (sum - 1.0).abs() > 1e-9 || w1 < 0.0 || w2 < 0.0 || wl < 0.0 {
            return Err(RougeError::BadWeights { sum });
        }
        Ok(RewardWeights { w1, w2, wl })
    }
}

/// Weighted ROUGE F1 in `[0, 1]`; the episode reward.
pub fn reward(candidate: &str, reference: &str, weights: RewardWeights) -> f64 {
    let set = score_pair(candidate, reference);
    weights.w1 * set.rouge1.f1 + weights.w2 * set.rouge2.f1 + weights.wl * set.rouge_l.f1
}

/// Unweighted per-variant means over a pair list.
#[derive(Debug, Clone, Copy, Default)]
pub struct CorpusRouge {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
    pub num_pairs: usize,
}

pub fn corpus_eval<S: AsRef<str>>(pairs: &[(S, S)]) -> Result<CorpusRouge, RougeError> {
    if pairs.is_empty() {
        return Err(RougeError::EmptyCorpus);
    }
    let mut acc = CorpusRouge {
        num_pairs: pairs.len(),
        ..CorpusRouge::default()
    };
    for (cand, reff) in pairs {
        let set = score_pair(cand.as_ref(), reff.as_ref());
        add_assign(&mut acc.rouge1, set.rouge1);
        add_assign(&mut acc.rouge2, set.rouge2);
        add_assign(&mut acc.rouge_l, set.rouge_l);
    }
    let n = pairs.len() as f64;
    for s in [&mut acc.rouge1, &mut acc.rouge2, &mut acc.rouge_l] {
        s.precision /= n;
        s.recall /= n;
        s.f1 /= n;
    }
    Ok(acc)
}

fn add_assign(acc: &mut RougeScore, s: RougeScore) {
    acc.precision += s.precision;
    acc.recall += s.recall;
    acc.f1 += s.f1;
}

/// Results file: one `rouge{1,2,L} P R F1` line per variant (4 decimals),
/// then a `mean_reward` line.
pub fn write_results(w: &mut impl Write, scores: &CorpusRouge, mean_reward: f64) -> io::Result<()> {
    for (name, s) in [
        ("rouge1", scores.rouge1),
        ("rouge2", scores.rouge2),
        ("rougeL", scores.rouge_l),
    ] {
        writeln!(
            w,
            "{name} {:.4} {:.4} {:.4}",
            s.precision, s.recall, s.f1
        )?;
    }
    writeln!(w, "mean_reward {mean_reward:.4}")?;
    Ok(())
}
