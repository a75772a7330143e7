//! Extractive summarization baseline: PageRank over a sentence-similarity
//! graph with embedding-cosine edge weights.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::tokenizer::tokenize;

#[derive(Debug, Error)]
pub enum TextRankError {
    #[error("cannot read embeddings {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("embeddings {path}:{line}: {message}")]
    BadEmbedding {
        path: String,
        line: usize,
        message: String,
    },
    #[error("similarity matrix contains a non-finite entry")]
    NonFiniteSimilarity,
}

pub const DEFAULT_DAMPING: f64 = 0.85;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 200;
pub const DEFAULT_SUMMARY_SENTENCES: usize = 3;

/// Word vectors of one fixed dimension. Out-of-vocabulary words map to the
/// fallback vector.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    fallback: Vec<f64>,
    hash_seeded: bool,
}

impl EmbeddingTable {
    /// Text format: one `word v1 v2 .. vd` line per word.
    pub fn from_file(path: &Path) -> Result<Self, TextRankError> {
        let display = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| TextRankError::Io {
            path: display.clone(),
            source,
        })?;
        let mut vectors = HashMap::new();
        let mut dim = 0usize;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let word = parts.next().unwrap().to_string();
            let vec: Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
            let vec = vec.map_err(|e| TextRankError::BadEmbedding {
                path: display.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if dim == 0 {
                dim = vec.len();
            }
            if vec.is_empty() || vec.len() != dim {
                return Err(TextRankError::BadEmbedding {
                    path: display.clone(),
                    line: i + 1,
                    message: format!("expected {dim} floats, got {}", vec.len()),
                });
            }
            vectors.insert(word, vec);
        }
        Ok(EmbeddingTable {
            dim,
            vectors,
            fallback: vec![0.0; dim],
            hash_seeded: false,
        })
    }

    /// Dependency-free fallback: every word gets a deterministic unit vector
    /// seeded from its FNV-1a hash. Weaker than trained embeddings but keeps
    /// the baseline runnable without any files.
    pub fn hash_seeded(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            vectors: HashMap::new(),
            fallback: vec![0.0; dim],
            hash_seeded: true,
        }
    }

    /// Explicit table, used by tests and callers with custom vectors.
    pub fn from_vectors(dim: usize, vectors: HashMap<String, Vec<f64>>) -> Self {
        EmbeddingTable {
            dim,
            vectors,
            fallback: vec![0.0; dim],
            hash_seeded: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn lookup(&self, word: &str) -> Vec<f64> {
        if let Some(v) = self.vectors.get(word) {
            return v.clone();
        }
        if self.hash_seeded {
            return hash_unit_vector(word, self.dim);
        }
        self.fallback.clone()
    }

    fn mean_vector(&self, tokens: &[String]) -> Option<Vec<f64>> {
        if tokens.is_empty() {
            return None;
        }
        let mut acc = vec![0.0; self.dim];
        for t in tokens {
            for (a, v) in acc.iter_mut().zip(self.lookup(t)) {
                *a += v;
            }
        }
        let n = tokens.len() as f64;
        for a in &mut acc {
            *a /= n;
        }
        Some(acc)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn hash_unit_vector(word: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(fnv1a(word.as_bytes()));
    let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Cosine similarity of mean word vectors, clamped to `[0, 1]`. Either
/// sentence empty (or zero-norm) scores 0.
pub fn sentence_similarity(a: &[String], b: &[String], emb: &EmbeddingTable) -> f64 {
    let (va, vb) = match (emb.mean_vector(a), emb.mean_vector(b)) {
        (Some(va), Some(vb)) => (va, vb),
        _ => return 0.0,
    };
    let dot: f64 = va.iter().zip(&vb).map(|(x, y)| x * y).sum();
    let na = va.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(0.0, 1.0)
}

/// Sentences, their pairwise similarities (symmetric, zero diagonal), and
/// rank scores once [`rank`] has run.
#[derive(Debug, Clone)]
pub struct SentenceGraph {
    pub sentences: Vec<Vec<String>>,
    /// Row-major `n x n`.
    pub similarity: Vec<f64>,
    pub scores: Vec<f64>,
}

impl SentenceGraph {
    pub fn build(sentences: Vec<Vec<String>>, emb: &EmbeddingTable) -> Self {
        let n = sentences.len();
        let mut similarity = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let s = sentence_similarity(&sentences[i], &sentences[j], emb);
                similarity[i * n + j] = s;
                similarity[j * n + i] = s;
            }
        }
        SentenceGraph {
            sentences,
            similarity,
            scores: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RankOutcome {
    pub iterations: usize,
    pub converged: bool,
}

/// Weighted PageRank: `score_i <- (1 - d) + d * sum_j sim_ji / rowsum_j *
/// score_j`. A row with zero total similarity distributes its score
/// uniformly over all vertices. Iterates until the max score change drops
/// below `tol` or `max_iter` is reached.
pub fn rank(
    graph: &mut SentenceGraph,
    damping: f64,
    tol: f64,
    max_iter: usize,
) -> Result<RankOutcome, TextRankError> {
    let n = graph.len();
    if graph.similarity.iter().any(|v| !v.is_finite()) {
        return Err(TextRankError::NonFiniteSimilarity);
    }
    if n == 0 {
        graph.scores = Vec::new();
        return Ok(RankOutcome {
            iterations: 0,
            converged: true,
        });
    }
    let row_sums: Vec<f64> = (0..n)
        .map(|j| graph.similarity[j * n..(j + 1) * n].iter().sum())
        .collect();
    let mut scores = vec![1.0; n];
    let mut next = vec![0.0; n];
    for iter in 1..=max_iter {
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                let w = if row_sums[j] > 0.0 {
                    graph.similarity[j * n + i] / row_sums[j]
                } else {
                    1.0 / n as f64
                };
                acc += w * scores[j];
            }
            next[i] = (1.0 - damping) + damping * acc;
        }
        let delta = scores
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        scores.copy_from_slice(&next);
        if delta < tol {
            graph.scores = scores;
            return Ok(RankOutcome {
                iterations: iter,
                converged: true,
            });
        }
    }
    graph.scores = scores;
    Ok(RankOutcome {
        iterations: max_iter,
        converged: false,
    })
}

/// Sentence splitting on `. ! ?` followed by whitespace (or end of text).
/// Fragments under three tokens are merged into the following sentence; a
/// short trailing fragment joins the previous one.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut raw = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if matches!(c, '.' | '!' | '?') && (i + 1 == chars.len() || chars[i + 1].is_whitespace())
        {
            let s: String = chars[start..=i].iter().collect();
            let s = s.trim().to_string();
            if !s.is_empty() {
                raw.push(s);
            }
            start = i + 1;
        }
        i += 1;
    }
    let tail: String = chars[start.min(chars.len())..].iter().collect();
    let tail = tail.trim().to_string();
    if !tail.is_empty() {
        raw.push(tail);
    }

    // merge short fragments forward
    let mut merged: Vec<String> = Vec::new();
    let mut pending = String::new();
    for s in raw {
        let candidate = if pending.is_empty() {
            s
        } else {
            format!("{pending} {s}")
        };
        if tokenize(&candidate).len() >= 3 {
            merged.push(candidate);
            pending = String::new();
        } else {
            pending = candidate;
        }
    }
    if !pending.is_empty() {
        if let Some(last) = merged.last_mut() {
            last.push(' ');
            last.push_str(&pending);
        } else {
            merged.push(pending);
        }
    }
    merged
}

/// Top-`k` sentences by rank score (ties broken by earlier position),
/// re-emitted in document order.
pub fn extract_summary(
    document: &str,
    k: usize,
    emb: &EmbeddingTable,
    damping: f64,
) -> Result<String, TextRankError> {
    let (summary, _) = extract_summary_with_outcome(document, k, emb, damping)?;
    Ok(summary)
}

pub fn extract_summary_with_outcome(
    document: &str,
    k: usize,
    emb: &EmbeddingTable,
    damping: f64,
) -> Result<(String, RankOutcome), TextRankError> {
    let sentence_texts = split_sentences(document);
    if sentence_texts.is_empty() {
        return Ok((
            String::new(),
            RankOutcome {
                iterations: 0,
                converged: true,
            },
        ));
    }
    let tokenized: Vec<Vec<String>> = sentence_texts.iter().map(|s| tokenize(s)).collect();
    let mut graph = SentenceGraph::build(tokenized, emb);
    let outcome = rank(&mut graph, damping, DEFAULT_TOL, DEFAULT_MAX_ITER)?;

    let mut order: Vec<usize> = (0..graph.len()).collect();
    order.sort_by(|&a, &b| {
        graph.scores[b]
            .partial_cmp(&graph.scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = order.into_iter().take(k).collect();
    picked.sort_unstable();
    let summary = picked
        .into_iter()
        .map(|i| sentence_texts[i].as_str())
        .collect::<Vec<_>>()
        .join(" ");
    Ok((summary, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn similarity_identity_empty_orthogonal() {
        let emb = EmbeddingTable::hash_seeded(16);
        let s = toks("the cat sat");
        assert!((sentence_similarity(&s, &s, &emb) - 1.0).abs() < 1e-9);
        assert_eq!(sentence_similarity(&s, &[], &emb), 0.0);

        let mut vectors = HashMap::new();
        vectors.insert("x".to_string(), vec![1.0, 0.0]);
        vectors.insert("y".to_string(), vec![0.0, 1.0]);
        let emb = EmbeddingTable::from_vectors(2, vectors);
        assert_eq!(sentence_similarity(&toks("x"), &toks("y"), &emb), 0.0);
    }

    #[test]
    fn negative_cosine_clamps_to_zero() {
        let mut vectors = HashMap::new();
        vectors.insert("x".to_string(), vec![1.0, 0.0]);
        vectors.insert("y".to_string(), vec![-1.0, 0.0]);
        let emb = EmbeddingTable::from_vectors(2, vectors);
        assert_eq!(sentence_similarity(&toks("x"), &toks("y"), &emb), 0.0);
    }

    #[test]
    fn rank_single_sentence_scores_one() {
        // zero-row uniform rule: the lone vertex feeds itself, fixpoint 1
        let mut g = SentenceGraph {
            sentences: vec![toks("a b c")],
            similarity: vec![0.0],
            scores: Vec::new(),
        };
        let out = rank(&mut g, DEFAULT_DAMPING, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(out.converged);
        assert!((g.scores[0] - 1.0).abs() < 1e-9, "score {}", g.scores[0]);
    }

    #[test]
    fn rank_symmetric_pair_scores_equal() {
        let mut g = SentenceGraph {
            sentences: vec![toks("a b c"), toks("d e f")],
            similarity: vec![0.0, 1.0, 1.0, 0.0],
            scores: Vec::new(),
        };
        rank(&mut g, DEFAULT_DAMPING, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!((g.scores[0] - g.scores[1]).abs() < 1e-9);
    }

    #[test]
    fn rank_line_graph_matches_fixed_point() {
        // closed form for d = 0.85: s1 = s3 = 0.21375 / 0.2775, s2 = 0.15 + 1.7 s1
        let s1 = 0.21375 / 0.2775;
        let s2 = 0.15 + 1.7 * s1;
        let mut g = SentenceGraph {
            sentences: vec![toks("a b c"), toks("d e f"), toks("g h i")],
            similarity: vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
            scores: Vec::new(),
        };
        let out = rank(&mut g, 0.85, 1e-9, 1000).unwrap();
        assert!(out.converged);
        assert!((g.scores[0] - s1).abs() < 1e-6, "{} vs {s1}", g.scores[0]);
        assert!((g.scores[1] - s2).abs() < 1e-6, "{} vs {s2}", g.scores[1]);
        assert!((g.scores[2] - s1).abs() < 1e-6);
        assert!(g.scores[1] > g.scores[0]);
    }

    #[test]
    fn rank_rejects_non_finite() {
        let mut g = SentenceGraph {
            sentences: vec![toks("a b c"), toks("d e f")],
            similarity: vec![0.0, f64::NAN, f64::NAN, 0.0],
            scores: Vec::new(),
        };
        assert!(matches!(
            rank(&mut g, 0.85, 1e-6, 100),
            Err(TextRankError::NonFiniteSimilarity)
        ));
    }

    #[test]
    fn rank_converges_on_random_graphs() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let mut converged = 0;
        for _ in 0..100 {
            let n = rng.random_range(1..=50);
            let mut sim = vec![0.0; n * n];
            for i in 0..n {
                for j in (i + 1)..n {
                    let v: f64 = rng.random_range(0.0..1.0);
                    sim[i * n + j] = v;
                    sim[j * n + i] = v;
                }
            }
            let mut g = SentenceGraph {
                sentences: vec![toks("a b c"); n],
                similarity: sim,
                scores: Vec::new(),
            };
            if rank(&mut g, 0.85, 1e-6, 200).unwrap().converged {
                converged += 1;
            }
        }
        assert!(converged >= 99, "only {converged}/100 converged");
    }

    #[test]
    fn split_sentences_rules() {
        assert_eq!(
            split_sentences("The cat sat. The dog ran! Did it rain?"),
            vec!["The cat sat.", "The dog ran!", "Did it rain?"]
        );
        // short fragment merges forward
        assert_eq!(
            split_sentences("Yes. The cat sat down."),
            vec!["Yes. The cat sat down."]
        );
        // trailing short fragment merges backward
        assert_eq!(
            split_sentences("The cat sat down. No."),
            vec!["The cat sat down. No."]
        );
        assert!(split_sentences("").is_empty());
        // no terminator still yields a sentence
        assert_eq!(
            split_sentences("no punctuation here"),
            vec!["no punctuation here"]
        );
    }

    #[test]
    fn extract_whole_document_when_k_large() {
        let emb = EmbeddingTable::hash_seeded(16);
        let doc = "the cat sat down . the dog ran away . the bird flew home .";
        let summary = extract_summary(doc, 10, &emb, 0.85).unwrap();
        assert_eq!(summary, doc);
    }

    #[test]
    fn extract_identical_sentences_takes_first_k() {
        let emb = EmbeddingTable::hash_seeded(16);
        let doc = "the cat sat one . the cat sat two . the cat sat three .";
        let summary = extract_summary(doc, 2, &emb, 0.85).unwrap();
        assert_eq!(summary, "the cat sat one . the cat sat two .");
    }

    #[test]
    fn extract_line_graph_picks_middle() {
        // embeddings chosen so sim(0,1) = sim(1,2) ~ 0.707 and sim(0,2) = 0
        let mut vectors = HashMap::new();
        vectors.insert("aa".to_string(), vec![1.0, 0.0]);
        vectors.insert("bb".to_string(), vec![1.0, 1.0]);
        vectors.insert("cc".to_string(), vec![0.0, 1.0]);
        let emb = EmbeddingTable::from_vectors(2, vectors);
        let doc = "aa aa aa . bb bb bb . cc cc cc .";
        let summary = extract_summary(doc, 1, &emb, 0.85).unwrap();
        assert_eq!(summary, "bb bb bb .");
    }

    #[test]
    fn extract_empty_document() {
        let emb = EmbeddingTable::hash_seeded(8);
        assert_eq!(extract_summary("", 3, &emb, 0.85).unwrap(), "");
    }

    #[test]
    fn embedding_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        std::fs::write(&path, "cat 1.0 0.0\ndog 0.0 1.0\n").unwrap();
        let emb = EmbeddingTable::from_file(&path).unwrap();
        assert_eq!(emb.dim(), 2);
        assert!((sentence_similarity(&toks("cat"), &toks("cat"), &emb) - 1.0).abs() < 1e-12);

        std::fs::write(&path, "cat 1.0 0.0\ndog 0.0\n").unwrap();
        let err = EmbeddingTable::from_file(&path).unwrap_err();
        assert!(err.to_string().contains(":2"), "{err}");
    }

    #[test]
    fn hash_embeddings_are_deterministic_unit_vectors() {
        let emb = EmbeddingTable::hash_seeded(32);
        let a = emb.lookup("anything");
        let b = emb.lookup("anything");
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn permutation_equivariance(seed in 0u64..500) {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let n = 5;
            let mut sim = vec![0.0; n * n];
            for i in 0..n {
                for j in (i + 1)..n {
                    let v: f64 = rng.random_range(0.0..1.0);
                    sim[i * n + j] = v;
                    sim[j * n + i] = v;
                }
            }
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let mut permuted = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    permuted[perm[i] * n + perm[j]] = sim[i * n + j];
                }
            }
            let sentences = vec![toks("a b c"); n];
            let mut g1 = SentenceGraph { sentences: sentences.clone(), similarity: sim, scores: Vec::new() };
            let mut g2 = SentenceGraph { sentences, similarity: permuted, scores: Vec::new() };
            rank(&mut g1, 0.85, 1e-10, 500).unwrap();
            rank(&mut g2, 0.85, 1e-10, 500).unwrap();
            for i in 0..n {
                prop_assert!((g1.scores[i] - g2.scores[perm[i]]).abs() < 1e-6);
            }
        }

        #[test]
        fn scale_invariance_of_ordering(seed in 0u64..200, scale in 0.05f64..20.0) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let n = 6;
            let mut sim = vec![0.0; n * n];
            for i in 0..n {
                for j in (i + 1)..n {
                    let v: f64 = rng.random_range(0.0..1.0);
                    sim[i * n + j] = v;
                    sim[j * n + i] = v;
                }
            }
            let scaled: Vec<f64> = sim.iter().map(|v| v * scale).collect();
            let sentences = vec![toks("a b c"); n];
            let mut g1 = SentenceGraph { sentences: sentences.clone(), similarity: sim, scores: Vec::new() };
            let mut g2 = SentenceGraph { sentences, similarity: scaled, scores: Vec::new() };
            rank(&mut g1, 0.85, 1e-10, 500).unwrap();
            rank(&mut g2, 0.85, 1e-10, 500).unwrap();
            let order = |scores: &[f64]| {
                let mut idx: Vec<usize> = (0..scores.len()).collect();
                idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
                idx
            };
            prop_assert_eq!(order(&g1.scores), order(&g2.scores));
        }
    }
}
