//! Corpus ingestion and a synthetic article/summary generator.
//!
//! The interchange format is JSON lines: `{"id": .., "article": ..,
//! "summary": ..}`. The synthetic generator builds articles from a small
//! subject/verb/object grammar plus random-token noise sentences, so there is
//! a known ground truth for which tokens are redundant; that is what the
//! mask policy is supposed to discover.

use std::collections::HashSet;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::tokenize;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: malformed example: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate example id {id}")]
    DuplicateId {
        path: String,
        line: usize,
        id: String,
    },
    #[error("{path}:{line}: article must be non-empty (id {id})")]
    EmptyArticle {
        path: String,
        line: usize,
        id: String,
    },
    #[error("vocab size {vocab_size} too small for the grammar (needs at least {needed})")]
    VocabTooSmall { vocab_size: usize, needed: usize },
    #[error("salient count {salient} exceeds article sentence minimum {sentences_min}")]
    TooManySalient { salient: usize, sentences_min: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub article: String,
    pub summary: String,
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Example>, CorpusError> {
    let display = path.display().to_string();
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: display.clone(),
        source,
    })?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            path: display.clone(),
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(ex.id.clone()) {
            return Err(CorpusError::DuplicateId {
                path: display.clone(),
                line: line_no,
                id: ex.id,
            });
        }
        if ex.article.is_empty() {
            return Err(CorpusError::EmptyArticle {
                path: display.clone(),
                line: line_no,
                id: ex.id,
            });
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<(), CorpusError> {
    let display = path.display().to_string();
    let mut f = io::BufWriter::new(fs::File::create(path).map_err(|source| CorpusError::Io {
        path: display.clone(),
        source,
    })?);
    let emit = |res: io::Result<()>| {
        res.map_err(|source| CorpusError::Io {
            path: display.clone(),
            source,
        })
    };
    for ex in examples {
        let line = serde_json::to_string(ex).expect("examples always serialize");
        emit(writeln!(f, "{line}"))?;
    }
    emit(f.flush())?;
    Ok(())
}

/// Controls for [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    /// Upper bound on distinct tokens across the generated corpus.
    pub vocab_size: usize,
    pub num_examples: usize,
    pub sentences_min: usize,
    pub sentences_max: usize,
    /// Salient (grammar) sentences per article; the rest are noise.
    pub salient_count: usize,
    /// Probability of injecting a random noise token after each article token
    /// of a salient sentence.
    pub noise_rate: f64,
    /// Substitute verb/object synonyms in summaries so they are abstractive
    /// rather than verbatim copies.
    pub paraphrase: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            vocab_size: 200,
            num_examples: 500,
            sentences_min: 5,
            sentences_max: 8,
            salient_count: 2,
            noise_rate: 0.1,
            paraphrase: true,
            seed: 42,
        }
    }
}

/// Example plus per-article-token noise flags (`true` = redundant token).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledExample {
    #[serde(flatten)]
    pub example: Example,
    pub noise_flags: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl SyntheticCorpus {
    pub fn all(&self) -> impl Iterator<Item = &LabeledExample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

const SUBJECTS: [&str; 12] = [
    "engineer", "pilot", "farmer", "doctor", "mayor", "artist", "chef", "judge", "nurse",
    "coach", "sailor", "teacher",
];
const VERBS: [(&str, &str); 12] = [
    ("praised", "lauded"),
    ("blamed", "faulted"),
    ("visited", "toured"),
    ("funded", "financed"),
    ("built", "constructed"),
    ("sold", "auctioned"),
    ("studied", "examined"),
    ("repaired", "fixed"),
    ("painted", "decorated"),
    ("planted", "seeded"),
    ("opened", "launched"),
    ("closed", "shuttered"),
];
const OBJECTS: [(&str, &str); 12] = [
    ("bridge", "span"),
    ("market", "bazaar"),
    ("hospital", "clinic"),
    ("stadium", "arena"),
    ("library", "archive"),
    ("harbor", "port"),
    ("factory", "plant"),
    ("museum", "gallery"),
    ("airport", "airfield"),
    ("garden", "orchard"),
    ("school", "academy"),
    ("theater", "playhouse"),
];

/// "the" and "." plus every grammar word and synonym.
fn grammar_word_count() -> usize {
    2 + SUBJECTS.len() + 2 * VERBS.len() + 2 * OBJECTS.len()
}

fn noise_word(rng: &mut ChaCha20Rng) -> String {
    // letters restricted so noise words never collide with grammar words
    const LETTERS: [char; 6] = ['q', 'x', 'z', 'v', 'k', 'w'];
    let len = rng.random_range(4..=7);
    (0..len)
        .map(|_| LETTERS[rng.random_range(0..LETTERS.len())])
        .collect()
}

struct Sentence {
    article_tokens: Vec<String>,
    article_flags: Vec<bool>,
    summary_tokens: Option<Vec<String>>,
}

/// Deterministic synthetic corpus, split 80/10/10 in generation order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus, CorpusError> {
    let needed = grammar_word_count() + 4;
    if spec.vocab_size < needed {
        return Err(CorpusError::VocabTooSmall {
            vocab_size: spec.vocab_size,
            needed,
        });
    }
    if spec.salient_count > spec.sentences_min {
        return Err(CorpusError::TooManySalient {
            salient: spec.salient_count,
            sentences_min: spec.sentences_min,
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);

    let noise_budget = spec.vocab_size - grammar_word_count();
    let mut noise_pool: Vec<String> = Vec::with_capacity(noise_budget);
    let mut seen = HashSet::new();
    while noise_pool.len() < noise_budget {
        let w = noise_word(&mut rng);
        if seen.insert(w.clone()) {
            noise_pool.push(w);
        }
    }

    let mut examples = Vec::with_capacity(spec.num_examples);
    for i in 0..spec.num_examples {
        let n_sentences = rng.random_range(spec.sentences_min..=spec.sentences_max);
        let mut sentences: Vec<Sentence> = Vec::with_capacity(n_sentences);
        for s in 0..n_sentences {
            if s < spec.salient_count {
                sentences.push(salient_sentence(spec, &noise_pool, &mut rng));
            } else {
                sentences.push(noise_sentence(&noise_pool, &mut rng));
            }
        }
        sentences.shuffle(&mut rng);

        let mut article_tokens = Vec::new();
        let mut flags = Vec::new();
        let mut summary_tokens = Vec::new();
        for s in &sentences {
            article_tokens.extend(s.article_tokens.iter().cloned());
            flags.extend(s.article_flags.iter().copied());
            if let Some(sum) = &s.summary_tokens {
                summary_tokens.extend(sum.iter().cloned());
            }
        }
        examples.push(LabeledExample {
            example: Example {
                id: format!("syn{i:06}"),
                article: article_tokens.join(" "),
                summary: summary_tokens.join(" "),
            },
            noise_flags: flags,
        });
    }

    let n = examples.len();
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let mut it = examples.into_iter();
    let train: Vec<_> = it.by_ref().take(n_train).collect();
    let val: Vec<_> = it.by_ref().take(n_val).collect();
    let test: Vec<_> = it.collect();
    Ok(SyntheticCorpus { train, val, test })
}

fn salient_sentence(
    spec: &SyntheticSpec,
    noise_pool: &[String],
    rng: &mut ChaCha20Rng,
) -> Sentence {
    let subj = SUBJECTS[rng.random_range(0..SUBJECTS.len())];
    let (verb, verb_syn) = VERBS[rng.random_range(0..VERBS.len())];
    let (obj, obj_syn) = OBJECTS[rng.random_range(0..OBJECTS.len())];
    let clean = ["the", subj, verb, "the", obj, "."];

    let mut article_tokens = Vec::new();
    let mut article_flags = Vec::new();
    for t in clean {
        article_tokens.push(t.to_string());
        article_flags.push(false);
        if spec.noise_rate > 0.0 && rng.random::<f64>() < spec.noise_rate {
            article_tokens.push(noise_pool[rng.random_range(0..noise_pool.len())].clone());
            article_flags.push(true);
        }
    }

    let summary = if spec.paraphrase {
        vec!["the", subj, verb_syn, "the", obj_syn, "."]
    } else {
        clean.to_vec()
    };
    Sentence {
        article_tokens,
        article_flags,
        summary_tokens: Some(summary.into_iter().map(String::from).collect()),
    }
}

fn noise_sentence(noise_pool: &[String], rng: &mut ChaCha20Rng) -> Sentence {
    let len = rng.random_range(4..=7);
    let mut tokens: Vec<String> = (0..len)
        .map(|_| noise_pool[rng.random_range(0..noise_pool.len())].clone())
        .collect();
    tokens.push(".".to_string());
    let flags = vec![true; tokens.len()];
    Sentence {
        article_tokens: tokens,
        article_flags: flags,
        summary_tokens: None,
    }
}

pub fn write_labels(path: &Path, examples: &[&LabeledExample]) -> Result<(), CorpusError> {
    let display = path.display().to_string();
    let mut f = io::BufWriter::new(fs::File::create(path).map_err(|source| CorpusError::Io {
        path: display.clone(),
        source,
    })?);
    for ex in examples {
        let row = serde_json::json!({"id": ex.example.id, "noise_flags": ex.noise_flags});
        writeln!(f, "{row}").map_err(|source| CorpusError::Io {
            path: display.clone(),
            source,
        })?;
    }
    Ok(())
}

/// id -> per-token noise flags, in file order.
pub fn load_labels(path: &Path) -> Result<Vec<(String, Vec<bool>)>, CorpusError> {
    #[derive(Deserialize)]
    struct Row {
        id: String,
        noise_flags: Vec<bool>,
    }
    let display = path.display().to_string();
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: display.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            path: display.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((row.id, row.noise_flags));
    }
    Ok(out)
}

/// Token-count histogram with fixed-width buckets.
#[derive(Debug, Clone, Default)]
pub struct LengthHistogram {
    pub bucket_width: usize,
    pub buckets: Vec<usize>,
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

impl LengthHistogram {
    fn from_lengths(lengths: &[usize], bucket_width: usize) -> Self {
        if lengths.is_empty() {
            return LengthHistogram {
                bucket_width,
                ..LengthHistogram::default()
            };
        }
        let min = *lengths.iter().min().unwrap();
        let max = *lengths.iter().max().unwrap();
        let mean = lengths.iter().sum::<usize>() as f64 / lengths.len() as f64;
        let mut buckets = vec![0usize; max / bucket_width + 1];
        for &l in lengths {
            buckets[l / bucket_width] += 1;
        }
        LengthHistogram {
            bucket_width,
            buckets,
            min,
            max,
            mean,
        }
    }

    pub fn total(&self) -> usize {
        self.buckets.iter().sum()
    }
}

#[derive(Debug, Clone, Default)]
pub struct CorpusStats {
    pub num_examples: usize,
    pub article_lengths: LengthHistogram,
    pub summary_lengths: LengthHistogram,
    pub unique_tokens: usize,
    /// Fraction of token occurrences covered by the vocabulary, if one was given.
    pub vocab_coverage: Option<f64>,
}

pub fn stats(examples: &[Example], vocab: Option<&crate::tokenizer::Vocab>) -> CorpusStats {
    let mut article_lengths = Vec::with_capacity(examples.len());
    let mut summary_lengths = Vec::with_capacity(examples.len());
    let mut unique = HashSet::new();
    let mut total_tokens = 0usize;
    let mut covered = 0usize;
    for ex in examples {
        let at = tokenize(&ex.article);
        let st = tokenize(&ex.summary);
        article_lengths.push(at.len());
        summary_lengths.push(st.len());
        for t in at.into_iter().chain(st) {
            total_tokens += 1;
            if let Some(v) = vocab {
                if v.contains(&t) {
                    covered += 1;
                }
            }
            unique.insert(t);
        }
    }
    CorpusStats {
        num_examples: examples.len(),
        article_lengths: LengthHistogram::from_lengths(&article_lengths, 16),
        summary_lengths: LengthHistogram::from_lengths(&summary_lengths, 16),
        unique_tokens: unique.len(),
        vocab_coverage: vocab.map(|_| {
            if total_tokens == 0 {
                0.0
            } else {
                covered as f64 / total_tokens as f64
            }
        }),
    }
}

pub fn write_stats(w: &mut impl Write, s: &CorpusStats) -> io::Result<()> {
    writeln!(w, "examples {}", s.num_examples)?;
    writeln!(w, "unique_tokens {}", s.unique_tokens)?;
    if let Some(cov) = s.vocab_coverage {
        writeln!(w, "vocab_coverage {cov:.4}")?;
    }
    for (name, h) in [
        ("article", &s.article_lengths),
        ("summary", &s.summary_lengths),
    ] {
        writeln!(
            w,
            "{name}_tokens min {} mean {:.1} max {}",
            h.min, h.mean, h.max
        )?;
        for (i, count) in h.buckets.iter().enumerate() {
            if *count > 0 {
                writeln!(
                    w,
                    "{name}_hist {}..{} {count}",
                    i * h.bucket_width,
                    (i + 1) * h.bucket_width
                )?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_roundtrip_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let examples = vec![
            Example {
                id: "a".into(),
                article: "one two".into(),
                summary: "one".into(),
            },
            Example {
                id: "b".into(),
                article: "three".into(),
                summary: "three".into(),
            },
        ];
        write_jsonl(&path, &examples).unwrap();
        let loaded = load_jsonl(&path).unwrap();
        assert_eq!(loaded, examples);

        // round-trip is content-identical
        let path2 = dir.path().join("c2.jsonl");
        write_jsonl(&path2, &loaded).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn empty_file_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_jsonl(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_cites_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(
            &path,
            concat!(
                "{\"id\":\"a\",\"article\":\"x\",\"summary\":\"y\"}\n",
                "{\"id\":\"b\",\"article\":\"x\",\"summary\":\"y\"}\n",
                "{\"id\":\"c\",\"article\":\"x\"}\n",
            ),
        )
        .unwrap();
        let err = load_jsonl(&path).unwrap_err();
        assert!(err.to_string().contains(":3:"), "got {err}");
        assert!(err.to_string().contains("summary"), "got {err}");
    }

    #[test]
    fn duplicate_id_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.jsonl");
        fs::write(
            &path,
            concat!(
                "{\"id\":\"same\",\"article\":\"x\",\"summary\":\"y\"}\n",
                "{\"id\":\"same\",\"article\":\"x\",\"summary\":\"y\"}\n",
            ),
        )
        .unwrap();
        let err = load_jsonl(&path).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId { ref id, .. } if id == "same"));
    }

    #[test]
    fn synthetic_same_seed_is_byte_identical() {
        let spec = SyntheticSpec {
            num_examples: 30,
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        let render = |c: &SyntheticCorpus| {
            c.all()
                .map(|e| serde_json::to_string(&e).unwrap())
                .collect::<Vec<_>>()
                .join("\n")
        };
        assert_eq!(render(&a), render(&b));
    }

    #[test]
    fn synthetic_split_sizes() {
        let spec = SyntheticSpec {
            num_examples: 100,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        assert_eq!(c.train.len(), 80);
        assert_eq!(c.val.len(), 10);
        assert_eq!(c.test.len(), 10);
    }

    #[test]
    fn synthetic_salient_count_fixes_summary_sentences() {
        let spec = SyntheticSpec {
            num_examples: 20,
            salient_count: 2,
            sentences_min: 6,
            sentences_max: 6,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        for ex in c.all() {
            let dots = ex
                .example
                .summary
                .split_whitespace()
                .filter(|t| *t == ".")
                .count();
            assert_eq!(dots, 2, "summary: {}", ex.example.summary);
        }
    }

    #[test]
    fn synthetic_without_noise_or_paraphrase_is_extractive() {
        let spec = SyntheticSpec {
            num_examples: 20,
            noise_rate: 0.0,
            paraphrase: false,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        for ex in c.all() {
            // summary sentences appear verbatim, in order, within the article
            let article = &ex.example.article;
            let mut cursor = 0;
            for sentence in ex.example.summary.split(" . ") {
                let needle = sentence.trim_end_matches(" .").trim();
                if needle.is_empty() {
                    continue;
                }
                let found = article[cursor..].find(needle);
                assert!(found.is_some(), "missing '{needle}' in '{article}'");
                cursor += found.unwrap() + needle.len();
            }
            // extractive oracle: picking exactly the salient tokens gives ROUGE-1 F1 = 1
            let toks = tokenize(&ex.example.article);
            assert_eq!(toks.len(), ex.noise_flags.len());
            let salient: Vec<String> = toks
                .iter()
                .zip(&ex.noise_flags)
                .filter(|(_, &noise)| !noise)
                .map(|(t, _)| t.clone())
                .collect();
            let oracle = crate::rouge::rouge_n(&salient, &tokenize(&ex.example.summary), 1);
            assert_eq!(oracle.f1, 1.0);
        }
    }

    #[test]
    fn noise_flags_align_with_article_tokens() {
        let c = generate_synthetic(&SyntheticSpec {
            num_examples: 25,
            ..SyntheticSpec::default()
        })
        .unwrap();
        for ex in c.all() {
            assert_eq!(tokenize(&ex.example.article).len(), ex.noise_flags.len());
            assert!(ex.noise_flags.iter().any(|&f| f), "no noise at defaults");
            assert!(ex.noise_flags.iter().any(|&f| !f));
        }
    }

    #[test]
    fn masking_noise_strictly_raises_summary_recall() {
        // candidate = summary, reference = article; removing noise tokens from
        // the reference shrinks the denominator while keeping the overlap
        let c = generate_synthetic(&SyntheticSpec {
            num_examples: 60,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let mut improved = 0usize;
        let mut total = 0usize;
        for ex in c.all() {
            total += 1;
            let summary = tokenize(&ex.example.summary);
            let article = tokenize(&ex.example.article);
            let masked: Vec<String> = article
                .iter()
                .zip(&ex.noise_flags)
                .filter(|(_, &noise)| !noise)
                .map(|(t, _)| t.clone())
                .collect();
            let full = crate::rouge::rouge_n(&summary, &article, 1).recall;
            let oracle = crate::rouge::rouge_n(&summary, &masked, 1).recall;
            if oracle > full {
                improved += 1;
            }
        }
        assert!(
            improved as f64 >= 0.95 * total as f64,
            "only {improved}/{total} improved"
        );
    }

    #[test]
    fn labels_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        let c = generate_synthetic(&SyntheticSpec {
            num_examples: 10,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let refs: Vec<&LabeledExample> = c.all().collect();
        write_labels(&path, &refs).unwrap();
        let loaded = load_labels(&path).unwrap();
        assert_eq!(loaded.len(), 10);
        for ((id, flags), ex) in loaded.iter().zip(c.all()) {
            assert_eq!(id, &ex.example.id);
            assert_eq!(flags, &ex.noise_flags);
        }
    }

    #[test]
    fn vocab_too_small_errors() {
        let err = generate_synthetic(&SyntheticSpec {
            vocab_size: 10,
            ..SyntheticSpec::default()
        })
        .unwrap_err();
        assert!(matches!(err, CorpusError::VocabTooSmall { .. }));
    }

    #[test]
    fn stats_counts_and_histogram_conservation() {
        let empty = stats(&[], None);
        assert_eq!(empty.num_examples, 0);
        assert_eq!(empty.article_lengths.total(), 0);

        let spec = SyntheticSpec {
            num_examples: 100,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        let examples: Vec<Example> = c.all().map(|e| e.example.clone()).collect();
        let s = stats(&examples, None);
        assert_eq!(s.num_examples, 100);
        assert_eq!(s.article_lengths.total(), 100);
        assert_eq!(s.summary_lengths.total(), 100);
        assert!(s.unique_tokens <= spec.vocab_size);

        let mut buf = Vec::new();
        write_stats(&mut buf, &s).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("examples 100\n"));
    }
}
