//! Word-level tokenizer and vocabulary.
//!
//! Tokens are lowercased, split on whitespace, with leading/trailing
//! punctuation peeled off into separate tokens. The same normalization is
//! used for model input and for ROUGE, so the reward and the metric always
//! agree on what a token is.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;
pub const NUM_SPECIALS: usize = 5;

const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<sos>", "<eos>", "<sep>", "<unk>"];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("vocab file i/o: {0}")]
    Io(#[from] io::Error),
}

/// Token-id mapping with five fixed specials at ids 0..=4.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    fn with_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut id_to_token: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            token_to_id,
            id_to_token,
        }
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// Maps ids back to tokens, dropping the special markers.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id >= NUM_SPECIALS && id < self.size())
            .map(|&id| self.id_to_token[id].clone())
            .collect()
    }

    /// One non-special token per line; line `i` holds the token with id `i + 5`.
    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        for token in &self.id_to_token[NUM_SPECIALS..] {
            writeln!(f, "{token}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = fs::read_to_string(path)?;
        Ok(Vocab::with_tokens(
            text.lines().filter(|l| !l.is_empty()).map(str::to_string),
        ))
    }
}

/// Keeps tokens with frequency >= `min_count`, most frequent first, ties
/// broken lexicographically, truncated so the whole vocabulary (specials
/// included) has at most `max_size` entries.
pub fn build_vocab<S: AsRef<str>>(
    corpus: impl IntoIterator<Item = S>,
    min_count: usize,
    max_size: usize,
) -> Result<Vocab, VocabError> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut any_doc = false;
    for doc in corpus {
        any_doc = true;
        for token in tokenize(doc.as_ref()) {
            *counts.entry(token).or_insert(0) += 1;
        }
    }
    if !any_doc {
        return Err(VocabError::EmptyCorpus);
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    kept.truncate(max_size.saturating_sub(NUM_SPECIALS));
    Ok(Vocab::with_tokens(kept.into_iter().map(|(t, _)| t)))
}

/// Which side of the separator a position belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Source,
    Target,
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Segment::Source => write!(f, "source"),
            Segment::Target => write!(f, "target"),
        }
    }
}

/// Integer-encoded `[SOS, source.., SEP, target.., EOS]` sequence with
/// per-position segment flags. All source positions precede all target
/// positions; SOS through SEP inclusive are flagged source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub segment: Vec<Segment>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Index of the SEP token (the last source-flagged position).
    pub fn sep_position(&self) -> usize {
        self.segment
            .iter()
            .rposition(|&s| s == Segment::Source)
            .expect("encode_pair always emits a source segment")
    }

    /// Number of source-flagged positions (SOS and SEP included).
    pub fn num_source(&self) -> usize {
        self.sep_position() + 1
    }
}

/// Encodes a source/target text pair. Source is truncated to `max_src`
/// tokens and target to `max_tgt`; out-of-vocabulary words map to UNK.
pub fn encode_pair(
    source: &str,
    target: &str,
    vocab: &Vocab,
    max_src: usize,
    max_tgt: usize,
) -> TokenSequence {
    let src_tokens = tokenize(source);
    let tgt_tokens = tokenize(target);
    let mut ids = Vec::with_capacity(src_tokens.len().min(max_src) + tgt_tokens.len().min(max_tgt) + 3);
    let mut segment = Vec::new();
    ids.push(SOS);
    for t in src_tokens.iter().take(max_src) {
        ids.push(vocab.id(t));
    }
    ids.push(SEP);
    segment.resize(ids.len(), Segment::Source);
    for t in tgt_tokens.iter().take(max_tgt) {
        ids.push(vocab.id(t));
    }
    ids.push(EOS);
    segment.resize(ids.len(), Segment::Target);
    TokenSequence { ids, segment }
}

/// Encodes a source with an empty, open target side: `[SOS, source.., SEP]`.
pub fn encode_source(source: &str, vocab: &Vocab, max_src: usize) -> TokenSequence {
    let src_tokens = tokenize(source);
    let mut ids = vec![SOS];
    for t in src_tokens.iter().take(max_src) {
        ids.push(vocab.id(t));
    }
    ids.push(SEP);
    let segment = vec![Segment::Source; ids.len()];
    TokenSequence { ids, segment }
}

/// Lowercases, splits on whitespace, and peels leading/trailing punctuation
/// of each chunk into separate tokens. Interior punctuation is kept, so
/// "don't" stays one token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.to_lowercase().split_whitespace() {
        let chars: Vec<char> = raw.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        while start < end && is_punct(chars[start]) {
            out.push(chars[start].to_string());
            start += 1;
        }
        let mut trailing = Vec::new();
        while end > start && is_punct(chars[end - 1]) {
            trailing.push(chars[end - 1].to_string());
            end -= 1;
        }
        if start < end {
            out.push(chars[start..end].iter().collect());
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric()
}
