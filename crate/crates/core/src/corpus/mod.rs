//! Review ingestion and preprocessing.
//!
//! Raw reviews arrive as JSONL. They are segmented into sentences and
//! word tokens, mapped through a frequency-built vocabulary, and padded
//! into fixed L×T id grids the model consumes. A synthetic corpus
//! generator lives in [`synth`].

mod synth;

pub use synth::{generate_synthetic, split_80_10_10, SynthSpec};

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token id for padding positions.
pub const PAD_ID: usize = 0;
/// Token id for out-of-vocabulary words.
pub const UNK_ID: usize = 1;
/// Entity id for unseen users and products.
pub const UNK_ENTITY: usize = 0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: duplicate review_id {id:?}")]
    DuplicateReview { line: usize, id: String },
    #[error("review_id {id:?} appears in more than one split")]
    SplitOverlap { id: String },
    #[error("infeasible synthetic spec: {reason}")]
    InfeasibleSpec { reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// One review as it appears on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawReview {
    pub review_id: String,
    pub user_id: String,
    pub product_id: String,
    pub label: u8,
    pub text: String,
}

/// Token and entity id maps. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: BTreeMap<String, usize>,
    users: BTreeMap<String, usize>,
    products: BTreeMap<String, usize>,
    n_tokens: usize,
}

impl Vocabulary {
    /// Id for a token, falling back to [`UNK_ID`].
    pub fn token_id(&self, token: &str) -> usize {
        self.tokens.get(token).copied().unwrap_or(UNK_ID)
    }

    /// Id for a user, falling back to [`UNK_ENTITY`].
    pub fn user_id(&self, user: &str) -> usize {
        self.users.get(user).copied().unwrap_or(UNK_ENTITY)
    }

    /// Id for a product, falling back to [`UNK_ENTITY`].
    pub fn product_id(&self, product: &str) -> usize {
        self.products.get(product).copied().unwrap_or(UNK_ENTITY)
    }

    /// Vocabulary size including the PAD and UNK rows.
    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    /// User count including the UNK row.
    pub fn n_users(&self) -> usize {
        self.users.len() + 1
    }

    /// Product count including the UNK row.
    pub fn n_products(&self) -> usize {
        self.products.len() + 1
    }

    /// Token for an id, for round-tripping grids back to text. PAD and UNK
    /// have no surface form and return `None`.
    pub fn token_for(&self, id: usize) -> Option<&str> {
        self.tokens
            .iter()
            .find(|(_, &v)| v == id)
            .map(|(k, _)| k.as_str())
    }

    /// Writes the token map as `token<TAB>id` lines, sorted by id.
    pub fn save_tokens(&self, path: &Path) -> Result<()> {
        let mut by_id: Vec<(&str, usize)> =
            self.tokens.iter().map(|(t, &i)| (t.as_str(), i)).collect();
        by_id.sort_by_key(|&(_, id)| id);
        let mut w = BufWriter::new(File::create(path)?);
        for (token, id) in by_id {
            writeln!(w, "{token}\t{id}")?;
        }
        Ok(())
    }

    /// Reads a `token<TAB>id` file written by [`Vocabulary::save_tokens`].
    pub fn load_tokens(path: &Path) -> Result<BTreeMap<String, usize>> {
        let mut map = BTreeMap::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (token, id) = line.split_once('\t').ok_or_else(|| CorpusError::Parse {
                line: i + 1,
                message: "expected token<TAB>id".to_string(),
            })?;
            let id: usize = id.parse().map_err(|_| CorpusError::Parse {
                line: i + 1,
                message: format!("bad id {id:?}"),
            })?;
            map.insert(token.to_string(), id);
        }
        Ok(map)
    }
}

/// Padding and truncation bounds for [`encode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodeLimits {
    /// Sentences kept per review.
    pub l: usize,
    /// Tokens kept per sentence.
    pub t: usize,
    /// Cumulative token budget across the whole review.
    pub max_total: usize,
}

impl Default for EncodeLimits {
    fn default() -> Self {
        EncodeLimits {
            l: 10,
            t: 50,
            max_total: 500,
        }
    }
}

/// A review mapped to fixed-size id grids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedReview {
    pub review_id: String,
    /// L rows of T token ids, PAD-filled.
    pub tokens: Vec<Vec<usize>>,
    /// True exactly where `tokens` holds a real (non-PAD) token.
    pub token_mask: Vec<Vec<bool>>,
    /// True for rows with at least one real token.
    pub sentence_mask: Vec<bool>,
    pub user: usize,
    pub product: usize,
    pub label: usize,
}

impl EncodedReview {
    /// Count of real tokens across all rows.
    pub fn n_real_tokens(&self) -> usize {
        self.token_mask
            .iter()
            .map(|row| row.iter().filter(|&&b| b).count())
            .sum()
    }
}

/// Train/validation/test partition, disjoint by review id.
#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub train: Vec<EncodedReview>,
    pub validation: Vec<EncodedReview>,
    pub test: Vec<EncodedReview>,
}

impl CorpusSplit {
    pub fn new(
        train: Vec<EncodedReview>,
        validation: Vec<EncodedReview>,
        test: Vec<EncodedReview>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in train.iter().chain(&validation).chain(&test) {
            if !seen.insert(r.review_id.as_str()) {
                return Err(CorpusError::SplitOverlap {
                    id: r.review_id.clone(),
                });
            }
        }
        Ok(CorpusSplit {
            train,
            validation,
            test,
        })
    }
}

/// Groups review indices by author: user id → positions in `reviews`.
pub fn user_index(reviews: &[EncodedReview]) -> BTreeMap<usize, Vec<usize>> {
    let mut index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in reviews.iter().enumerate() {
        index.entry(r.user).or_default().push(i);
    }
    index
}

/// Parses a JSONL review file, preserving order. Line numbers in errors
/// are 1-based. Blank lines are skipped.
pub fn load_jsonl(path: &Path) -> Result<Vec<RawReview>> {
    let mut reviews = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let n = i + 1;
        let review: RawReview =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                line: n,
                message: e.to_string(),
            })?;
        if review.label > 1 {
            return Err(CorpusError::Schema {
                line: n,
                message: format!("label must be 0 or 1, got {}", review.label),
            });
        }
        for (field, value) in [
            ("review_id", &review.review_id),
            ("user_id", &review.user_id),
            ("product_id", &review.product_id),
        ] {
            if value.is_empty() {
                return Err(CorpusError::Schema {
                    line: n,
                    message: format!("{field} must be non-empty"),
                });
            }
        }
        if !seen.insert(review.review_id.clone()) {
            return Err(CorpusError::DuplicateReview {
                line: n,
                id: review.review_id,
            });
        }
        reviews.push(review);
    }
    Ok(reviews)
}

/// Writes reviews as one JSON object per line.
pub fn write_jsonl(path: &Path, reviews: &[RawReview]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in reviews {
        let line = serde_json::to_string(r).map_err(|e| CorpusError::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Splits text into sentences of lowercased word tokens.
///
/// Sentence boundaries are `.`, `!`, `?`, `;` and newlines. Within a
/// sentence, any character that is neither alphanumeric nor an apostrophe
/// separates tokens. Empty sentences and tokens are dropped.
pub fn segment(text: &str) -> Vec<Vec<String>> {
    text.split(['.', '!', '?', ';', '\n'])
        .map(|sentence| {
            sentence
                .split(|c: char| !(c.is_alphanumeric() || c == '\''))
                .filter(|t| !t.is_empty())
                .map(|t| t.to_lowercase())
                .collect::<Vec<_>>()
        })
        .filter(|tokens| !tokens.is_empty())
        .collect()
}

/// Builds token and entity maps from a training corpus.
///
/// Tokens seen at least `min_count` times get ids 2.. in descending
/// frequency order (ties alphabetical); rarer tokens fall back to UNK at
/// encode time. Users and products get ids 1.. in first-appearance order.
pub fn build_vocab(reviews: &[RawReview], min_count: usize) -> Vocabulary {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut users = BTreeMap::new();
    let mut products = BTreeMap::new();
    for r in reviews {
        for sentence in segment(&r.text) {
            for token in sentence {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
        let next = users.len() + 1;
        users.entry(r.user_id.clone()).or_insert(next);
        let next = products.len() + 1;
        products.entry(r.product_id.clone()).or_insert(next);
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count.max(1))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens: BTreeMap<String, usize> = kept
        .into_iter()
        .enumerate()
        .map(|(i, (t, _))| (t, i + 2))
        .collect();
    let n_tokens = tokens.len() + 2;
    Vocabulary {
        tokens,
        users,
        products,
        n_tokens,
    }
}

/// Maps one review onto padded L×T id grids.
///
/// Keeps the first `l` sentences, the first `t` tokens of each, and at
/// most `max_total` tokens overall; everything else is PAD. Unknown
/// users and products map to entity id 0.
pub fn encode(review: &RawReview, vocab: &Vocabulary, limits: &EncodeLimits) -> EncodedReview {
    let mut tokens = vec![vec![PAD_ID; limits.t]; limits.l];
    let mut token_mask = vec![vec![false; limits.t]; limits.l];
    let mut budget = limits.max_total;
    for (i, sentence) in segment(&review.text).into_iter().take(limits.l).enumerate() {
        for (j, token) in sentence.into_iter().take(limits.t).enumerate() {
            if budget == 0 {
                break;
            }
            tokens[i][j] = vocab.token_id(&token);
            token_mask[i][j] = true;
            budget -= 1;
        }
    }
    let sentence_mask: Vec<bool> = token_mask
        .iter()
        .map(|row| row.iter().any(|&b| b))
        .collect();
    EncodedReview {
        review_id: review.review_id.clone(),
        tokens,
        token_mask,
        sentence_mask,
        user: vocab.user_id(&review.user_id),
        product: vocab.product_id(&review.product_id),
        label: review.label as usize,
    }
}

/// Encodes a whole corpus in order.
pub fn encode_all(
    reviews: &[RawReview],
    vocab: &Vocabulary,
    limits: &EncodeLimits,
) -> Vec<EncodedReview> {
    reviews.iter().map(|r| encode(r, vocab, limits)).collect()
}
