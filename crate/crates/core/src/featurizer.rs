//! Sparse and dense token featurization.
//!
//! Every featurized sequence has one position per token plus a final
//! `__CLS__` position. Sparse features are indices into one concatenated
//! indicator space: two reserved slots, then case-sensitive token
//! one-hots, then lowercased character n-grams.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Token};
use crate::{DietError, Result};

pub const CLS_TOKEN: &str = "__CLS__";
pub const MASK_TOKEN: &str = "__MASK__";
pub const DEFAULT_NGRAM_MAX: usize = 5;

/// All contiguous substrings of length `1..=n_max` of the lowercased token.
pub fn char_ngrams(token: &str, n_max: usize) -> BTreeSet<String> {
    let chars: Vec<char> = token.to_lowercase().chars().collect();
    let mut out = BTreeSet::new();
    for n in 1..=n_max.min(chars.len()) {
        for w in chars.windows(n) {
            out.insert(w.iter().collect());
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct SparseVocab {
    n_max: usize,
    tokens: Vec<String>,
    ngrams: Vec<String>,
    token_index: HashMap<String, usize>,
    ngram_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    n_max: usize,
    tokens: Vec<String>,
    ngrams: Vec<String>,
}

impl From<VocabRepr> for SparseVocab {
    fn from(r: VocabRepr) -> Self {
        Self::from_lists(r.n_max, r.tokens, r.ngrams)
    }
}

impl From<SparseVocab> for VocabRepr {
    fn from(v: SparseVocab) -> Self {
        Self {
            n_max: v.n_max,
            tokens: v.tokens,
            ngrams: v.ngrams,
        }
    }
}

impl PartialEq for SparseVocab {
    fn eq(&self, other: &Self) -> bool {
        self.n_max == other.n_max && self.tokens == other.tokens && self.ngrams == other.ngrams
    }
}

impl SparseVocab {
    pub const OOV_INDEX: usize = 0;
    pub const CLS_INDEX: usize = 1;
    const RESERVED: usize = 2;

    fn from_lists(n_max: usize, tokens: Vec<String>, ngrams: Vec<String>) -> Self {
        let token_index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), Self::RESERVED + i))
            .collect();
        let offset = Self::RESERVED + tokens.len();
        let ngram_index = ngrams
            .iter()
            .enumerate()
            .map(|(i, g)| (g.clone(), offset + i))
            .collect();
        Self {
            n_max,
            tokens,
            ngrams,
            token_index,
            ngram_index,
        }
    }

    /// Lexicographically ordered vocabulary over all training tokens and
    /// their n-grams.
    pub fn build(dataset: &Dataset, n_max: usize) -> Result<Self> {
        if dataset.is_empty() {
            return Err(DietError::EmptyDataset("cannot build a vocabulary".into()));
        }
        if n_max == 0 {
            return Err(DietError::Config("n-gram order must be at least 1".into()));
        }
        let mut tokens = BTreeSet::new();
        let mut ngrams = BTreeSet::new();
        for u in &dataset.utterances {
            for t in &u.tokens {
                tokens.insert(t.text.clone());
                ngrams.extend(char_ngrams(&t.text, n_max));
            }
        }
        Ok(Self::from_lists(
            n_max,
            tokens.into_iter().collect(),
            ngrams.into_iter().collect(),
        ))
    }

    /// Size of the concatenated sparse space.
    pub fn dim(&self) -> usize {
        Self::RESERVED + self.tokens.len() + self.ngrams.len()
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn token_id(&self, token: &str) -> Option<usize> {
        self.token_index.get(token).copied()
    }

    pub fn ngram_id(&self, ngram: &str) -> Option<usize> {
        self.ngram_index.get(ngram).copied()
    }

    /// Active indices of one token, sorted: its one-hot (or the OOV slot)
    /// plus every known n-gram.
    pub fn token_features(&self, token: &str) -> Vec<usize> {
        let mut out = vec![self.token_id(token).unwrap_or(Self::OOV_INDEX)];
        out.extend(
            char_ngrams(token, self.n_max)
                .iter()
                .filter_map(|g| self.ngram_id(g)),
        );
        out.sort_unstable();
        out
    }
}

/// Per-position sparse index sets, `__CLS__` last.
///
/// The `__CLS__` position carries the union of all token positions'
/// indices; an empty sequence gives it the reserved `__CLS__` slot.
pub fn featurize_sparse<S: AsRef<str>>(tokens: &[S], vocab: &SparseVocab) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = tokens
        .iter()
        .map(|t| vocab.token_features(t.as_ref()))
        .collect();
    let union: BTreeSet<usize> = out.iter().flatten().copied().collect();
    if union.is_empty() {
        out.push(vec![SparseVocab::CLS_INDEX]);
    } else {
        out.push(union.into_iter().collect());
    }
    out
}

/// Indicator weights for a sparse matrix product. In training mode each
/// active feature is dropped with probability `rate` and survivors are
/// scaled by `1 / (1 - rate)`.
pub fn sparse_activations<R: Rng + ?Sized>(
    sets: &[Vec<usize>],
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Vec<Vec<(usize, f64)>> {
    if !training || rate <= 0.0 {
        return sets
            .iter()
            .map(|s| s.iter().map(|&i| (i, 1.0)).collect())
            .collect();
    }
    let keep = 1.0 / (1.0 - rate);
    sets.iter()
        .map(|s| {
            s.iter()
                .filter_map(|&i| (rng.random::<f64>() >= rate).then_some((i, keep)))
                .collect()
        })
        .collect()
}

/// Word vectors loaded from a whitespace-separated text file.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl DenseTable {
    pub fn from_map(dim: usize, vectors: HashMap<String, Vec<f64>>) -> Result<Self> {
        if let Some((w, v)) = vectors.iter().find(|(_, v)| v.len() != dim) {
            return Err(DietError::Invalid(format!(
                "vector for {w:?} has dimension {} (expected {dim})",
                v.len()
            )));
        }
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Exact match first, then the lowercased token.
    pub fn lookup(&self, token: &str) -> Option<&[f64]> {
        self.vectors
            .get(token)
            .or_else(|| self.vectors.get(&token.to_lowercase()))
            .map(Vec::as_slice)
    }

    /// Serializes in the word-vector text format, words sorted.
    pub fn to_lines(&self) -> Vec<String> {
        let mut words: Vec<&String> = self.vectors.keys().collect();
        words.sort();
        words
            .into_iter()
            .map(|w| {
                let mut line = w.clone();
                for v in &self.vectors[w] {
                    line.push(' ');
                    line.push_str(&v.to_string());
                }
                line
            })
            .collect()
    }

    pub fn parse(source_name: &str, reader: impl BufRead) -> Result<Self> {
        let mut dim = None;
        let mut vectors = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| DietError::io(source_name, e))?;
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values: Vec<f64> = parts
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| DietError::Parse {
                    source_name: source_name.to_string(),
                    line: i + 1,
                    message: format!("bad number: {e}"),
                })?;
            let d = *dim.get_or_insert(values.len());
            if values.len() != d || d == 0 {
                return Err(DietError::Parse {
                    source_name: source_name.to_string(),
                    line: i + 1,
                    message: format!("vector has {} values, expected {d}", values.len()),
                });
            }
            if vectors.insert(word.to_string(), values).is_some() {
                log::warn!(
                    "{source_name}:{}: duplicate word {word:?}, keeping the last vector",
                    i + 1
                );
            }
        }
        Ok(Self {
            dim: dim.unwrap_or(0),
            vectors,
        })
    }
}

pub fn load_dense_table(path: impl AsRef<Path>) -> Result<DenseTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| DietError::io(path, e))?;
    DenseTable::parse(&path.display().to_string(), BufReader::new(file))
}

/// Per-position dense vectors, `__CLS__` last and equal to the mean of the
/// token vectors. Tokens absent from the table get zeros.
pub fn featurize_dense<S: AsRef<str>>(tokens: &[S], table: &DenseTable) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = tokens
        .iter()
        .map(|t| {
            table
                .lookup(t.as_ref())
                .map_or_else(|| vec![0.0; table.dim], <[f64]>::to_vec)
        })
        .collect();
    let mut cls = vec![0.0; table.dim];
    if !out.is_empty() {
        for v in &out {
            for (c, x) in cls.iter_mut().zip(v) {
                *c += x;
            }
        }
        let n = out.len() as f64;
        cls.iter_mut().for_each(|c| *c /= n);
    }
    out.push(cls);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SentenceRecord {
    text: String,
    cls_vector: Vec<f64>,
    token_vectors: Vec<Vec<f64>>,
}

/// Precomputed per-sentence vectors from a provider with its own sentence
/// encoding: one `{text, cls_vector, token_vectors}` JSON object per line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SentenceVectors {
    dim: usize,
    by_text: HashMap<String, (Vec<Vec<f64>>, Vec<f64>)>,
}

impl SentenceVectors {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.by_text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_text.is_empty()
    }

    pub fn insert(
        &mut self,
        text: String,
        token_vectors: Vec<Vec<f64>>,
        cls_vector: Vec<f64>,
    ) -> Result<()> {
        if self.by_text.is_empty() && self.dim == 0 {
            self.dim = cls_vector.len();
        }
        if cls_vector.len() != self.dim || token_vectors.iter().any(|v| v.len() != self.dim) {
            return Err(DietError::Invalid(format!(
                "sentence vectors for {text:?} do not have dimension {}",
                self.dim
            )));
        }
        self.by_text.insert(text, (token_vectors, cls_vector));
        Ok(())
    }

    pub fn parse(source_name: &str, reader: impl BufRead) -> Result<Self> {
        let mut out = Self {
            dim: 0,
            by_text: HashMap::new(),
        };
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| DietError::io(source_name, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| DietError::Parse {
                source_name: source_name.to_string(),
                line: i + 1,
                message,
            };
            let rec: SentenceRecord =
                serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            let n_tokens = crate::data::tokenize(&rec.text).len();
            if rec.token_vectors.len() != n_tokens {
                return Err(parse_err(format!(
                    "{} token vectors for {n_tokens} tokens",
                    rec.token_vectors.len()
                )));
            }
            out.insert(rec.text, rec.token_vectors, rec.cls_vector)
                .map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(out)
    }

    /// Serializes in the sidecar line format.
    pub fn to_lines(&self) -> Vec<String> {
        let mut texts: Vec<&String> = self.by_text.keys().collect();
        texts.sort();
        texts
            .into_iter()
            .map(|t| {
                let (tok, cls) = &self.by_text[t];
                serde_json::to_string(&SentenceRecord {
                    text: t.clone(),
                    cls_vector: cls.clone(),
                    token_vectors: tok.clone(),
                })
                .expect("sentence record serializes")
            })
            .collect()
    }

    /// Token vectors followed by the provider's `__CLS__` vector.
    pub fn featurize(&self, text: &str) -> Result<Vec<Vec<f64>>> {
        let (tokens, cls) = self
            .by_text
            .get(text)
            .ok_or_else(|| DietError::MissingSentenceVectors(text.to_string()))?;
        let mut out = tokens.clone();
        out.push(cls.clone());
        Ok(out)
    }
}

pub fn load_sentence_vectors(path: impl AsRef<Path>) -> Result<SentenceVectors> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| DietError::io(path, e))?;
    SentenceVectors::parse(&path.display().to_string(), BufReader::new(file))
}

/// Where dense features come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenseSourceSpec {
    /// Word-vector text file; `__CLS__` is the mean of the token vectors.
    WordVectors { path: PathBuf },
    /// Sentence-vector sidecar; `__CLS__` is the provider's sentence vector.
    SentenceVectors { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub enum DenseSource {
    Words(DenseTable),
    Sentences(SentenceVectors),
}

impl DenseSource {
    pub fn load(spec: &DenseSourceSpec) -> Result<Self> {
        match spec {
            DenseSourceSpec::WordVectors { path } => Ok(Self::Words(load_dense_table(path)?)),
            DenseSourceSpec::SentenceVectors { path } => {
                Ok(Self::Sentences(load_sentence_vectors(path)?))
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Words(t) => t.dim(),
            Self::Sentences(s) => s.dim(),
        }
    }

    pub fn featurize(&self, text: &str, tokens: &[Token]) -> Result<Vec<Vec<f64>>> {
        match self {
            Self::Words(t) => Ok(featurize_dense(tokens_text(tokens).as_slice(), t)),
            Self::Sentences(s) => s.featurize(text),
        }
    }
}

fn tokens_text(tokens: &[Token]) -> Vec<&str> {
    tokens.iter().map(|t| t.text.as_str()).collect()
}

/// Features of one sequence, `__CLS__` last.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures {
    pub sparse: Option<Vec<Vec<usize>>>,
    pub dense: Option<Vec<Vec<f64>>>,
    /// Token strings, `__CLS__` included.
    pub tokens: Vec<String>,
}

impl TokenFeatures {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A frozen featurization pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurizer {
    pub vocab: Option<SparseVocab>,
    pub dense: Option<DenseSource>,
}

impl Featurizer {
    pub fn new(vocab: Option<SparseVocab>, dense: Option<DenseSource>) -> Result<Self> {
        if vocab.is_none() && dense.is_none() {
            return Err(DietError::Config(
                "at least one of sparse or dense features must be enabled".into(),
            ));
        }
        Ok(Self { vocab, dense })
    }

    pub fn sparse_dim(&self) -> Option<usize> {
        self.vocab.as_ref().map(SparseVocab::dim)
    }

    pub fn dense_dim(&self) -> Option<usize> {
        self.dense.as_ref().map(DenseSource::dim)
    }

    pub fn featurize(&self, text: &str, tokens: &[Token]) -> Result<TokenFeatures> {
        let names = tokens_text(tokens);
        let sparse = self.vocab.as_ref().map(|v| featurize_sparse(&names, v));
        let dense = self
            .dense
            .as_ref()
            .map(|d| d.featurize(text, tokens))
            .transpose()?;
        let mut toks: Vec<String> = names.into_iter().map(String::from).collect();
        toks.push(CLS_TOKEN.to_string());
        Ok(TokenFeatures {
            sparse,
            dense,
            tokens: toks,
        })
    }
}
