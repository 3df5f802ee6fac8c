//! Seeded synthetic text-classification corpora.
//!
//! Token layout: `0` is padding, `1` is the leading `[CLS]` token, then
//! `KEYWORDS_PER_CLASS` keyword ids per class, then noise ids up to
//! `vocab_size`. Every sample starts with `[CLS]`; each later position is a
//! keyword of the sample's class with probability
//! `keyword_strength * (1 - noise_rate)`, otherwise a uniform noise token.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SPECIAL_TOKENS: usize = 2;
pub const KEYWORDS_PER_CLASS: usize = 3;
pub const MAX_LEN: usize = 32;
pub const MIN_SAMPLE_LEN: usize = 8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("infeasible dataset spec: {0}")]
    Infeasible(String),
    #[error("corpus line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub n_classes: usize,
    pub vocab_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub keyword_strength: f64,
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            name: "desk".into(),
            n_classes: 4,
            vocab_size: 256,
            n_train: 2048,
            n_val: 512,
            n_test: 512,
            keyword_strength: 0.1,
            noise_rate: 0.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn keyword_prob(&self) -> f64 {
        self.keyword_strength * (1.0 - self.noise_rate)
    }

    pub fn first_noise_id(&self) -> usize {
        SPECIAL_TOKENS + self.n_classes * KEYWORDS_PER_CLASS
    }

    /// Keyword ids owned by `class`.
    pub fn keywords(&self, class: usize) -> std::ops::Range<usize> {
        let start = SPECIAL_TOKENS + class * KEYWORDS_PER_CLASS;
        start..start + KEYWORDS_PER_CLASS
    }

    /// Class owning `token`, if it is a keyword.
    pub fn keyword_class(&self, token: usize) -> Option<usize> {
        (SPECIAL_TOKENS..self.first_noise_id())
            .contains(&token)
            .then(|| (token - SPECIAL_TOKENS) / KEYWORDS_PER_CLASS)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !(2..=20).contains(&self.n_classes) {
            return Err(DataError::Infeasible(format!(
                "n_classes = {} outside 2..=20",
                self.n_classes
            )));
        }
        if self.vocab_size <= self.first_noise_id() {
            return Err(DataError::Infeasible(format!(
                "vocab_size {} leaves no noise tokens after {} specials and keywords",
                self.vocab_size,
                self.first_noise_id()
            )));
        }
        for (what, v) in [
            ("keyword_strength", self.keyword_strength),
            ("noise_rate", self.noise_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DataError::Infeasible(format!("{what} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Draws the three splits from one seeded stream. Sequences are unique
/// across the whole corpus, so the splits are disjoint.
pub fn generate_corpus(spec: &DatasetSpec) -> Result<Corpus, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut split = |n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Sample>, DataError> {
        let mut labels: Vec<usize> = (0..n).map(|i| i % spec.n_classes).collect();
        labels.shuffle(rng);
        labels
            .into_iter()
            .map(|label| {
                for _ in 0..1000 {
                    let tokens = draw_tokens(spec, label, rng);
                    if seen.insert(tokens.clone()) {
                        return Ok(Sample { tokens, label });
                    }
                }
                Err(DataError::Infeasible(
                    "could not draw a fresh unique sequence; vocabulary too small".into(),
                ))
            })
            .collect()
    };
    let train = split(spec.n_train, &mut rng)?;
    let val = split(spec.n_val, &mut rng)?;
    let test = split(spec.n_test, &mut rng)?;
    Ok(Corpus {
        spec: spec.clone(),
        train,
        val,
        test,
    })
}

fn draw_tokens(spec: &DatasetSpec, label: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let len = rng.gen_range(MIN_SAMPLE_LEN..=MAX_LEN);
    let p = spec.keyword_prob();
    let keywords = spec.keywords(label);
    let noise = spec.first_noise_id()..spec.vocab_size;
    let mut tokens = Vec::with_capacity(len);
    tokens.push(CLS_ID);
    for _ in 1..len {
        let tok = if rng.gen::<f64>() < p {
            rng.gen_range(keywords.clone())
        } else {
            rng.gen_range(noise.clone())
        };
        tokens.push(tok);
    }
    tokens
}

/// Fixed-width batch: `ids` and `mask` are `batch x max_len`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
    pub labels: Vec<usize>,
    pub max_len: usize,
    /// Rows with no real token at all.
    pub degenerate: Vec<bool>,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of real tokens in row `i`.
    pub fn length(&self, i: usize) -> usize {
        self.mask[i * self.max_len..(i + 1) * self.max_len]
            .iter()
            .map(|&m| m as usize)
            .sum()
    }

    pub fn row_ids(&self, i: usize) -> &[usize] {
        &self.ids[i * self.max_len..(i + 1) * self.max_len]
    }
}

/// Pads with [`PAD_ID`] or truncates to the first `max_len` tokens.
pub fn tokenize_batch(samples: &[Sample], max_len: usize) -> TokenBatch {
    let mut ids = Vec::with_capacity(samples.len() * max_len);
    let mut mask = Vec::with_capacity(samples.len() * max_len);
    let mut degenerate = Vec::with_capacity(samples.len());
    for s in samples {
        let real = s.tokens.len().min(max_len);
        ids.extend_from_slice(&s.tokens[..real]);
        ids.extend(std::iter::repeat_n(PAD_ID, max_len - real));
        mask.extend(std::iter::repeat_n(1u8, real));
        mask.extend(std::iter::repeat_n(0u8, max_len - real));
        degenerate.push(real == 0);
    }
    TokenBatch {
        ids,
        mask,
        labels: samples.iter().map(|s| s.label).collect(),
        max_len,
        degenerate,
    }
}

/// Consecutive batches of at most `batch_size` samples, in order.
pub fn batches(samples: &[Sample], batch_size: usize) -> Vec<TokenBatch> {
    samples
        .chunks(batch_size.max(1))
        .map(|c| tokenize_batch(c, MAX_LEN))
        .collect()
}

/// One record per line: `label<TAB>id id id ...`.
pub fn write_samples<W: Write>(mut out: W, samples: &[Sample]) -> std::io::Result<()> {
    let mut line = String::new();
    for s in samples {
        line.clear();
        write!(line, "{}\t", s.label).unwrap();
        for (i, t) in s.tokens.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            write!(line, "{t}").unwrap();
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn read_samples<R: BufRead>(input: R) -> Result<Vec<Sample>, DataError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| DataError::Parse { line: i + 1, reason };
        let (label, ids) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("missing tab separator".into()))?;
        let label = label
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("label: {e}")))?;
        let tokens = ids
            .split_whitespace()
            .map(|t| t.parse().map_err(|e| parse_err(format!("token '{t}': {e}"))))
            .collect::<Result<_, _>>()?;
        out.push(Sample { tokens, label });
    }
    Ok(out)
}

/// Keyword-count classifier: predicts the class whose keywords occur most
/// often, breaking ties (including "no keywords") toward the lowest class.
pub fn keyword_count_predict(spec: &DatasetSpec, tokens: &[usize]) -> usize {
    let mut counts = vec![0usize; spec.n_classes];
    for &t in tokens {
        if let Some(c) = spec.keyword_class(t) {
            counts[c] += 1;
        }
    }
    let mut best = 0;
    for c in 1..counts.len() {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    best
}
