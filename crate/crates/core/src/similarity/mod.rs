//! Phrase similarity `s(a, b)` behind a small set of backends.
//!
//! Every reward and metric formula consumes [`Backend::strength`], the
//! similarity clamped to `[0, 1]`.

mod vector_table;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

pub use vector_table::VectorTable;

pub const DEFAULT_NGRAM: usize = 3;

const PAD: char = ' ';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissPolicy {
    #[default]
    Fallback,
    Error,
}

#[derive(Debug, Clone)]
pub enum Backend {
    /// 1 if the phrases are identical, else 0.
    Exact,
    /// Cosine over character n-gram counts, one pad character per side.
    CharNgram {
        n: usize,
    },
    Vectors(VectorBackend),
}

#[derive(Debug, Clone)]
pub struct VectorBackend {
    table: Arc<VectorTable>,
    policy: MissPolicy,
    fallback_n: usize,
    misses: Arc<AtomicU64>,
    origin: String,
}

impl VectorBackend {
    pub fn new(table: VectorTable, policy: MissPolicy, origin: impl Into<String>) -> Self {
        VectorBackend {
            table: Arc::new(table),
            policy,
            fallback_n: DEFAULT_NGRAM,
            misses: Arc::new(AtomicU64::new(0)),
            origin: origin.into(),
        }
    }

    pub fn table(&self) -> &VectorTable {
        &self.table
    }

    /// Lookups that fell back to character n-grams so far.
    pub fn miss_count(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        match (self.table.get(a), self.table.get(b)) {
            (Some(x), Some(y)) => {
                let dot: f64 = x.iter().zip(y).map(|(p, q)| f64::from(*p) * f64::from(*q)).sum();
                Ok(dot.clamp(-1.0, 1.0))
            }
            (va, _) => match self.policy {
                MissPolicy::Error => Err(Error::MissingPhrase(if va.is_none() { a } else { b }.to_string())),
                MissPolicy::Fallback => {
                    self.misses.fetch_add(1, Ordering::Relaxed);
                    Ok(ngram_cosine(a, b, self.fallback_n))
                }
            },
        }
    }
}

impl Backend {
    pub fn char_ngram() -> Self {
        Backend::CharNgram { n: DEFAULT_NGRAM }
    }

    /// Sets the lookup-miss policy of a vector backend; no-op otherwise.
    pub fn with_miss_policy(self, policy: MissPolicy) -> Self {
        match self {
            Backend::Vectors(mut v) => {
                v.policy = policy;
                Backend::Vectors(v)
            }
            other => other,
        }
    }

    /// Vector-table misses served by the n-gram fallback so far.
    pub fn miss_count(&self) -> u64 {
        match self {
            Backend::Vectors(v) => v.miss_count(),
            _ => 0,
        }
    }

    /// Parses `exact`, `ngram`, `ngram:N` or `vectors:PATH`.
    pub fn from_descriptor(descriptor: &str) -> Result<Self> {
        match descriptor.split_once(':') {
            None if descriptor == "exact" => Ok(Backend::Exact),
            None if descriptor == "ngram" => Ok(Backend::char_ngram()),
            Some(("ngram", n)) => {
                let n: usize = n.parse().map_err(|_| Error::Config(format!("bad n-gram size `{n}`")))?;
                if n == 0 {
                    return Err(Error::Config("n-gram size must be at least 1".into()));
                }
                Ok(Backend::CharNgram { n })
            }
            Some(("vectors", path)) => {
                let table = VectorTable::load(path)?;
                Ok(Backend::Vectors(VectorBackend::new(table, MissPolicy::Fallback, path)))
            }
            _ => Err(Error::Config(format!(
                "unknown backend `{descriptor}` (expected exact, ngram[:N] or vectors:PATH)"
            ))),
        }
    }

    /// Raw similarity: `[0, 1]` for exact and n-gram, `[-1, 1]` for vectors.
    pub fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        if a == b {
            return Ok(1.0);
        }
        match self {
            Backend::Exact => Ok(0.0),
            Backend::CharNgram { n } => Ok(ngram_cosine(a, b, *n)),
            Backend::Vectors(v) => v.similarity(a, b),
        }
    }

    /// Similarity clamped at zero; the match strength used by scoring.
    pub fn strength(&self, a: &str, b: &str) -> Result<f64> {
        Ok(self.similarity(a, b)?.max(0.0))
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backend::Exact => f.write_str("exact"),
            Backend::CharNgram { n } => write!(f, "ngram:{n}"),
            Backend::Vectors(v) => write!(f, "vectors:{}", v.origin),
        }
    }
}

/// Best match of `query` in `pool`: the highest strength and the
/// lexicographically first phrase attaining it. An empty pool gives `(0, None)`.
pub fn max_similarity<'a, I>(backend: &Backend, query: &str, pool: I) -> Result<(f64, Option<&'a str>)>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut pool: Vec<&str> = pool.into_iter().collect();
    pool.sort_unstable();
    pool.dedup();
    let mut best: (f64, Option<&str>) = (0.0, None);
    for candidate in pool {
        let s = backend.strength(query, candidate)?;
        if best.1.is_none() || s > best.0 {
            best = (s, Some(candidate));
        }
    }
    Ok(best)
}

fn ngram_counts(phrase: &str, n: usize) -> BTreeMap<Vec<char>, u64> {
    let padded: Vec<char> = std::iter::once(PAD)
        .chain(phrase.chars())
        .chain(std::iter::once(PAD))
        .collect();
    let mut counts = BTreeMap::new();
    if padded.len() < n {
        counts.insert(padded, 1);
    } else {
        for gram in padded.windows(n) {
            *counts.entry(gram.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Cosine of the padded character n-gram count vectors. Counts are
/// integers, so the result is exactly symmetric.
pub fn ngram_cosine(a: &str, b: &str, n: usize) -> f64 {
    let ca = ngram_counts(a, n);
    let cb = ngram_counts(b, n);
    let dot: u64 = ca.iter().filter_map(|(g, x)| cb.get(g).map(|y| x * y)).sum();
    let na: u64 = ca.values().map(|x| x * x).sum();
    let nb: u64 = cb.values().map(|x| x * x).sum();
    if dot == 0 {
        return 0.0;
    }
    dot as f64 / ((na * nb) as f64).sqrt()
}
