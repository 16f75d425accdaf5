//! Inverted index over the retrieval pool and IDF-weighted top-K retrieval.
//!
//! Each pool row is a document whose terms are its `(field, code)` pairs.
//! A target's candidates are the rows sharing at least one non-OOV term
//! with it; candidates are ranked by
//! `Σ_f IDF(x_f) · 1[x_f = candidate_f]` with
//! `IDF(x) = ln((N − n(x) + 0.5) / (n(x) + 0.5))`.

mod persist;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use persist::{decode_index, encode_index};

use crate::codec::DecodeError;
use crate::tabular::{Row, OOV};

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("cannot build an index over an empty pool")]
    EmptyPool,
    #[error("pool row {row_id} has {found} fields, expected {expected}")]
    Arity {
        row_id: usize,
        expected: usize,
        found: usize,
    },
    #[error("duplicate row id {0} in pool")]
    DuplicateRow(usize),
    #[error("unknown retrieval scheme {0:?} (expected relevance or random)")]
    UnknownScheme(String),
    #[error("index file: {0}")]
    Decode(#[from] DecodeError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RetrievalScheme {
    Relevance,
    Random,
}

impl FromStr for RetrievalScheme {
    type Err = RetrievalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relevance" => Ok(Self::Relevance),
            "random" => Ok(Self::Random),
            other => Err(RetrievalError::UnknownScheme(other.to_string())),
        }
    }
}

impl RetrievalScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Relevance => "relevance",
            Self::Random => "random",
        }
    }
}

impl fmt::Display for RetrievalScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Doc {
    row_id: usize,
    timestamp: i64,
}

/// Posting lists per `(field, code)` over the retrieval pool.
///
/// Documents are kept in ascending `row_id` order and postings store
/// document positions, so every posting list is sorted by row id.
#[derive(Clone, Debug, PartialEq)]
pub struct InvertedIndex {
    num_fields: usize,
    docs: Vec<Doc>,
    postings: Vec<BTreeMap<u32, Vec<u32>>>,
}

/// Neighbors of one target, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub target_id: usize,
    pub neighbor_ids: Vec<usize>,
    pub scores: Vec<f64>,
}

impl RetrievalResult {
    pub fn len(&self) -> usize {
        self.neighbor_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbor_ids.is_empty()
    }
}

pub fn idf_value(pool_size: usize, doc_freq: usize) -> f64 {
    let (n, df) = (pool_size as f64, doc_freq as f64);
    ((n - df + 0.5) / (df + 0.5)).ln()
}

/// Ranking order: higher score, then more recent, then larger row id.
pub fn rank_order(a: (f64, i64, usize), b: (f64, i64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).then(b.2.cmp(&a.2))
}

impl InvertedIndex {
    pub fn build<'a, I>(pool: I) -> Result<Self, RetrievalError>
    where
        I: IntoIterator<Item = &'a Row>,
    {
        let mut rows: Vec<&Row> = pool.into_iter().collect();
        if rows.is_empty() {
            return Err(RetrievalError::EmptyPool);
        }
        rows.sort_by_key(|r| r.row_id);
        let num_fields = rows[0].values.len();
        let mut postings = vec![BTreeMap::<u32, Vec<u32>>::new(); num_fields];
        let mut docs = Vec::with_capacity(rows.len());
        for (pos, row) in rows.iter().enumerate() {
            if row.values.len() != num_fields {
                return Err(RetrievalError::Arity {
                    row_id: row.row_id,
                    expected: num_fields,
                    found: row.values.len(),
                });
            }
            if docs.last().is_some_and(|d: &Doc| d.row_id == row.row_id) {
                return Err(RetrievalError::DuplicateRow(row.row_id));
            }
            docs.push(Doc {
                row_id: row.row_id,
                timestamp: row.timestamp,
            });
            for (f, &code) in row.values.iter().enumerate() {
                postings[f].entry(code).or_default().push(pos as u32);
            }
        }
        Ok(Self {
            num_fields,
            docs,
            postings,
        })
    }

    /// Pool size `N`.
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn num_fields(&self) -> usize {
        self.num_fields
    }

    pub fn contains(&self, row_id: usize) -> bool {
        self.position(row_id).is_some()
    }

    fn position(&self, row_id: usize) -> Option<usize> {
        self.docs.binary_search_by_key(&row_id, |d| d.row_id).ok()
    }

    pub fn pool_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.docs.iter().map(|d| d.row_id)
    }

    /// Number of pool rows holding `code` in `field`.
    pub fn doc_freq(&self, field: usize, code: u32) -> usize {
        self.postings[field].get(&code).map_or(0, Vec::len)
    }

    /// Row ids holding `code` in `field`, ascending.
    pub fn posting(&self, field: usize, code: u32) -> Vec<usize> {
        self.postings[field]
            .get(&code)
            .map(|p| {
                p.iter()
                    .map(|&pos| self.docs[pos as usize].row_id)
                    .collect()
            })
            .unwrap_or_default()
    }

    /// `(code, doc_freq)` for every code present in `field`.
    pub fn field_terms(&self, field: usize) -> impl Iterator<Item = (u32, usize)> + '_ {
        self.postings[field].iter().map(|(&c, p)| (c, p.len()))
    }

    pub fn idf(&self, field: usize, code: u32) -> f64 {
        idf_value(self.len(), self.doc_freq(field, code))
    }

    /// IDF-weighted count of matching fields. OOV never matches.
    pub fn relevance(&self, target: &Row, candidate: &Row) -> f64 {
        let mut score = 0.0;
        for (f, (&t, &c)) in target.values.iter().zip(&candidate.values).enumerate() {
            if t != OOV && t == c {
                score += self.idf(f, t);
            }
        }
        score
    }

    /// Top-`k` pool rows among those sharing a non-OOV value with the
    /// target. The target itself is never returned.
    pub fn retrieve_topk(&self, target: &Row, k: usize) -> RetrievalResult {
        let mut scores = vec![0.0; self.docs.len()];
        let mut touched = vec![false; self.docs.len()];
        let mut candidates = Vec::new();
        for (f, &code) in target.values.iter().enumerate().take(self.num_fields) {
            if code == OOV {
                continue;
            }
            let Some(list) = self.postings[f].get(&code) else {
                continue;
            };
            let w = idf_value(self.docs.len(), list.len());
            for &pos in list {
                let pos = pos as usize;
                scores[pos] += w;
                if !touched[pos] {
                    touched[pos] = true;
                    candidates.push(pos);
                }
            }
        }
        candidates.retain(|&pos| self.docs[pos].row_id != target.row_id);
        let key = |pos: usize| (scores[pos], self.docs[pos].timestamp, self.docs[pos].row_id);
        candidates.sort_by(|&a, &b| rank_order(key(a), key(b)));
        candidates.truncate(k);
        RetrievalResult {
            target_id: target.row_id,
            neighbor_ids: candidates.iter().map(|&p| self.docs[p].row_id).collect(),
            scores: candidates.iter().map(|&p| scores[p]).collect(),
        }
    }

    /// `k` pool rows drawn uniformly without replacement. The draw depends
    /// only on `seed` and the target's row id.
    pub fn retrieve_random(&self, target: &Row, k: usize, seed: u64) -> RetrievalResult {
        let eligible: Vec<usize> = self.pool_ids().filter(|&id| id != target.row_id).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, target.row_id as u64));
        let take = k.min(eligible.len());
        let neighbor_ids: Vec<usize> = sample(&mut rng, eligible.len(), take)
            .into_iter()
            .map(|i| eligible[i])
            .collect();
        RetrievalResult {
            target_id: target.row_id,
            scores: vec![0.0; neighbor_ids.len()],
            neighbor_ids,
        }
    }

    pub fn retrieve(
        &self,
        target: &Row,
        k: usize,
        scheme: RetrievalScheme,
        seed: u64,
    ) -> RetrievalResult {
        match scheme {
            RetrievalScheme::Relevance => self.retrieve_topk(target, k),
            RetrievalScheme::Random => self.retrieve_random(target, k, seed),
        }
    }
}

/// SplitMix64 finalizer over `seed ⊕ value`, so nearby seeds and row ids
/// give unrelated streams.
pub(crate) fn mix_seed(seed: u64, value: u64) -> u64 {
    let mut z = seed ^ value.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
