//! Classification and ranking metrics, and the ctr / top-n evaluation
//! protocols over a trained model.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::sigmoid;
use crate::model::{ModelError, PetModel};
use crate::retrieval::InvertedIndex;
use crate::tabular::{Row, Table};
use crate::train::{score_rows, RetrievalSettings};

pub const LOGLOSS_CLIP: f64 = 1e-7;
pub const DEFAULT_NEGATIVES: usize = 99;
pub const RANK_CUTOFFS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("AUC needs both classes, got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("{0} scores but {1} labels")]
    Length(usize, usize),
    #[error("top-n evaluation needs a designated item field in the schema")]
    NoItemField,
    #[error("unknown task {0:?} (expected ctr or topn)")]
    UnknownTask(String),
    #[error("item field has no candidate codes besides OOV")]
    EmptyItemVocabulary,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Mann-Whitney AUC; tied positive/negative pairs count one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length(scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass {
            positives,
            negatives,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sweep groups of equal score in ascending order
    let mut negatives_below = 0usize;
    let mut twice_wins = 0u128;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_wins += (pos as u128) * (2 * negatives_below as u128 + neg as u128);
        negatives_below += neg;
        i = j;
    }
    Ok(twice_wins as f64 / (2.0 * positives as f64 * negatives as f64))
}

/// Mean cross-entropy with probabilities clipped into `[1e-7, 1 − 1e-7]`.
/// Empty input gives NaN.
pub fn logloss(probs: &[f64], labels: &[u8]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(LOGLOSS_CLIP, 1.0 - LOGLOSS_CLIP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / probs.len() as f64
}

/// One positive candidate against its sampled negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingEvent {
    pub positive: f64,
    pub negatives: Vec<f64>,
}

impl RankingEvent {
    /// 1-based rank of the positive; negatives scoring equal rank ahead.
    pub fn rank(&self) -> usize {
        1 + self
            .negatives
            .iter()
            .filter(|&&s| s >= self.positive)
            .count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankMetrics {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub mrr: f64,
}

pub fn rank_metrics(events: &[RankingEvent], ks: &[usize]) -> RankMetrics {
    let ranks: Vec<usize> = events.iter().map(RankingEvent::rank).collect();
    metrics_from_ranks(&ranks, ks)
}

pub fn metrics_from_ranks(ranks: &[usize], ks: &[usize]) -> RankMetrics {
    let n = ranks.len() as f64;
    let mean = |f: &dyn Fn(usize) -> f64| ranks.iter().map(|&r| f(r)).sum::<f64>() / n;
    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in ks {
        hr.insert(k, mean(&|r| if r <= k { 1.0 } else { 0.0 }));
        ndcg.insert(
            k,
            mean(&|r| {
                if r <= k {
                    1.0 / ((r + 1) as f64).log2()
                } else {
                    0.0
                }
            }),
        );
    }
    RankMetrics {
        hr,
        ndcg,
        mrr: mean(&|r| 1.0 / r as f64),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TaskKind {
    #[default]
    Ctr,
    Topn,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Ctr => "ctr",
            TaskKind::Topn => "topn",
        }
    }
}

impl FromStr for TaskKind {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ctr" => Ok(TaskKind::Ctr),
            "topn" => Ok(TaskKind::Topn),
            other => Err(EvalError::UnknownTask(other.to_string())),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ordered metric name/value pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub entries: Vec<(String, f64)>,
}

impl Report {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.iter().find(|(k, _)| k == key).map(|&(_, v)| v)
    }

    fn push(&mut self, key: impl Into<String>, value: f64) {
        self.entries.push((key.into(), value));
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TopnOptions {
    pub negatives: usize,
    pub seed: u64,
}

impl Default for TopnOptions {
    fn default() -> Self {
        Self {
            negatives: DEFAULT_NEGATIVES,
            seed: 0,
        }
    }
}

/// `m` negative item codes for one event: uniform over the non-OOV item
/// vocabulary minus the positive, without replacement when enough codes
/// exist and with replacement otherwise.
pub fn sample_negative_items(
    rng: &mut ChaCha8Rng,
    vocab_size: usize,
    positive: u32,
    m: usize,
) -> Vec<u32> {
    let pool: Vec<u32> = (1..vocab_size as u32).filter(|&c| c != positive).collect();
    if pool.is_empty() {
        return Vec::new();
    }
    if m <= pool.len() {
        sample(rng, pool.len(), m)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..m)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect()
    }
}

/// Scores `test_ids` and reports AUC and LogLoss; for top-n additionally
/// builds one ranking event per positive test row.
pub fn evaluate(
    model: &PetModel,
    table: &Table,
    index: &InvertedIndex,
    test_ids: &[usize],
    task: TaskKind,
    settings: &RetrievalSettings,
    topn: &TopnOptions,
) -> Result<Report, EvalError> {
    let item_field = match task {
        TaskKind::Topn => Some(
            table
                .schema
                .item_field_index()
                .ok_or(EvalError::NoItemField)?,
        ),
        TaskKind::Ctr => None,
    };
    let rows: Vec<&Row> = table.rows_of(test_ids).collect();
    let logits = score_rows(model, table, index, &rows, settings)?;
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let mut report = Report::default();
    report.push("auc", auc(&logits, &labels)?);
    report.push("logloss", logloss(&probs, &labels));

    if let Some(field) = item_field {
        let events = ranking_events(model, table, index, &rows, &logits, field, settings, topn)?;
        let m = rank_metrics(&events, &RANK_CUTOFFS);
        for k in RANK_CUTOFFS {
            report.push(format!("hr@{k}"), m.hr[&k]);
        }
        for k in [5, 10] {
            report.push(format!("ndcg@{k}"), m.ndcg[&k]);
        }
        report.push("mrr", m.mrr);
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn ranking_events(
    model: &PetModel,
    table: &Table,
    index: &InvertedIndex,
    rows: &[&Row],
    logits: &[f64],
    item_field: usize,
    settings: &RetrievalSettings,
    topn: &TopnOptions,
) -> Result<Vec<RankingEvent>, EvalError> {
    let vocab_size = table.vocab.size(item_field);
    if vocab_size < 2 && topn.negatives > 0 {
        return Err(EvalError::EmptyItemVocabulary);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(topn.seed);
    let mut events = Vec::new();
    for (row, &positive) in rows.iter().zip(logits) {
        if row.label != 1 {
            continue;
        }
        let codes =
            sample_negative_items(&mut rng, vocab_size, row.values[item_field], topn.negatives);
        let candidates: Vec<Row> = codes
            .into_iter()
            .map(|c| {
                let mut r = (*row).clone();
                r.values[item_field] = c;
                r
            })
            .collect();
        let refs: Vec<&Row> = candidates.iter().collect();
        let negatives = score_rows(model, table, index, &refs, settings)?;
        events.push(RankingEvent {
            positive,
            negatives,
        });
    }
    Ok(events)
}
