use serde::{Deserialize, Serialize};

use super::TabularError;

/// Fractions of rows assigned to the retrieval, train and test pools.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub retrieval: f64,
    pub train: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            retrieval: 0.4,
            train: 0.4,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn new(retrieval: f64, train: f64, test: f64) -> Self {
        Self {
            retrieval,
            train,
            test,
        }
    }

    pub fn validate(&self) -> Result<(), TabularError> {
        let parts = [self.retrieval, self.train, self.test];
        if parts.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(TabularError::Split(format!(
                "fractions must be non-negative: {parts:?}"
            )));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(TabularError::Split(format!(
                "fractions sum to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Disjoint row-id pools, each listed in `(timestamp, row_id)` order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolSplit {
    pub retrieval: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl PoolSplit {
    pub fn len(&self) -> usize {
        self.retrieval.len() + self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// Guards floor/ceil against products like 0.2 * 10 = 2.0000000000000004.
const ROUNDING_SLACK: f64 = 1e-9;

/// Splits rows by global time: the earliest `⌊rN⌋` rows form the retrieval
/// pool, the latest `⌈sN⌉` the test pool, and the rest the train pool.
/// Timestamp ties are broken by ascending row id.
///
/// `rows` holds `(row_id, timestamp)` pairs.
pub fn temporal_split(
    rows: &[(usize, i64)],
    fractions: SplitFractions,
) -> Result<PoolSplit, TabularError> {
    fractions.validate()?;
    let n = rows.len();
    let mut order: Vec<(i64, usize)> = rows.iter().map(|&(id, ts)| (ts, id)).collect();
    order.sort_unstable();

    let n_retrieval = ((fractions.retrieval * n as f64 + ROUNDING_SLACK).floor() as usize).min(n);
    let n_test = ((fractions.test * n as f64 - ROUNDING_SLACK).ceil().max(0.0) as usize)
        .min(n - n_retrieval);
    let n_train = n - n_retrieval - n_test;

    if n >= 3 {
        for (name, frac, size) in [
            ("retrieval", fractions.retrieval, n_retrieval),
            ("train", fractions.train, n_train),
            ("test", fractions.test, n_test),
        ] {
            if frac > 0.0 && size == 0 {
                return Err(TabularError::Split(format!(
                    "{name} pool is empty for fraction {frac} with {n} rows"
                )));
            }
        }
    }

    let ids: Vec<usize> = order.into_iter().map(|(_, id)| id).collect();
    Ok(PoolSplit {
        retrieval: ids[..n_retrieval].to_vec(),
        train: ids[n_retrieval..n_retrieval + n_train].to_vec(),
        test: ids[n_retrieval + n_train..].to_vec(),
    })
}
