use serde::{Deserialize, Serialize};

use super::TabularError;

/// Upper edges of equal-frequency bins.
///
/// A value's bin is the number of edges strictly below it, so equal values
/// always share a bin and the mapping is monotone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinEdges {
    num_bins: usize,
    edges: Vec<f64>,
}

impl BinEdges {
    /// Fits `num_bins − 1` edges at the empirical quantiles of `values`:
    /// edge `k` is the `⌈k·n/B⌉`-th smallest value.
    pub fn fit(values: &[f64], num_bins: usize) -> Result<Self, TabularError> {
        if num_bins == 0 {
            return Err(TabularError::Discretize(
                "num_bins must be at least 1".into(),
            ));
        }
        if values.is_empty() {
            return Err(TabularError::Discretize(
                "cannot fit bins on an empty list".into(),
            ));
        }
        if let Some(i) = values.iter().position(|v| v.is_nan()) {
            return Err(TabularError::Discretize(format!("NaN at index {i}")));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let edges = (1..num_bins)
            .map(|k| sorted[(k * n).div_ceil(num_bins) - 1])
            .collect();
        Ok(Self { num_bins, edges })
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn bin(&self, v: f64) -> u32 {
        self.edges.partition_point(|&e| e < v) as u32
    }

    pub(crate) fn from_parts(num_bins: usize, edges: Vec<f64>) -> Result<Self, TabularError> {
        if num_bins == 0 || edges.len() + 1 != num_bins || edges.windows(2).any(|w| !(w[0] <= w[1]))
        {
            return Err(TabularError::Discretize("inconsistent bin edges".into()));
        }
        Ok(Self { num_bins, edges })
    }
}

/// Equal-frequency discretization of `values` into codes in `[0, num_bins)`.
pub fn discretize(values: &[f64], num_bins: usize) -> Result<Vec<u32>, TabularError> {
    let edges = BinEdges::fit(values, num_bins)?;
    Ok(values.iter().map(|&v| edges.bin(v)).collect())
}
