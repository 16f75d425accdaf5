//! Built-in correctness checks: a full-model gradient check and an
//! exhaustive-scoring comparison for top-K retrieval.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport, Var};
use crate::graph::{batch_graphs, build_from_rows};
use crate::model::{Ablation, ForwardOptions, ModelConfig, ModelError, PetModel};
use crate::retrieval::{idf_value, rank_order, InvertedIndex};
use crate::tabular::{Row, OOV};

/// Shape of the gradient-check problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradProblem {
    pub batch: usize,
    pub k: usize,
    pub fields: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub vocab: u32,
}

impl Default for GradProblem {
    fn default() -> Self {
        Self {
            batch: 4,
            k: 5,
            fields: 4,
            embed_dim: 8,
            layers: 2,
            vocab: 5,
        }
    }
}

pub fn random_rows(
    rng: &mut ChaCha8Rng,
    n: usize,
    fields: usize,
    vocab: u32,
    first_id: usize,
) -> Vec<Row> {
    (0..n)
        .map(|i| Row {
            row_id: first_id + i,
            timestamp: rng.random_range(0..50),
            values: (0..fields).map(|_| rng.random_range(0..vocab)).collect(),
            label: rng.random_range(0..2),
        })
        .collect()
}

/// Central-difference check (ε = 1e-4) of every parameter of a randomly
/// initialized model on a random batch.
pub fn gradient_self_test(
    problem: GradProblem,
    ablation: Ablation,
    seed: u64,
) -> Result<GradCheckReport, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<Row>> = (0..problem.batch)
        .map(|g| {
            random_rows(
                &mut rng,
                problem.k + 1,
                problem.fields,
                problem.vocab,
                g * (problem.k + 1),
            )
        })
        .collect();
    let graphs = groups
        .iter()
        .map(|rows| build_from_rows(&rows.iter().collect::<Vec<_>>(), problem.fields))
        .collect::<Result<Vec<_>, _>>()?;
    let batch = batch_graphs(&graphs)?;
    let labels: Vec<f64> = groups.iter().map(|g| g[0].label as f64).collect();
    let model = PetModel::new(
        ModelConfig {
            embed_dim: problem.embed_dim,
            layers: problem.layers,
            mlp_hidden: vec![16, 8],
            field_sizes: vec![problem.vocab as usize; problem.fields],
            ablation,
        },
        seed,
    )?;
    grad_check(
        model.store(),
        |store, tape| -> Result<Var, ModelError> {
            let out = model.forward_on_tape(tape, store, &batch, &ForwardOptions::default())?;
            Ok(tape.bce_with_logits(out.logits, labels.clone()))
        },
        &GradCheckOptions {
            eps: 1e-4,
            tol: 1e-4,
            max_coords_per_param: None,
            seed,
        },
    )
}

/// Top-`k` by scoring every pool row, with document frequencies counted
/// directly from `pool`.
pub fn exhaustive_topk(pool: &[Row], target: &Row, k: usize) -> Vec<usize> {
    let n = pool.len();
    let idf = |f: usize, code: u32| {
        let df = pool.iter().filter(|r| r.values[f] == code).count();
        idf_value(n, df)
    };
    let mut scored: Vec<(f64, i64, usize)> = Vec::new();
    for cand in pool.iter().filter(|c| c.row_id != target.row_id) {
        let matches: Vec<usize> = (0..target.values.len())
            .filter(|&f| target.values[f] != OOV && target.values[f] == cand.values[f])
            .collect();
        if matches.is_empty() {
            continue;
        }
        let score = matches.iter().map(|&f| idf(f, target.values[f])).sum();
        scored.push((score, cand.timestamp, cand.row_id));
    }
    scored.sort_by(|&a, &b| rank_order(a, b));
    scored.into_iter().take(k).map(|(_, _, id)| id).collect()
}

/// `(matching cases, cases)` for `targets` random targets against a
/// `pool_size`-row random pool.
pub fn retrieval_self_test(
    pool_size: usize,
    targets: usize,
    k: usize,
    seed: u64,
) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = random_rows(&mut rng, pool_size, 6, 8, 0);
    let index = InvertedIndex::build(&pool).expect("non-empty pool");
    let queries = random_rows(&mut rng, targets, 6, 9, pool_size);
    let matches = queries
        .iter()
        .filter(|t| index.retrieve_topk(t, k).neighbor_ids == exhaustive_topk(&pool, t, k))
        .count();
    (matches, targets)
}
