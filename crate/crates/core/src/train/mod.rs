//! Mini-batch training with Adam, validation-based early stopping and
//! best-model selection.

mod adam;

use std::collections::BTreeMap;
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};

use crate::config::via_str;
use crate::eval::{auc, logloss, EvalError};
use crate::graph::{batch_graphs, build_graph, GraphError, PropagationGraph};
use crate::model::{Ablation, ModelConfig, ModelError, PetModel};
use crate::retrieval::{InvertedIndex, RetrievalResult, RetrievalScheme};
use crate::tabular::{PoolSplit, Row, Table};

/// Graphs per forward pass when only scoring.
pub const SCORE_BATCH: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("NaN gradient in parameter {0}")]
    NanGradient(String),
    #[error("loss diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("train pool is empty")]
    EmptyTrainPool,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl From<GraphError> for TrainError {
    fn from(e: GraphError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub mlp_hidden: Vec<usize>,
    pub k: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub l2: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    #[serde(with = "via_str")]
    pub ablation: Ablation,
    #[serde(with = "via_str")]
    pub retrieval: RetrievalScheme,
    /// Latest share of the train pool held out for early stopping.
    pub val_fraction: f64,
    /// Also stop once the AUC over the fitted rows reaches this value.
    pub target_train_auc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            layers: 3,
            mlp_hidden: vec![200, 80],
            k: 10,
            batch_size: 100,
            lr: 5e-4,
            l2: 1e-4,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            ablation: Ablation::None,
            retrieval: RetrievalScheme::Relevance,
            val_fraction: 0.1,
            target_train_auc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad("l2 must be non-negative");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if self.mlp_hidden.contains(&0) {
            return bad("MLP widths must be positive");
        }
        Ok(())
    }

    pub fn model_config(&self, field_sizes: Vec<usize>) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            layers: self.layers,
            mlp_hidden: self.mlp_hidden.clone(),
            field_sizes,
            ablation: self.ablation,
        }
    }

    pub fn retrieval_settings(&self) -> RetrievalSettings {
        RetrievalSettings {
            k: self.k,
            scheme: self.retrieval,
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetrievalSettings {
    pub k: usize,
    pub scheme: RetrievalScheme,
    pub seed: u64,
}

/// Retrieval results for every target in `ids`, computed once and reused
/// across epochs.
pub fn retrieval_cache_build(
    ids: &[usize],
    table: &Table,
    index: &InvertedIndex,
    settings: &RetrievalSettings,
) -> BTreeMap<usize, RetrievalResult> {
    ids.iter()
        .map(|&id| {
            (
                id,
                index.retrieve(table.row(id), settings.k, settings.scheme, settings.seed),
            )
        })
        .collect()
}

/// Retrieval followed by star expansion for one target row, which need not
/// belong to the table.
pub fn target_graph(
    table: &Table,
    index: &InvertedIndex,
    target: &Row,
    settings: &RetrievalSettings,
) -> Result<PropagationGraph, GraphError> {
    let neighbors = index.retrieve(target, settings.k, settings.scheme, settings.seed);
    build_graph(target, &neighbors, table)
}

/// Model logits for arbitrary target rows.
pub fn score_rows(
    model: &PetModel,
    table: &Table,
    index: &InvertedIndex,
    rows: &[&Row],
    settings: &RetrievalSettings,
) -> Result<Vec<f64>, ModelError> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(SCORE_BATCH) {
        let graphs = chunk
            .iter()
            .map(|r| target_graph(table, index, r, settings))
            .collect::<Result<Vec<_>, _>>()?;
        out.extend(model.predict_logits(&batch_graphs(&graphs)?)?);
    }
    Ok(out)
}

fn score_graphs(model: &PetModel, graphs: &[PropagationGraph]) -> Result<Vec<f64>, ModelError> {
    let mut out = Vec::with_capacity(graphs.len());
    for chunk in graphs.chunks(SCORE_BATCH) {
        out.extend(model.predict_logits(&batch_graphs(chunk)?)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-row cross-entropy over the epoch's batches.
    pub mean_loss: f64,
    /// NaN when the validation slice is empty or single-class.
    pub val_auc: f64,
    pub train_auc: Option<f64>,
    pub elapsed_seconds: f64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        let mut line = format!(
            "epoch={} mean_loss={} val_auc={}",
            self.epoch, self.mean_loss, self.val_auc
        );
        if let Some(a) = self.train_auc {
            line.push_str(&format!(" train_auc={a}"));
        }
        line.push_str(&format!(" elapsed_seconds={:.3}", self.elapsed_seconds));
        line
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation score.
    pub model: PetModel,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    /// Highest AUC over the fitted rows, when tracked.
    pub best_train_auc: Option<f64>,
}

/// Train pool ids in time order, split into the fitted part and the
/// validation slice (the latest `val_fraction`).
pub fn validation_split(
    table: &Table,
    train_ids: &[usize],
    val_fraction: f64,
) -> (Vec<usize>, Vec<usize>) {
    let mut ids = train_ids.to_vec();
    ids.sort_by_key(|&id| (table.row(id).timestamp, id));
    let n_val =
        ((val_fraction * ids.len() as f64).round() as usize).min(ids.len().saturating_sub(1));
    let val = ids.split_off(ids.len() - n_val);
    (ids, val)
}

fn graphs_for(
    ids: &[usize],
    table: &Table,
    index: &InvertedIndex,
    settings: &RetrievalSettings,
) -> Result<Vec<PropagationGraph>, GraphError> {
    let cache = retrieval_cache_build(ids, table, index, settings);
    ids.iter()
        .map(|id| build_graph(table.row(*id), &cache[id], table))
        .collect()
}

/// AUC when both classes are present, otherwise NaN.
fn auc_or_nan(scores: &[f64], labels: &[u8]) -> f64 {
    auc(scores, labels).unwrap_or(f64::NAN)
}

/// Selection score of a validation pass: AUC, or negative LogLoss when the
/// slice is single-class.
fn selection_score(logits: &[f64], labels: &[u8]) -> f64 {
    match auc(logits, labels) {
        Ok(a) => a,
        Err(_) => {
            let probs: Vec<f64> = logits
                .iter()
                .map(|&z| crate::autodiff::sigmoid(z))
                .collect();
            -logloss(&probs, labels)
        }
    }
}

pub fn train(
    table: &Table,
    split: &PoolSplit,
    index: &InvertedIndex,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(TrainError::EmptyTrainPool);
    }
    let start = Instant::now();
    let settings = config.retrieval_settings();
    let (fit_ids, val_ids) = validation_split(table, &split.train, config.val_fraction);
    let fit_graphs = graphs_for(&fit_ids, table, index, &settings)?;
    let val_graphs = graphs_for(&val_ids, table, index, &settings)?;
    let fit_labels: Vec<u8> = fit_ids.iter().map(|&id| table.row(id).label).collect();
    let val_labels: Vec<u8> = val_ids.iter().map(|&id| table.row(id).label).collect();

    let mut model = PetModel::new(config.model_config(table.vocab.sizes()), config.seed)?;
    let mut adam = AdamState::new(model.store());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..fit_ids.len()).collect();

    let mut records = Vec::new();
    let mut best: Option<(f64, usize, PetModel)> = None;
    let mut best_train_auc: Option<f64> = None;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let total_loss = run_epoch(
            &mut model,
            &mut adam,
            &fit_graphs,
            &fit_labels,
            &order,
            config,
            epoch,
        )?;

        let (val_auc, score) = if val_graphs.is_empty() {
            (f64::NAN, -total_loss)
        } else {
            let logits = score_graphs(&model, &val_graphs)?;
            (
                auc_or_nan(&logits, &val_labels),
                selection_score(&logits, &val_labels),
            )
        };
        let train_auc = match config.target_train_auc {
            Some(_) => {
                let a = auc_or_nan(&score_graphs(&model, &fit_graphs)?, &fit_labels);
                best_train_auc = Some(best_train_auc.map_or(a, |b: f64| b.max(a)));
                Some(a)
            }
            None => None,
        };
        let record = EpochRecord {
            epoch,
            mean_loss: total_loss / fit_ids.len() as f64,
            val_auc,
            train_auc,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        };
        log::debug!("{}", record.to_line());
        on_epoch(&record);
        records.push(record);

        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, model.clone()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        let reached = matches!((config.target_train_auc, train_auc), (Some(t), Some(a)) if a >= t);
        if reached || epoch - best_epoch > config.patience {
            break;
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best_val_auc: records[best_epoch - 1].val_auc,
        model: best_model,
        records,
        best_epoch,
        best_train_auc,
    })
}

/// One pass over `order`. Batches are assembled on a producer thread while
/// the caller runs forward, backward and the optimizer step.
fn run_epoch(
    model: &mut PetModel,
    adam: &mut AdamState,
    graphs: &[PropagationGraph],
    labels: &[u8],
    order: &[usize],
    config: &TrainConfig,
    epoch: usize,
) -> Result<f64, TrainError> {
    let (tx, rx) = sync_channel(2);
    std::thread::scope(|scope| {
        scope.spawn(move || {
            for batch in order.chunks(config.batch_size) {
                let built = batch_graphs(batch.iter().map(|&i| &graphs[i]));
                let y: Vec<f64> = batch.iter().map(|&i| labels[i] as f64).collect();
                if tx.send(built.map(|b| (b, y))).is_err() {
                    break;
                }
            }
        });
        let mut total = 0.0;
        for (b, msg) in rx.into_iter().enumerate() {
            let (batched, y) = msg?;
            let (loss, grads) = model.loss_and_grads(&batched, &y)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: b + 1,
                });
            }
            adam_step(model.store_mut(), &grads, adam, config.lr, config.l2)?;
            total += loss;
        }
        Ok(total)
    })
}

#[cfg(test)]
mod tests;
