//! Label-aware propagation over a batched star-expansion graph.
//!
//! Per layer `l`, for every directed edge `i → j`:
//!
//! ```text
//! m_ij = (e_ij ⊙ h_i) ∥ h_i
//! a_ij = softmax over i ∈ N(j) of (W_Q h_j) · (W_K m_ij)
//! n_j  = Σ_i a_ij · W_V m_ij
//! h_j  ← ReLU(W_N (h_j ∥ n_j))
//! e_ij ← ReLU(W_E (h_i ∥ h_j ∥ e_ij))      (using the updated h)
//! ```
//!
//! Feature nodes start from their value embedding, retrieved data nodes
//! from their label embedding and the target from zero. Edges start from
//! the label embedding of their incident data node, with separate tables
//! for edges leaving and entering data nodes. The prediction is an MLP over
//! the target's final embedding.

mod checkpoint;
mod export;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};
pub use export::{export_embeddings, EmbeddingRows};

use crate::autodiff::{AutodiffError, Grads, ParamId, ParamStore, Tape, Tensor, Var};
use crate::codec::DecodeError;
use crate::graph::{BatchedGraph, EdgeDirection, GraphError, LabelTag, NodeKind};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("unknown ablation {0:?} (expected none, no_edge_labels or no_node_labels)")]
    UnknownAblation(String),
    #[error("node {node}: {message}")]
    BadNode { node: usize, message: String },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint does not match the model: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint: {0}")]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Model variants: the full model and the two label-usage ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Ablation {
    #[default]
    None,
    /// Messages are the bare source embedding and edges are never
    /// initialized or updated.
    NoEdgeLabels,
    /// All data nodes, retrieved ones included, start from zero; edge
    /// labels are kept.
    NoNodeLabels,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [
        Ablation::None,
        Ablation::NoEdgeLabels,
        Ablation::NoNodeLabels,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoEdgeLabels => "no_edge_labels",
            Ablation::NoNodeLabels => "no_node_labels",
        }
    }

    fn uses_edges(self) -> bool {
        self != Ablation::NoEdgeLabels
    }
}

impl FromStr for Ablation {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| ModelError::UnknownAblation(s.to_string()))
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

const MAX_SCALARS: usize = 1 << 31;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub layers: usize,
    /// Hidden widths of the readout MLP; the output width 1 is implicit.
    pub mlp_hidden: Vec<usize>,
    /// Code count (including OOV) of every feature field.
    pub field_sizes: Vec<usize>,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim == 0 {
            return Err(ModelError::Config("embed_dim must be positive".into()));
        }
        if self.field_sizes.is_empty() || self.field_sizes.contains(&0) {
            return Err(ModelError::Config(
                "every field needs at least one code".into(),
            ));
        }
        if self.mlp_hidden.contains(&0) {
            return Err(ModelError::Config("MLP widths must be positive".into()));
        }
        let too_big = || ModelError::Config("parameter count overflows".into());
        let d = self.embed_dim;
        let vocab = self
            .field_sizes
            .iter()
            .try_fold(0usize, |acc, &s| acc.checked_add(s))
            .ok_or_else(too_big)?;
        let mut total = vocab.checked_mul(d).ok_or_else(too_big)?;
        let per_layer = d
            .checked_mul(d)
            .and_then(|dd| dd.checked_mul(9))
            .ok_or_else(too_big)?;
        total = per_layer
            .checked_mul(self.layers)
            .and_then(|l| l.checked_add(total))
            .ok_or_else(too_big)?;
        let mut fan_in = d;
        for &w in &self.mlp_hidden {
            total = w
                .checked_mul(fan_in + 1)
                .and_then(|p| p.checked_add(total))
                .ok_or_else(too_big)?;
            fan_in = w;
        }
        if total > MAX_SCALARS {
            return Err(ModelError::Config(format!(
                "{total} parameters exceed the limit of {MAX_SCALARS}"
            )));
        }
        Ok(())
    }

    /// Parameter names and shapes in registration order.
    pub fn param_shapes(&self) -> Vec<(String, usize, usize)> {
        let d = self.embed_dim;
        let msg = if self.ablation.uses_edges() { 2 * d } else { d };
        let mut shapes = vec![
            ("phi_x".to_string(), self.field_sizes.iter().sum(), d),
            ("phi_y".to_string(), 2, d),
        ];
        if self.ablation.uses_edges() {
            shapes.push(("phi_in".to_string(), 3, d));
            shapes.push(("phi_out".to_string(), 3, d));
        }
        for l in 0..self.layers {
            shapes.push((format!("layer{l}.w_q"), d, d));
            shapes.push((format!("layer{l}.w_k"), d, msg));
            shapes.push((format!("layer{l}.w_v"), d, msg));
            shapes.push((format!("layer{l}.w_n"), d, 2 * d));
            if self.ablation.uses_edges() {
                shapes.push((format!("layer{l}.w_e"), d, 3 * d));
            }
        }
        let mut fan_in = d;
        for (i, &width) in self
            .mlp_hidden
            .iter()
            .chain(std::iter::once(&1))
            .enumerate()
        {
            shapes.push((format!("mlp{i}.weight"), width, fan_in));
            shapes.push((format!("mlp{i}.bias"), 1, width));
            fan_in = width;
        }
        shapes
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIds {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_n: ParamId,
    w_e: Option<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
struct ParamIds {
    phi_x: ParamId,
    phi_y: ParamId,
    phi_in: Option<ParamId>,
    phi_out: Option<ParamId>,
    layers: Vec<LayerIds>,
    mlp: Vec<(ParamId, ParamId)>,
}

impl ParamIds {
    fn resolve(config: &ModelConfig, store: &ParamStore) -> Result<Self, ModelError> {
        let get = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| ModelError::ShapeMismatch(format!("missing parameter {name}")))
        };
        let opt = |name: &str| -> Result<Option<ParamId>, ModelError> {
            if config.ablation.uses_edges() {
                get(name).map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(Self {
            phi_x: get("phi_x")?,
            phi_y: get("phi_y")?,
            phi_in: opt("phi_in")?,
            phi_out: opt("phi_out")?,
            layers: (0..config.layers)
                .map(|l| {
                    Ok(LayerIds {
                        w_q: get(&format!("layer{l}.w_q"))?,
                        w_k: get(&format!("layer{l}.w_k"))?,
                        w_v: get(&format!("layer{l}.w_v"))?,
                        w_n: get(&format!("layer{l}.w_n"))?,
                        w_e: opt(&format!("layer{l}.w_e"))?,
                    })
                })
                .collect::<Result<_, ModelError>>()?,
            mlp: (0..=config.mlp_hidden.len())
                .map(|i| {
                    Ok((
                        get(&format!("mlp{i}.weight"))?,
                        get(&format!("mlp{i}.bias"))?,
                    ))
                })
                .collect::<Result<_, ModelError>>()?,
        })
    }
}

/// Recorded values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `B × 1` target logits.
    pub logits: Var,
    /// Final node embeddings `h^(L)`, one row per batched node.
    pub node_states: Var,
    /// Per-layer `E × 1` attention weights.
    pub attention: Vec<Var>,
}

/// Initial-state overrides used to probe the propagation path: masked nodes
/// and edges start from the zero vector.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    pub zero_nodes: Option<Vec<bool>>,
    pub zero_edges: Option<Vec<bool>>,
}

/// Model configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PetModel {
    config: ModelConfig,
    store: ParamStore,
    ids: ParamIds,
    field_offsets: Vec<usize>,
}

impl PetModel {
    /// Fresh parameters: embeddings uniform in `±1/√d`, weight matrices
    /// Glorot-uniform, biases zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let emb_bound = 1.0 / (config.embed_dim as f64).sqrt();
        for (name, rows, cols) in config.param_shapes() {
            let bound = if name.starts_with("phi_") {
                emb_bound
            } else if name.ends_with(".bias") {
                0.0
            } else {
                (6.0 / (rows + cols) as f64).sqrt()
            };
            let data = (0..rows * cols)
                .map(|_| {
                    if bound > 0.0 {
                        rng.random_range(-bound..bound)
                    } else {
                        0.0
                    }
                })
                .collect();
            store.insert(name, Tensor::from_vec(rows, cols, data))?;
        }
        Self::from_store(config, store)
    }

    /// Wraps an existing store after checking every name and shape.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != store.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {} parameters, found {}",
                shapes.len(),
                store.len()
            )));
        }
        for ((name, rows, cols), (_, found_name, t)) in shapes.iter().zip(store.iter()) {
            if name != found_name || t.shape() != (*rows, *cols) {
                return Err(ModelError::ShapeMismatch(format!(
                    "expected {name} {rows}x{cols}, found {found_name} {}x{}",
                    t.rows(),
                    t.cols()
                )));
            }
        }
        let ids = ParamIds::resolve(&config, &store)?;
        let mut field_offsets = Vec::with_capacity(config.field_sizes.len());
        let mut acc = 0;
        for &s in &config.field_sizes {
            field_offsets.push(acc);
            acc += s;
        }
        Ok(Self {
            config,
            store,
            ids,
            field_offsets,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn initial_node_rows(
        &self,
        graph: &BatchedGraph,
        opts: &ForwardOptions,
    ) -> Result<Vec<usize>, ModelError> {
        let feature_rows: usize = self.config.field_sizes.iter().sum();
        let zero_row = feature_rows + 2;
        let mut is_target = vec![false; graph.num_nodes()];
        for &t in &graph.target_indices {
            is_target[t] = true;
        }
        let mut rows = Vec::with_capacity(graph.num_nodes());
        for (i, node) in graph.nodes.iter().enumerate() {
            let row =
                match *node {
                    NodeKind::Feature { field, code } => {
                        let size = *self.config.field_sizes.get(field).ok_or_else(|| {
                            ModelError::BadNode {
                                node: i,
                                message: format!(
                                    "field {field} outside the model's {} fields",
                                    self.config.field_sizes.len()
                                ),
                            }
                        })?;
                        if code as usize >= size {
                            return Err(ModelError::BadNode {
                                node: i,
                                message: format!(
                                    "code {code} outside field {field} vocabulary of {size}"
                                ),
                            });
                        }
                        self.field_offsets[field] + code as usize
                    }
                    NodeKind::Data { tag, .. } => match (tag, is_target[i]) {
                        (LabelTag::Unknown, true) => zero_row,
                        (LabelTag::Unknown, false) => {
                            return Err(ModelError::BadNode {
                                node: i,
                                message: "label tag unknown on a retrieved data node".into(),
                            })
                        }
                        (_, true) => {
                            return Err(ModelError::BadNode {
                                node: i,
                                message: "target data node carries a label".into(),
                            })
                        }
                        _ if self.config.ablation == Ablation::NoNodeLabels => zero_row,
                        (t, false) => feature_rows + t.index(),
                    },
                };
            rows.push(row);
        }
        if let Some(mask) = &opts.zero_nodes {
            for (r, &z) in rows.iter_mut().zip(mask) {
                if z {
                    *r = zero_row;
                }
            }
        }
        Ok(rows)
    }

    fn initial_edge_rows(&self, graph: &BatchedGraph, opts: &ForwardOptions) -> Vec<usize> {
        let mut rows: Vec<usize> = graph
            .edge_direction
            .iter()
            .zip(&graph.edge_tag)
            .map(|(dir, tag)| match dir {
                EdgeDirection::OutOfData => tag.index(),
                EdgeDirection::IntoData => 3 + tag.index(),
            })
            .collect();
        if let Some(mask) = &opts.zero_edges {
            for (r, &z) in rows.iter_mut().zip(mask) {
                if z {
                    *r = 6;
                }
            }
        }
        rows
    }

    /// Records the forward pass on `tape`, reading parameters from `store`
    /// (normally [`PetModel::store`]; gradient checks pass perturbed copies).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        graph: &BatchedGraph,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput, ModelError> {
        let d = self.config.embed_dim;
        let n = graph.num_nodes();
        let ids = &self.ids;
        let src: Arc<[usize]> = graph.edge_src.clone().into();
        let dst: Arc<[usize]> = graph.edge_dst.clone().into();

        let phi_x = tape.param(store, ids.phi_x);
        let phi_y = tape.param(store, ids.phi_y);
        let zero = tape.constant(Tensor::zeros(1, d));
        let node_table = tape.concat_rows(&[phi_x, phi_y, zero]);
        let mut h = tape.embedding_lookup(node_table, self.initial_node_rows(graph, opts)?);

        let mut e = match (ids.phi_in, ids.phi_out) {
            (Some(pin), Some(pout)) => {
                let phi_in = tape.param(store, pin);
                let phi_out = tape.param(store, pout);
                let zero = tape.constant(Tensor::zeros(1, d));
                let edge_table = tape.concat_rows(&[phi_in, phi_out, zero]);
                Some(tape.embedding_lookup(edge_table, self.initial_edge_rows(graph, opts)))
            }
            _ => None,
        };

        let mut attention = Vec::with_capacity(self.config.layers);
        for layer in &ids.layers {
            let h_src = tape.gather_rows(h, src.clone());
            let m = match e {
                Some(e) => {
                    let prod = tape.hadamard(e, h_src);
                    tape.concat_cols(&[prod, h_src])
                }
                None => h_src,
            };
            let w_q = tape.param(store, layer.w_q);
            let w_k = tape.param(store, layer.w_k);
            let w_v = tape.param(store, layer.w_v);
            let q = tape.linear(h, w_q);
            let q_dst = tape.gather_rows(q, dst.clone());
            let k = tape.linear(m, w_k);
            let v = tape.linear(m, w_v);
            let qk = tape.hadamard(q_dst, k);
            let scores = tape.row_sum(qk);
            let a = tape.segment_softmax(scores, dst.clone());
            attention.push(a);
            let agg = tape.segment_weighted_sum(a, v, dst.clone(), n);

            let w_n = tape.param(store, layer.w_n);
            let cat = tape.concat_cols(&[h, agg]);
            let pre = tape.linear(cat, w_n);
            h = tape.relu(pre);

            if let (Some(e_prev), Some(w_e)) = (e, layer.w_e) {
                let hs = tape.gather_rows(h, src.clone());
                let hd = tape.gather_rows(h, dst.clone());
                let cat = tape.concat_cols(&[hs, hd, e_prev]);
                let w_e = tape.param(store, w_e);
                let pre = tape.linear(cat, w_e);
                e = Some(tape.relu(pre));
            }
        }

        let mut x = tape.gather_rows(h, graph.target_indices.clone());
        let last = ids.mlp.len() - 1;
        for (i, &(w, b)) in ids.mlp.iter().enumerate() {
            let w = tape.param(store, w);
            let b = tape.param(store, b);
            let lin = tape.linear(x, w);
            x = tape.add_row(lin, b);
            if i < last {
                x = tape.relu(x);
            }
        }
        Ok(ForwardOutput {
            logits: x,
            node_states: h,
            attention,
        })
    }

    /// Target logits for every graph in the batch.
    pub fn predict_logits(&self, graph: &BatchedGraph) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let out =
            self.forward_on_tape(&mut tape, &self.store, graph, &ForwardOptions::default())?;
        Ok(tape.value(out.logits).data().to_vec())
    }

    /// Summed logit cross-entropy of the batch and its parameter gradients.
    pub fn loss_and_grads(
        &self,
        graph: &BatchedGraph,
        labels: &[f64],
    ) -> Result<(f64, Grads), ModelError> {
        let mut tape = Tape::new();
        let out =
            self.forward_on_tape(&mut tape, &self.store, graph, &ForwardOptions::default())?;
        let loss = tape.bce_with_logits(out.logits, labels.to_vec());
        tape.backward(loss)?;
        Ok((tape.value(loss).item(), tape.param_grads(&self.store)?))
    }
}

/// `Σ_t BCE(logit_t, y_t)` in the stable logit form.
pub fn summed_loss(logits: &[f64], labels: &[f64]) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| crate::autodiff::bce_with_logits(z, y))
        .sum()
}

#[cfg(test)]
mod tests;
