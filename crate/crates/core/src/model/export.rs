use super::{ForwardOptions, ModelError, PetModel};
use crate::autodiff::Tape;
use crate::graph::BatchedGraph;

/// Final-layer embeddings of a set of targets, each tagged with its label.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingRows {
    /// Target data-node embedding, `d` values per row.
    pub data: Vec<Vec<f64>>,
    /// The target's feature-node embeddings concatenated in field order,
    /// `F·d` values per row.
    pub feature: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl EmbeddingRows {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn extend(&mut self, other: EmbeddingRows) {
        self.data.extend(other.data);
        self.feature.extend(other.feature);
        self.labels.extend(other.labels);
    }

    /// Tab-separated rows: the embedding values followed by the label.
    pub fn data_tsv(&self) -> String {
        tsv(&self.data, &self.labels)
    }

    pub fn feature_tsv(&self) -> String {
        tsv(&self.feature, &self.labels)
    }
}

fn tsv(rows: &[Vec<f64>], labels: &[u8]) -> String {
    let mut out = String::new();
    for (row, label) in rows.iter().zip(labels) {
        for v in row {
            out.push_str(&v.to_string());
            out.push('\t');
        }
        out.push_str(&label.to_string());
        out.push('\n');
    }
    out
}

/// Runs the model over `graph` and collects every target's embeddings.
pub fn export_embeddings(
    model: &PetModel,
    graph: &BatchedGraph,
    labels: &[u8],
) -> Result<EmbeddingRows, ModelError> {
    let mut tape = Tape::new();
    let out = model.forward_on_tape(&mut tape, model.store(), graph, &ForwardOptions::default())?;
    let h = tape.value(out.node_states);
    let mut rows = EmbeddingRows::default();
    for (g, &t) in graph.target_indices.iter().enumerate() {
        rows.data.push(h.row(t).to_vec());
        rows.feature.push(
            graph
                .target_feature_nodes(g)
                .into_iter()
                .flat_map(|f| h.row(f).to_vec())
                .collect(),
        );
        rows.labels.push(labels[g]);
    }
    Ok(rows)
}
