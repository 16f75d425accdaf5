//! Star expansion of a target row and its retrieved neighbors.
//!
//! Every row becomes a data-instance node and every distinct `(field, code)`
//! pair in the instance set becomes a feature-value node. Each incidence is
//! materialized as two directed edges, one leaving the data node and one
//! entering it, because the two orientations carry different edge
//! embeddings.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};

use thiserror::Error;

use crate::retrieval::RetrievalResult;
use crate::tabular::{Row, Table};

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("neighbor list belongs to target {found}, not {expected}")]
    TargetMismatch { expected: usize, found: usize },
    #[error("neighbor {0} is not a row of the table")]
    UnknownNeighbor(usize),
    #[error("neighbor {0} is the target itself")]
    SelfNeighbor(usize),
    #[error("neighbor {0} listed twice")]
    DuplicateNeighbor(usize),
    #[error("row {row_id} has {found} fields, expected {expected}")]
    Arity {
        row_id: usize,
        expected: usize,
        found: usize,
    },
    #[error("cannot batch an empty list of graphs")]
    EmptyBatch,
}

/// Label annotation of a data node: a retrieved row's label, or unknown for
/// the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LabelTag {
    Zero,
    One,
    Unknown,
}

impl LabelTag {
    pub fn from_label(label: u8) -> Self {
        if label == 0 {
            LabelTag::Zero
        } else {
            LabelTag::One
        }
    }

    /// Row of the label-indexed embedding tables.
    pub fn index(self) -> usize {
        match self {
            LabelTag::Zero => 0,
            LabelTag::One => 1,
            LabelTag::Unknown => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabelTag::Zero => "0",
            LabelTag::One => "1",
            LabelTag::Unknown => "unknown",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EdgeDirection {
    /// data node → feature node
    OutOfData,
    /// feature node → data node
    IntoData,
}

impl EdgeDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeDirection::OutOfData => "out_of_data",
            EdgeDirection::IntoData => "into_data",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataNode {
    pub row_id: usize,
    pub tag: LabelTag,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FeatureNode {
    pub field: usize,
    pub code: u32,
}

/// Directed edge between node indices. Data nodes occupy indices
/// `0..D` and feature nodes `D..D+|V_F|`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub direction: EdgeDirection,
    /// Tag of the incident data node.
    pub tag: LabelTag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropagationGraph {
    pub data_nodes: Vec<DataNode>,
    pub feature_nodes: Vec<FeatureNode>,
    pub edges: Vec<Edge>,
    /// Index of the target among the data nodes (always 0).
    pub target_index: usize,
    pub num_fields: usize,
}

static GRAPHS_BUILT: AtomicUsize = AtomicUsize::new(0);
static BOUND_VIOLATIONS: AtomicUsize = AtomicUsize::new(0);

/// `(graphs built, size-bound violations)` since process start.
pub fn size_bound_stats() -> (usize, usize) {
    (
        GRAPHS_BUILT.load(Ordering::Relaxed),
        BOUND_VIOLATIONS.load(Ordering::Relaxed),
    )
}

/// Builds the star-expanded graph of `target` and its neighbors. The target
/// is data node 0 with an unknown tag; neighbors follow in retrieval order
/// with their labels copied from `table`.
pub fn build_graph(
    target: &Row,
    neighbors: &RetrievalResult,
    table: &Table,
) -> Result<PropagationGraph, GraphError> {
    if neighbors.target_id != target.row_id {
        return Err(GraphError::TargetMismatch {
            expected: target.row_id,
            found: neighbors.target_id,
        });
    }
    let num_fields = target.values.len();
    let mut rows: Vec<&Row> = Vec::with_capacity(neighbors.len() + 1);
    rows.push(target);
    let mut seen = HashSet::new();
    for &id in &neighbors.neighbor_ids {
        if id == target.row_id {
            return Err(GraphError::SelfNeighbor(id));
        }
        if !seen.insert(id) {
            return Err(GraphError::DuplicateNeighbor(id));
        }
        let row = table.rows.get(id).ok_or(GraphError::UnknownNeighbor(id))?;
        rows.push(row);
    }
    build_from_rows(&rows, num_fields)
}

/// Star expansion of `rows`, whose first entry is the target.
pub fn build_from_rows(rows: &[&Row], num_fields: usize) -> Result<PropagationGraph, GraphError> {
    let num_data = rows.len();
    let mut data_nodes = Vec::with_capacity(num_data);
    let mut feature_nodes = Vec::new();
    let mut feature_index: HashMap<FeatureNode, usize> = HashMap::new();
    let mut edges = Vec::with_capacity(2 * num_data * num_fields);

    let mut incidences = Vec::with_capacity(num_data * num_fields);
    for (d, row) in rows.iter().enumerate() {
        if row.values.len() != num_fields {
            return Err(GraphError::Arity {
                row_id: row.row_id,
                expected: num_fields,
                found: row.values.len(),
            });
        }
        let tag = if d == 0 {
            LabelTag::Unknown
        } else {
            LabelTag::from_label(row.label)
        };
        data_nodes.push(DataNode {
            row_id: row.row_id,
            tag,
        });
        for (field, &code) in row.values.iter().enumerate() {
            let key = FeatureNode { field, code };
            let j = *feature_index.entry(key).or_insert_with(|| {
                feature_nodes.push(key);
                feature_nodes.len() - 1
            });
            incidences.push((d, j, tag));
        }
    }
    for (d, j, tag) in incidences {
        let f = num_data + j;
        edges.push(Edge {
            src: d,
            dst: f,
            direction: EdgeDirection::OutOfData,
            tag,
        });
        edges.push(Edge {
            src: f,
            dst: d,
            direction: EdgeDirection::IntoData,
            tag,
        });
    }

    let graph = PropagationGraph {
        data_nodes,
        feature_nodes,
        edges,
        target_index: 0,
        num_fields,
    };
    GRAPHS_BUILT.fetch_add(1, Ordering::Relaxed);
    if !graph.within_size_bounds() {
        BOUND_VIOLATIONS.fetch_add(1, Ordering::Relaxed);
        debug_assert!(false, "graph exceeds size bounds");
    }
    Ok(graph)
}

impl PropagationGraph {
    pub fn num_nodes(&self) -> usize {
        self.data_nodes.len() + self.feature_nodes.len()
    }

    /// Number of retrieved neighbors, `K`.
    pub fn num_neighbors(&self) -> usize {
        self.data_nodes.len() - 1
    }

    /// `|V| ≤ (K+1)(F+1)`, `|V_F| ≤ (K+1)F` and `|E| ≤ 2(K+1)F`.
    pub fn within_size_bounds(&self) -> bool {
        let k1 = self.data_nodes.len();
        let f = self.num_fields;
        self.num_nodes() <= k1 * (f + 1)
            && self.feature_nodes.len() <= k1 * f
            && self.edges.len() <= 2 * k1 * f
    }

    /// Hop distance of every node from the target (`usize::MAX` when
    /// unreachable).
    pub fn distances_from_target(&self) -> Vec<usize> {
        let n = self.num_nodes();
        let mut adj = vec![Vec::new(); n];
        for e in &self.edges {
            adj[e.src].push(e.dst);
        }
        let mut dist = vec![usize::MAX; n];
        dist[self.target_index] = 0;
        let mut queue = VecDeque::from([self.target_index]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// One `src dst direction label_tag` line per edge.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for e in &self.edges {
            writeln!(
                out,
                "{} {} {} {}",
                e.src,
                e.dst,
                e.direction.as_str(),
                e.tag.as_str()
            )
            .unwrap();
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Data { row_id: usize, tag: LabelTag },
    Feature { field: usize, code: u32 },
}

/// Disjoint union of several propagation graphs with flat node and edge
/// arrays. Graph `g` owns nodes `node_offsets[g]..node_offsets[g+1]` and
/// edges `edge_offsets[g]..edge_offsets[g+1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchedGraph {
    pub nodes: Vec<NodeKind>,
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    pub edge_direction: Vec<EdgeDirection>,
    pub edge_tag: Vec<LabelTag>,
    pub node_offsets: Vec<usize>,
    pub edge_offsets: Vec<usize>,
    pub target_indices: Vec<usize>,
    pub num_fields: usize,
}

impl BatchedGraph {
    pub fn num_graphs(&self) -> usize {
        self.target_indices.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edge_src.len()
    }

    /// Attention segment of each edge: its destination node.
    pub fn segment_ids(&self) -> &[usize] {
        &self.edge_dst
    }

    /// Feature nodes linked to graph `g`'s target, in field order.
    pub fn target_feature_nodes(&self, g: usize) -> Vec<usize> {
        let target = self.target_indices[g];
        (self.edge_offsets[g]..self.edge_offsets[g + 1])
            .filter(|&e| {
                self.edge_src[e] == target && self.edge_direction[e] == EdgeDirection::OutOfData
            })
            .map(|e| self.edge_dst[e])
            .collect()
    }
}

pub fn batch_graphs<'a, I>(graphs: I) -> Result<BatchedGraph, GraphError>
where
    I: IntoIterator<Item = &'a PropagationGraph>,
{
    let mut b = BatchedGraph {
        nodes: Vec::new(),
        edge_src: Vec::new(),
        edge_dst: Vec::new(),
        edge_direction: Vec::new(),
        edge_tag: Vec::new(),
        node_offsets: vec![0],
        edge_offsets: vec![0],
        target_indices: Vec::new(),
        num_fields: 0,
    };
    for g in graphs {
        if b.target_indices.is_empty() {
            b.num_fields = g.num_fields;
        }
        let offset = b.nodes.len();
        b.nodes.extend(g.data_nodes.iter().map(|d| NodeKind::Data {
            row_id: d.row_id,
            tag: d.tag,
        }));
        b.nodes
            .extend(g.feature_nodes.iter().map(|f| NodeKind::Feature {
                field: f.field,
                code: f.code,
            }));
        for e in &g.edges {
            b.edge_src.push(offset + e.src);
            b.edge_dst.push(offset + e.dst);
            b.edge_direction.push(e.direction);
            b.edge_tag.push(e.tag);
        }
        b.target_indices.push(offset + g.target_index);
        b.node_offsets.push(b.nodes.len());
        b.edge_offsets.push(b.edge_src.len());
    }
    if b.target_indices.is_empty() {
        return Err(GraphError::EmptyBatch);
    }
    Ok(b)
}
