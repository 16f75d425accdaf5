use std::sync::Arc;

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{axpy, dot};
use super::{AutodiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Gather { src: Var, idx: Arc<[usize]> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Linear { x: Var, w: Var },
    AddRow { x: Var, bias: Var },
    Add(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    RowSum(Var),
    SegmentSoftmax { x: Var, seg: Arc<[usize]> },
    SegmentWeightedSum { w: Var, v: Var, seg: Arc<[usize]> },
    BceWithLogits { z: Var, labels: Arc<[f64]> },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Dynamic reverse-mode tape.
///
/// Every operation appends a node holding its forward value. Nodes are only
/// ever appended, so node order is a valid topological order and the
/// backward sweep simply walks it in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    adjoints: Option<Vec<Option<Tensor>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(self.adjoints.is_none(), "recording after backward");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Records a snapshot of a stored parameter as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    /// Row gather: `out[i] = src[idx[i]]`. The adjoint scatter-adds back.
    pub fn gather_rows(&mut self, src: Var, idx: impl Into<Arc<[usize]>>) -> Var {
        let idx: Arc<[usize]> = idx.into();
        let s = self.value(src);
        let cols = s.cols();
        let mut out = Tensor::zeros(idx.len(), cols);
        for (i, &j) in idx.iter().enumerate() {
            assert!(j < s.rows(), "gather index {j} out of range {}", s.rows());
            out.row_mut(i).copy_from_slice(s.row(j));
        }
        self.push(out, Op::Gather { src, idx })
    }

    /// Embedding lookup is a gather whose source is a parameter table.
    pub fn embedding_lookup(&mut self, table: Var, idx: impl Into<Arc<[usize]>>) -> Var {
        self.gather_rows(table, idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
        }
        self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            let c = t.cols();
            for r in 0..rows {
                out.row_mut(r)[offset..offset + c].copy_from_slice(t.row(r));
            }
            offset += c;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// `x · wᵀ` for `x: n×a`, `w: b×a`, giving `n×b`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(
            xv.cols(),
            wv.cols(),
            "linear: {:?} · {:?}ᵀ",
            xv.shape(),
            wv.shape()
        );
        let mut out = Tensor::zeros(xv.rows(), wv.rows());
        for i in 0..xv.rows() {
            let xi = xv.row(i);
            let oi = out.row_mut(i);
            for (j, o) in oi.iter_mut().enumerate() {
                *o = dot(xi, wv.row(j));
            }
        }
        self.push(out, Op::Linear { x, w })
    }

    /// Adds a `1×c` row vector to every row of an `n×c` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert_eq!(bv.rows(), 1);
        assert_eq!(xv.cols(), bv.cols());
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow { x, bias })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let mut out = av.clone();
        out.add_assign(bv);
        self.push(out, Op::Add(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "hadamard shape mismatch");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        self.push(out, Op::Hadamard(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// Per-row sum: `n×c → n×1`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows()).map(|r| xv.row(r).iter().sum()).collect();
        let out = Tensor::from_vec(xv.rows(), 1, data);
        self.push(out, Op::RowSum(x))
    }

    /// Softmax of an `n×1` column within segments.
    ///
    /// `seg[i]` is the segment of entry `i`. Each segment is normalized
    /// independently after subtracting its maximum. Accumulation runs over
    /// entries in index order.
    pub fn segment_softmax(&mut self, x: Var, seg: impl Into<Arc<[usize]>>) -> Var {
        let seg: Arc<[usize]> = seg.into();
        let xv = self.value(x);
        assert_eq!(xv.cols(), 1, "segment_softmax expects a column");
        assert_eq!(xv.rows(), seg.len());
        let out = segment_softmax_values(xv.data(), &seg);
        let out = Tensor::from_vec(seg.len(), 1, out);
        self.push(out, Op::SegmentSoftmax { x, seg })
    }

    /// `out[s] = Σ_{i: seg[i]=s} w[i] · v[i]` for `w: n×1`, `v: n×c`,
    /// giving `num_segments × c`. Segments with no entries are zero rows.
    pub fn segment_weighted_sum(
        &mut self,
        w: Var,
        v: Var,
        seg: impl Into<Arc<[usize]>>,
        num_segments: usize,
    ) -> Var {
        let seg: Arc<[usize]> = seg.into();
        let (wv, vv) = (self.value(w), self.value(v));
        assert_eq!(wv.cols(), 1);
        assert_eq!(wv.rows(), seg.len());
        assert_eq!(vv.rows(), seg.len());
        let mut out = Tensor::zeros(num_segments, vv.cols());
        for (i, &s) in seg.iter().enumerate() {
            axpy(wv.data()[i], vv.row(i), out.row_mut(s));
        }
        self.push(out, Op::SegmentWeightedSum { w, v, seg })
    }

    /// Summed binary cross-entropy of an `n×1` logit column against 0/1
    /// labels, in the overflow-free form `max(z,0) − z·y + ln(1+e^{−|z|})`.
    pub fn bce_with_logits(&mut self, z: Var, labels: impl Into<Arc<[f64]>>) -> Var {
        let labels: Arc<[f64]> = labels.into();
        let zv = self.value(z);
        assert_eq!(zv.cols(), 1);
        assert_eq!(zv.rows(), labels.len());
        let total = zv
            .data()
            .iter()
            .zip(labels.iter())
            .map(|(&z, &y)| bce_with_logits(z, y))
            .sum();
        self.push(Tensor::scalar(total), Op::BceWithLogits { z, labels })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().sum::<f64>() / xv.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// Reverse sweep from a scalar root. May be called once per tape.
    pub fn backward(&mut self, root: Var) -> Result<(), AutodiffError> {
        if self.adjoints.is_some() {
            return Err(AutodiffError::AlreadyBackpropagated);
        }
        let shape = self.value(root).shape();
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarRoot {
                rows: shape.0,
                cols: shape.1,
            });
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        self.adjoints = Some(adj);
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Gather { src, idx } => {
                let a = slot(adj, *src, &self.nodes);
                for (r, &j) in idx.iter().enumerate() {
                    axpy(1.0, g.row(r), a.row_mut(j));
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let a = slot(adj, p, &self.nodes);
                    axpy(1.0, &g.data()[offset..offset + n], a.data_mut());
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let a = slot(adj, p, &self.nodes);
                    for r in 0..g.rows() {
                        axpy(1.0, &g.row(r)[offset..offset + c], a.row_mut(r));
                    }
                    offset += c;
                }
            }
            Op::Linear { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                {
                    let ax = slot(adj, *x, &self.nodes);
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let axr = ax.row_mut(r);
                        for (j, &gj) in gr.iter().enumerate() {
                            if gj != 0.0 {
                                axpy(gj, wv.row(j), axr);
                            }
                        }
                    }
                }
                let aw = slot(adj, *w, &self.nodes);
                for r in 0..g.rows() {
                    let xr = xv.row(r);
                    for (j, &gj) in g.row(r).iter().enumerate() {
                        if gj != 0.0 {
                            axpy(gj, xr, aw.row_mut(j));
                        }
                    }
                }
            }
            Op::AddRow { x, bias } => {
                slot(adj, *x, &self.nodes).add_assign(g);
                let ab = slot(adj, *bias, &self.nodes);
                for r in 0..g.rows() {
                    axpy(1.0, g.row(r), ab.data_mut());
                }
            }
            Op::Add(a, b) => {
                slot(adj, *a, &self.nodes).add_assign(g);
                slot(adj, *b, &self.nodes).add_assign(g);
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = slot(adj, *a, &self.nodes);
                for ((o, gi), bi) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                    *o += gi * bi;
                }
                let gb = slot(adj, *b, &self.nodes);
                for ((o, gi), ai) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *o += gi * ai;
                }
            }
            Op::Scale(x, f) => {
                axpy(*f, g.data(), slot(adj, *x, &self.nodes).data_mut());
            }
            Op::AddScalar(x) => {
                slot(adj, *x, &self.nodes).add_assign(g);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let a = slot(adj, *x, &self.nodes);
                for ((o, gi), xi) in a.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    if *xi > 0.0 {
                        *o += gi;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let a = slot(adj, *x, &self.nodes);
                for ((o, gi), yi) in a.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *o += gi * yi * (1.0 - yi);
                }
            }
            Op::RowSum(x) => {
                let a = slot(adj, *x, &self.nodes);
                for r in 0..a.rows() {
                    let gr = g.data()[r];
                    for o in a.row_mut(r) {
                        *o += gr;
                    }
                }
            }
            Op::SegmentSoftmax { x, seg } => {
                let y = node.value.data();
                let num_segments = seg.iter().max().map_or(0, |m| m + 1);
                let mut inner = vec![0.0; num_segments];
                for (k, &s) in seg.iter().enumerate() {
                    inner[s] += y[k] * g.data()[k];
                }
                let a = slot(adj, *x, &self.nodes);
                for (k, &s) in seg.iter().enumerate() {
                    a.data_mut()[k] += y[k] * (g.data()[k] - inner[s]);
                }
            }
            Op::SegmentWeightedSum { w, v, seg } => {
                let (wv, vv) = (self.value(*w), self.value(*v));
                {
                    let aw = slot(adj, *w, &self.nodes);
                    for (k, &s) in seg.iter().enumerate() {
                        aw.data_mut()[k] += dot(g.row(s), vv.row(k));
                    }
                }
                let av = slot(adj, *v, &self.nodes);
                for (k, &s) in seg.iter().enumerate() {
                    axpy(wv.data()[k], g.row(s), av.row_mut(k));
                }
            }
            Op::BceWithLogits { z, labels } => {
                let zv = self.value(*z);
                let gs = g.item();
                let a = slot(adj, *z, &self.nodes);
                for ((o, &zi), &yi) in a.data_mut().iter_mut().zip(zv.data()).zip(labels.iter()) {
                    *o += gs * (sigmoid(zi) - yi);
                }
            }
            Op::Sum(x) => {
                let gs = g.item();
                for o in slot(adj, *x, &self.nodes).data_mut() {
                    *o += gs;
                }
            }
            Op::Mean(x) => {
                let a = slot(adj, *x, &self.nodes);
                let gs = g.item() / a.len() as f64;
                for o in a.data_mut() {
                    *o += gs;
                }
            }
        }
    }

    /// Adjoint of `v` after [`Tape::backward`]; `None` before backward or
    /// when `v` does not influence the root.
    pub fn adjoint(&self, v: Var) -> Option<&Tensor> {
        self.adjoints.as_ref()?.get(v.0)?.as_ref()
    }

    /// Collects parameter adjoints into a [`Grads`] aligned with `store`.
    /// A parameter recorded several times receives the sum of its adjoints.
    pub fn param_grads(&self, store: &ParamStore) -> Result<Grads, AutodiffError> {
        let adj = self.adjoints.as_ref().ok_or(AutodiffError::NoBackward)?;
        let mut grads = Grads::zeros_like(store);
        for (node, a) in self.nodes.iter().zip(adj) {
            if let (Op::Param(id), Some(a)) = (&node.op, a) {
                grads.get_mut(*id).add_assign(a);
            }
        }
        Ok(grads)
    }
}

fn slot<'a>(adj: &'a mut [Option<Tensor>], v: Var, nodes: &[Node]) -> &'a mut Tensor {
    adj[v.0].get_or_insert_with(|| {
        let (r, c) = nodes[v.0].value.shape();
        Tensor::zeros(r, c)
    })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

pub(crate) fn segment_softmax_values(x: &[f64], seg: &[usize]) -> Vec<f64> {
    let num_segments = seg.iter().max().map_or(0, |m| m + 1);
    let mut max = vec![f64::NEG_INFINITY; num_segments];
    for (&xi, &s) in x.iter().zip(seg) {
        if xi > max[s] {
            max[s] = xi;
        }
    }
    let mut out: Vec<f64> = x
        .iter()
        .zip(seg)
        .map(|(&xi, &s)| (xi - max[s]).exp())
        .collect();
    let mut total = vec![0.0; num_segments];
    for (&e, &s) in out.iter().zip(seg) {
        total[s] += e;
    }
    for (o, &s) in out.iter_mut().zip(seg) {
        *o /= total[s];
    }
    out
}
