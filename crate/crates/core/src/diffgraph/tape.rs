use super::{DiffError, Gradients, ParamId, ParamSet, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    /// `W · x`.
    MatVec {
        w: ParamId,
        x: NodeId,
    },
    /// `W · 1_S` for an index list `S` (repeats count repeatedly).
    SparseMatVec {
        w: ParamId,
        cols: Vec<u32>,
    },
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Concat(Vec<NodeId>),
    LogSoftmax(NodeId),
    Pick(NodeId, usize),
    Sum(Vec<NodeId>),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
    /// Whether any parameter feeds this node.
    tracked: bool,
}

/// Eagerly evaluated computation record over a borrowed parameter set.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and `backward` walks it in reverse exactly once.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::ShapeMismatch { op, detail }
}

pub fn log_softmax(s: &[f64]) -> Vec<f64> {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    s.iter().map(|v| (v - max) - log_z).collect()
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(64),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op, tracked: bool) -> NodeId {
        self.nodes.push(Node { value, op, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    /// A constant input vector.
    pub fn input(&mut self, value: Vec<f64>) -> Result<NodeId> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { op: "input" });
        }
        Ok(self.push(value, Op::Input, false))
    }

    pub fn matvec(&mut self, w: ParamId, x: NodeId) -> Result<NodeId> {
        let m = self.params.get(w);
        let xv = self.value(x);
        if m.cols() != xv.len() {
            return Err(shape_err(
                "matvec",
                format!(
                    "{} is {}x{}, input has {}",
                    self.params.name(w),
                    m.rows(),
                    m.cols(),
                    xv.len()
                ),
            ));
        }
        let nz: Vec<usize> = (0..xv.len()).filter(|&j| xv[j] != 0.0).collect();
        let value = (0..m.rows())
            .map(|r| {
                let row = m.row(r);
                nz.iter().map(|&j| row[j] * xv[j]).sum()
            })
            .collect();
        Ok(self.push(value, Op::MatVec { w, x }, true))
    }

    /// Product of `W` with the indicator vector of `cols`.
    pub fn sparse_matvec(&mut self, w: ParamId, cols: &[u32]) -> Result<NodeId> {
        let m = self.params.get(w);
        if let Some(&bad) = cols.iter().find(|&&c| c as usize >= m.cols()) {
            return Err(DiffError::IndexOutOfRange {
                index: bad as usize,
                len: m.cols(),
            });
        }
        let mut value = vec![0.0; m.rows()];
        m.add_columns(cols, &mut value);
        Ok(self.push(
            value,
            Op::SparseMatVec {
                w,
                cols: cols.to_vec(),
            },
            true,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(shape_err("add", format!("{} vs {}", av.len(), bv.len())));
        }
        let value = av.iter().zip(bv).map(|(x, y)| x + y).collect();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(DiffError::NonFinite { op: "scale" });
        }
        let value = self.value(a).iter().map(|x| x * c).collect();
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Scale(a, c), tracked))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Relu(a), tracked))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let value = parts.iter().flat_map(|&p| self.value(p).to_vec()).collect();
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), tracked))
    }

    /// `s_i − log Σ_j exp(s_j)`, computed with max subtraction.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a);
        if s.is_empty() {
            return Err(shape_err("log_softmax", "empty input".into()));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { op: "log_softmax" });
        }
        let value = log_softmax(s);
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::LogSoftmax(a), tracked))
    }

    pub fn pick(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let len = self.value(a).len();
        if index >= len {
            return Err(DiffError::IndexOutOfRange { index, len });
        }
        let value = vec![self.value(a)[index]];
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Pick(a, index), tracked))
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn sum(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("sum", "no inputs".into()))?;
        let len = self.value(*first).len();
        let mut value = vec![0.0; len];
        for &p in parts {
            let v = self.value(p);
            if v.len() != len {
                return Err(shape_err("sum", format!("{} vs {}", v.len(), len)));
            }
            value.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(value, Op::Sum(parts.to_vec()), tracked))
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    /// Parameters that do not reach `loss` get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(DiffError::NonScalarLoss(lv.len()));
        }
        if !lv[0].is_finite() {
            return Err(DiffError::NonFinite { op: "loss" });
        }
        let mut grads = self.params.zeros_like();
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        fn accumulate(adj: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
            match &mut adj[id.0] {
                Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                slot @ None => *slot = Some(g.to_vec()),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::MatVec { w, x } => {
                    let m = self.params.get(*w);
                    let xv = self.value(*x);
                    let gw = grads.get_mut(*w);
                    let cols = m.cols();
                    let nz: Vec<usize> = (0..xv.len()).filter(|&j| xv[j] != 0.0).collect();
                    for (r, &gr) in g.iter().enumerate() {
                        if gr == 0.0 {
                            continue;
                        }
                        let row = &mut gw.data_mut()[r * cols..(r + 1) * cols];
                        for &j in &nz {
                            row[j] += gr * xv[j];
                        }
                    }
                    if self.tracked(*x) {
                        let mut gx = vec![0.0; cols];
                        for (r, &gr) in g.iter().enumerate() {
                            if gr == 0.0 {
                                continue;
                            }
                            for (a, w) in gx.iter_mut().zip(m.row(r)) {
                                *a += gr * w;
                            }
                        }
                        accumulate(&mut adj, *x, &gx);
                    }
                }
                Op::SparseMatVec { w, cols } => {
                    let gw = grads.get_mut(*w);
                    let ncols = gw.cols();
                    for (r, &gr) in g.iter().enumerate() {
                        let row = &mut gw.data_mut()[r * ncols..(r + 1) * ncols];
                        for &c in cols {
                            row[c as usize] += gr;
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, &g);
                    accumulate(&mut adj, *b, &g);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accumulate(&mut adj, *a, &ga);
                }
                Op::Relu(a) => {
                    let input = self.value(*a);
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(input)
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, *a, &ga);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        accumulate(&mut adj, p, &g[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::LogSoftmax(a) => {
                    let total: f64 = g.iter().sum();
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(&node.value)
                        .map(|(gv, lp)| gv - lp.exp() * total)
                        .collect();
                    accumulate(&mut adj, *a, &ga);
                }
                Op::Pick(a, i) => {
                    let mut ga = vec![0.0; self.value(*a).len()];
                    ga[*i] = g[0];
                    accumulate(&mut adj, *a, &ga);
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        accumulate(&mut adj, p, &g);
                    }
                }
            }
        }
        if grads
            .iter()
            .any(|m| m.data().iter().any(|v| !v.is_finite()))
        {
            return Err(DiffError::NonFinite { op: "backward" });
        }
        Ok(grads)
    }
}
