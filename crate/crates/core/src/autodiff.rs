//! Tape-based reverse-mode differentiation over f64 matrices.
//!
//! Values are eagerly computed `Array2<f64>`s recorded on a growing tape;
//! `backward` walks the tape once in reverse and returns dense gradients
//! for every node that transitively depends on a gradient leaf. Scalars
//! are 1x1 matrices. Stop-gradient evaluation is expressed structurally:
//! run the forward pass on a tape whose leaves do not require gradients
//! (or insert the value as a constant), so no derivative path exists.

use ndarray::{s, Array2, Axis};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows(NodeId, f64),
    Silu(NodeId),
    Sigmoid(NodeId),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    MeanRows(NodeId),
    MeanSq(NodeId),
    Sum(NodeId),
    Unfold(NodeId, usize, usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    by_node: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the given node; zeros if no path exists.
    pub fn wrt(&self, tape: &Tape, id: NodeId) -> Array2<f64> {
        match &self.by_node[id.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(tape.nodes[id.0].value.dim()),
        }
    }

    pub fn has_grad(&self, id: NodeId) -> bool {
        self.by_node[id.0].is_some()
    }
}

/// A forward-evaluation tape recording the computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.dim(), (1, 1), "scalar() on non-scalar node");
        v[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives gradient (stop-gradient insertion point).
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// Broadcast-add a (1, c) row vector to every row of a (n, c) matrix.
    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> NodeId {
        assert_eq!(self.value(row).nrows(), 1);
        assert_eq!(self.value(m).ncols(), self.value(row).ncols());
        let v = self.value(m) + &self.value(row).row(0);
        let rg = self.rg(m) || self.rg(row);
        self.push(v, Op::AddRow(m, row), rg)
    }

    /// Broadcast-multiply every row of a (n, c) matrix by a (1, c) row vector.
    pub fn mul_row(&mut self, m: NodeId, row: NodeId) -> NodeId {
        assert_eq!(self.value(row).nrows(), 1);
        assert_eq!(self.value(m).ncols(), self.value(row).ncols());
        let v = self.value(m) * &self.value(row).row(0);
        let rg = self.rg(m) || self.rg(row);
        self.push(v, Op::MulRow(m, row), rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).ncols(), self.value(b).nrows());
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    /// Row-wise softmax with the usual max-shift for stability.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|e| (e - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|e| e / sum);
        }
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise standardization to zero mean, unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|e| (e - mean) * inv);
        }
        let rg = self.rg(a);
        self.push(v, Op::LayerNormRows(a, eps), rg)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(a);
        self.push(v, Op::SliceRows(a, start, len), rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(v, Op::SliceCols(a, start, len), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).ncols();
        let rows: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.ncols(), cols);
            v.slice_mut(s![at..at + pv.nrows(), ..]).assign(pv);
            at += pv.nrows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.nrows(), rows);
            v.slice_mut(s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Column means: (n, c) -> (1, c).
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = x
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(v, Op::MeanRows(a), rg)
    }

    /// Mean of squared entries: sum(x^2) / numel, as a 1x1 node.
    pub fn mean_sq(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let n = x.len() as f64;
        let v = Array2::from_elem((1, 1), x.iter().map(|e| e * e).sum::<f64>() / n);
        let rg = self.rg(a);
        self.push(v, Op::MeanSq(a), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    /// Sliding-window flatten along rows: output row i is the concatenation
    /// of input rows [i*stride, i*stride + kernel). Used for strided
    /// convolutions expressed as unfold + matmul.
    pub fn unfold_rows(&mut self, a: NodeId, kernel: usize, stride: usize) -> NodeId {
        let x = self.value(a);
        let (n, c) = x.dim();
        assert!(kernel >= 1 && stride >= 1 && n >= kernel);
        let frames = (n - kernel) / stride + 1;
        let mut v = Array2::zeros((frames, kernel * c));
        for i in 0..frames {
            for k in 0..kernel {
                for j in 0..c {
                    v[[i, k * c + j]] = x[[i * stride + k, j]];
                }
            }
        }
        let rg = self.rg(a);
        self.push(v, Op::Unfold(a, kernel, stride), rg)
    }

    /// Reverse-mode sweep from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.dim(),
            (1, 1),
            "backward() needs a scalar loss"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { by_node: grads }
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let accum = |grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>| {
            match &mut grads[id.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accum(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accum(grads, *b, -g.clone());
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    accum(grads, *a, g * self.value(*b));
                }
                if self.rg(*b) {
                    accum(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, c) => {
                if self.rg(*a) {
                    accum(grads, *a, g * *c);
                }
            }
            Op::AddRow(m, row) => {
                if self.rg(*m) {
                    accum(grads, *m, g.clone());
                }
                if self.rg(*row) {
                    accum(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(m, row) => {
                if self.rg(*m) {
                    accum(grads, *m, g * &self.value(*row).row(0));
                }
                if self.rg(*row) {
                    let prod = g * self.value(*m);
                    accum(grads, *row, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    accum(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    accum(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Transpose(a) => {
                if self.rg(*a) {
                    accum(grads, *a, g.t().to_owned());
                }
            }
            Op::SoftmaxRows(a) => {
                if self.rg(*a) {
                    let y = &self.nodes[idx].value;
                    let mut out = Array2::zeros(y.dim());
                    for (i, (y_row, g_row)) in y.rows().into_iter().zip(g.rows()).enumerate() {
                        let dot: f64 = y_row.iter().zip(g_row.iter()).map(|(y, g)| y * g).sum();
                        for (j, (&yv, &gv)) in y_row.iter().zip(g_row.iter()).enumerate() {
                            out[[i, j]] = yv * (gv - dot);
                        }
                    }
                    accum(grads, *a, out);
                }
            }
            Op::LayerNormRows(a, eps) => {
                if self.rg(*a) {
                    let x = self.value(*a);
                    let y = &self.nodes[idx].value; // normalized output
                    let mut out = Array2::zeros(x.dim());
                    for i in 0..x.nrows() {
                        let n = x.ncols() as f64;
                        let mean = x.row(i).sum() / n;
                        let var =
                            x.row(i).iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let g_row = g.row(i);
                        let y_row = y.row(i);
                        let g_mean = g_row.sum() / n;
                        let gy_mean: f64 =
                            g_row.iter().zip(y_row.iter()).map(|(g, y)| g * y).sum::<f64>() / n;
                        for j in 0..x.ncols() {
                            out[[i, j]] = inv * (g_row[j] - g_mean - y_row[j] * gy_mean);
                        }
                    }
                    accum(grads, *a, out);
                }
            }
            Op::Silu(a) => {
                if self.rg(*a) {
                    let x = self.value(*a);
                    let d = x.mapv(|v| {
                        let s = sigmoid(v);
                        s * (1.0 + v * (1.0 - s))
                    });
                    accum(grads, *a, g * &d);
                }
            }
            Op::Sigmoid(a) => {
                if self.rg(*a) {
                    let y = &self.nodes[idx].value;
                    let d = y.mapv(|v| v * (1.0 - v));
                    accum(grads, *a, g * &d);
                }
            }
            Op::SliceRows(a, start, len) => {
                if self.rg(*a) {
                    let mut out = Array2::zeros(self.value(*a).dim());
                    out.slice_mut(s![*start..start + len, ..]).assign(g);
                    accum(grads, *a, out);
                }
            }
            Op::SliceCols(a, start, len) => {
                if self.rg(*a) {
                    let mut out = Array2::zeros(self.value(*a).dim());
                    out.slice_mut(s![.., *start..start + len]).assign(g);
                    accum(grads, *a, out);
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let rows = self.value(p).nrows();
                    if self.rg(p) {
                        accum(grads, p, g.slice(s![at..at + rows, ..]).to_owned());
                    }
                    at += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let cols = self.value(p).ncols();
                    if self.rg(p) {
                        accum(grads, p, g.slice(s![.., at..at + cols]).to_owned());
                    }
                    at += cols;
                }
            }
            Op::MeanRows(a) => {
                if self.rg(*a) {
                    let n = self.value(*a).nrows() as f64;
                    let row = g.row(0).to_owned() / n;
                    let out = Array2::from_shape_fn(self.value(*a).dim(), |(_, j)| row[j]);
                    accum(grads, *a, out);
                }
            }
            Op::MeanSq(a) => {
                if self.rg(*a) {
                    let x = self.value(*a);
                    let scale = 2.0 * g[[0, 0]] / x.len() as f64;
                    accum(grads, *a, x * scale);
                }
            }
            Op::Sum(a) => {
                if self.rg(*a) {
                    accum(grads, *a, Array2::from_elem(self.value(*a).dim(), g[[0, 0]]));
                }
            }
            Op::Unfold(a, kernel, stride) => {
                if self.rg(*a) {
                    let (n, c) = self.value(*a).dim();
                    let frames = (n - kernel) / stride + 1;
                    let mut out = Array2::zeros((n, c));
                    for i in 0..frames {
                        for k in 0..*kernel {
                            for j in 0..c {
                                out[[i * stride + k, j]] += g[[i, k * c + j]];
                            }
                        }
                    }
                    accum(grads, *a, out);
                }
            }
        }
    }
}
