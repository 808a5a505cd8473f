//! Minimal reverse-mode differentiation tape over `ndarray` matrices.
//!
//! Values are eagerly computed f64 matrices; every scalar is a 1x1 matrix and
//! every vector a 1xN row. The op set is exactly what the scoring pipeline
//! needs: affine maps, elementwise maps, masked softmax/means, layer norm and
//! a stable log-sum-exp. Reductions use fixed left-to-right order so repeated
//! runs are bit-identical.

#![allow(clippy::needless_range_loop)] // masked dual-index loops read clearer as index loops

use ndarray::{Array2, Axis};

pub const LAYERNORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf {
        requires_grad: bool,
    },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddBias(NodeId, NodeId),
    MulScalar(NodeId, NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    Transpose(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    RowSoftmax(NodeId, Vec<bool>),
    MaskedMeanRows(NodeId, Vec<bool>),
    SumAll(NodeId),
    LayerNormRows {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    LogSumExpRow(NodeId),
    GatherCol(NodeId, usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).dim()
    }

    /// Leaf that participates in backward.
    pub fn param(&mut self, value: Array2<f64>) -> NodeId {
        self.push(
            value,
            Op::Leaf {
                requires_grad: true,
            },
        )
    }

    /// Leaf excluded from backward (encoder output, masks baked elsewhere).
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(
            value,
            Op::Leaf {
                requires_grad: false,
            },
        )
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul {ar}x{ac} . {br}x{bc}");
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "div shape mismatch");
        let v = self.value(a) / self.value(b);
        self.push(v, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    /// Broadcast a 1xN bias over every row of a RxN matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (_, ac) = self.shape(a);
        let (br, bc) = self.shape(bias);
        assert_eq!((br, bc), (1, ac), "bias must be 1x{ac}");
        let v = self.value(a) + self.value(bias);
        self.push(v, Op::AddBias(a, bias))
    }

    /// Multiply a matrix by a 1x1 scalar node.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.shape(s), (1, 1), "scalar node must be 1x1");
        let sv = self.scalar_value(s);
        let v = self.value(a) * sv;
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(gelu_scalar);
        self.push(v, Op::Gelu(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let rows: usize = parts.iter().map(|p| self.shape(*p).0).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.ncols(), cols, "concat_rows column mismatch");
            v.slice_mut(ndarray::s![at..at + pv.nrows(), ..]).assign(pv);
            at += pv.nrows();
        }
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.nrows(), rows, "concat_cols row mismatch");
            v.slice_mut(ndarray::s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let (r, _) = self.shape(a);
        assert!(start < end && end <= r, "slice {start}..{end} of {r} rows");
        let v = self.value(a).slice(ndarray::s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start, end))
    }

    /// Row-wise softmax over unmasked columns; masked columns get exactly 0.
    /// Every row must see at least one unmasked column.
    pub fn row_softmax(&mut self, a: NodeId, mask: &[bool]) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(mask.len(), c, "softmax mask length");
        assert!(mask.iter().any(|&m| m), "softmax needs an unmasked column");
        let mut v = Array2::zeros((r, c));
        for i in 0..r {
            let mut hi = f64::NEG_INFINITY;
            for j in 0..c {
                if mask[j] {
                    hi = hi.max(self.value(a)[[i, j]]);
                }
            }
            let mut denom = 0.0;
            for j in 0..c {
                if mask[j] {
                    denom += (self.value(a)[[i, j]] - hi).exp();
                }
            }
            for j in 0..c {
                if mask[j] {
                    v[[i, j]] = (self.value(a)[[i, j]] - hi).exp() / denom;
                }
            }
        }
        self.push(v, Op::RowSoftmax(a, mask.to_vec()))
    }

    /// Mean over unmasked rows, yielding 1xC. Needs at least one unmasked row.
    pub fn masked_mean_rows(&mut self, a: NodeId, mask: &[bool]) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(mask.len(), r, "mean mask length");
        let cnt = mask.iter().filter(|&&m| m).count();
        assert!(cnt > 0, "mean needs an unmasked row");
        let mut v = Array2::zeros((1, c));
        for i in 0..r {
            if mask[i] {
                for j in 0..c {
                    v[[0, j]] += self.value(a)[[i, j]];
                }
            }
        }
        v.mapv_inplace(|x| x / cnt as f64);
        self.push(v, Op::MaskedMeanRows(a, mask.to_vec()))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// Row dot product of two 1xN nodes.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let m = self.mul(a, b);
        self.sum_all(m)
    }

    /// Row-wise layer norm with learnable affine. gamma/beta are 1xC.
    pub fn layernorm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, c), "gamma must be 1x{c}");
        assert_eq!(self.shape(beta), (1, c), "beta must be 1x{c}");
        let mut v = Array2::zeros((r, c));
        for i in 0..r {
            let row = self.value(x).row(i);
            let mean = row.sum() / c as f64;
            let var = row.iter().map(|&t| (t - mean) * (t - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for j in 0..c {
                let xn = (row[j] - mean) * inv;
                v[[i, j]] = self.value(gamma)[[0, j]] * xn + self.value(beta)[[0, j]];
            }
        }
        self.push(v, Op::LayerNormRows { x, gamma, beta })
    }

    /// Stable log(sum(exp(row))) of a 1xN node, yielding 1x1.
    pub fn log_sum_exp_row(&mut self, a: NodeId) -> NodeId {
        let (r, _) = self.shape(a);
        assert_eq!(r, 1, "log_sum_exp_row wants a 1xN row");
        let row = self.value(a).row(0);
        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|&t| (t - hi).exp()).sum();
        let v = Array2::from_elem((1, 1), hi + s.ln());
        self.push(v, Op::LogSumExpRow(a))
    }

    /// Column j of a 1xN node as 1x1.
    pub fn gather_col(&mut self, a: NodeId, j: usize) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(r, 1, "gather_col wants a 1xN row");
        assert!(j < c, "gather_col {j} out of {c}");
        let v = Array2::from_elem((1, 1), self.value(a)[[0, j]]);
        self.push(v, Op::GatherCol(a, j))
    }

    /// Reverse pass from a 1x1 loss node. Returns one gradient slot per node;
    /// only leaves with `requires_grad` and interior nodes on a grad path are
    /// populated.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward seed must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf { requires_grad } => {
                    if *requires_grad {
                        grads[idx] = Some(dy);
                    }
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = dy.dot(&self.nodes[b.0].value.t());
                    let db = self.nodes[a.0].value.t().dot(&dy);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, -dy);
                }
                Op::Mul(a, b) => {
                    let da = &dy * &self.nodes[b.0].value;
                    let db = &dy * &self.nodes[a.0].value;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Div(a, b) => {
                    let bv = &self.nodes[b.0].value;
                    let da = &dy / bv;
                    let db = -(&dy * &self.nodes[idx].value) / bv;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, dy * *c);
                }
                Op::AddBias(a, bias) => {
                    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, dy);
                    accumulate(&mut grads, *bias, db);
                }
                Op::MulScalar(a, s) => {
                    let sv = self.nodes[s.0].value[[0, 0]];
                    let ds = (&dy * &self.nodes[a.0].value).sum();
                    accumulate(&mut grads, *a, dy * sv);
                    accumulate(&mut grads, *s, Array2::from_elem((1, 1), ds));
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    let da = &dy * &y.mapv(|t| 1.0 - t * t);
                    accumulate(&mut grads, *a, da);
                }
                Op::Gelu(a) => {
                    let x = &self.nodes[a.0].value;
                    let da = &dy * &x.mapv(gelu_grad_scalar);
                    accumulate(&mut grads, *a, da);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, dy.t().to_owned());
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let r = self.nodes[p.0].value.nrows();
                        let dp = dy.slice(ndarray::s![at..at + r, ..]).to_owned();
                        accumulate(&mut grads, p, dp);
                        at += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let c = self.nodes[p.0].value.ncols();
                        let dp = dy.slice(ndarray::s![.., at..at + c]).to_owned();
                        accumulate(&mut grads, p, dp);
                        at += c;
                    }
                }
                Op::SliceRows(a, start, end) => {
                    let (r, c) = self.nodes[a.0].value.dim();
                    let mut da = Array2::zeros((r, c));
                    da.slice_mut(ndarray::s![*start..*end, ..]).assign(&dy);
                    accumulate(&mut grads, *a, da);
                }
                Op::RowSoftmax(a, mask) => {
                    let y = &self.nodes[idx].value;
                    let (r, c) = y.dim();
                    let mut da = Array2::zeros((r, c));
                    for i in 0..r {
                        let mut inner = 0.0;
                        for j in 0..c {
                            if mask[j] {
                                inner += dy[[i, j]] * y[[i, j]];
                            }
                        }
                        for j in 0..c {
                            if mask[j] {
                                da[[i, j]] = y[[i, j]] * (dy[[i, j]] - inner);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::MaskedMeanRows(a, mask) => {
                    let (r, c) = self.nodes[a.0].value.dim();
                    let cnt = mask.iter().filter(|&&m| m).count() as f64;
                    let mut da = Array2::zeros((r, c));
                    for i in 0..r {
                        if mask[i] {
                            for j in 0..c {
                                da[[i, j]] = dy[[0, j]] / cnt;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.nodes[a.0].value.dim();
                    accumulate(&mut grads, *a, Array2::from_elem((r, c), dy[[0, 0]]));
                }
                Op::LayerNormRows { x, gamma, beta } => {
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gamma.0].value;
                    let (r, c) = xv.dim();
                    let n = c as f64;
                    let mut dx = Array2::zeros((r, c));
                    let mut dgamma = Array2::zeros((1, c));
                    let mut dbeta = Array2::zeros((1, c));
                    for i in 0..r {
                        let row = xv.row(i);
                        let mean = row.sum() / n;
                        let var = row.iter().map(|&t| (t - mean) * (t - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
                        let xn: Vec<f64> = row.iter().map(|&t| (t - mean) * inv).collect();
                        let dxn: Vec<f64> = (0..c).map(|j| dy[[i, j]] * gv[[0, j]]).collect();
                        let mean_dxn = dxn.iter().sum::<f64>() / n;
                        let mean_dxn_xn =
                            dxn.iter().zip(&xn).map(|(&a, &b)| a * b).sum::<f64>() / n;
                        for j in 0..c {
                            dgamma[[0, j]] += dy[[i, j]] * xn[j];
                            dbeta[[0, j]] += dy[[i, j]];
                            dx[[i, j]] = inv * (dxn[j] - mean_dxn - xn[j] * mean_dxn_xn);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::LogSumExpRow(a) => {
                    let row = self.nodes[a.0].value.row(0);
                    let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|&t| (t - hi).exp()).sum();
                    let mut da = Array2::zeros((1, row.len()));
                    for j in 0..row.len() {
                        da[[0, j]] = (row[j] - hi).exp() / denom * dy[[0, 0]];
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::GatherCol(a, j) => {
                    let (_, c) = self.nodes[a.0].value.dim();
                    let mut da = Array2::zeros((1, c));
                    da[[0, *j]] = dy[[0, 0]];
                    accumulate(&mut grads, *a, da);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
    match &mut grads[id.0] {
        Some(g) => *g += &delta,
        slot => *slot = Some(delta),
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for a node; zero matrix of the given shape if the node never
    /// received one (disconnected from the loss).
    pub fn get(&self, id: NodeId, shape: (usize, usize)) -> Array2<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
}
