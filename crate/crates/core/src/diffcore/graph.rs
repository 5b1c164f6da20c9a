//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every recording method evaluates its node eagerly and appends it to the
//! graph, so node ids are already a topological order. [`Graph::evaluate`]
//! replays the recorded ops against a new input binding, and
//! [`Graph::backward`] walks the nodes in reverse from an output.

use std::collections::HashMap;

use super::tensor::{matmul_raw, ordered_sum, Tensor};
use super::GraphError;

/// Index of a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Param(String),
    Constant,
    StopGrad(NodeId),
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulBt(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `a[r,c] + row[1,c]` broadcast over rows.
    AddRow(NodeId, NodeId),
    /// `a[r,c] * row[1,c]` broadcast over rows.
    MulRow(NodeId, NodeId),
    /// `a[r,c] * col[r,1]` broadcast over columns.
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Clip(NodeId, f64, f64),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNormRows(NodeId, f64),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// Column means, `[r,c] -> [1,c]`.
    MeanRows(NodeId),
    /// Column maxima, `[r,c] -> [1,c]`.
    MaxRows(NodeId),
    /// Row sums, `[r,c] -> [r,1]`.
    SumCols(NodeId),
    /// `Σ_i w[i] · h[i,:]`, `w: [n,1]`, `h: [n,c]` -> `[1,c]`.
    AttnPool(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Constant => "constant",
            Op::StopGrad(_) => "stop_grad",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Clip(..) => "clip",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LogSoftmaxRows(_) => "log_softmax_rows",
            Op::LayerNormRows(..) => "layer_norm_rows",
            Op::SumAll(_) => "sum_all",
            Op::MeanAll(_) => "mean_all",
            Op::MeanRows(_) => "mean_rows",
            Op::MaxRows(_) => "max_rows",
            Op::SumCols(_) => "sum_cols",
            Op::AttnPool(..) => "attn_pool",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// A recorded computation over dense tensors.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: HashMap<String, NodeId>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
    }
    let mut scratch = out.to_vec();
    let total = ordered_sum(&mut scratch);
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_sum_exp_row(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut terms: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    max + ordered_sum(&mut terms).ln()
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn expect_2d(t: &Tensor) -> Result<(), String> {
    if t.shape().len() == 2 {
        Ok(())
    } else {
        Err(format!("expected rank-2 operand, got shape {:?}", t.shape()))
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<(), String> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(format!("shapes {:?} and {:?} differ", a.shape(), b.shape()))
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn compute(op: &Op, nodes: &[Node]) -> Result<Tensor, String> {
    let v = |id: &NodeId| &nodes[id.0].value;
    let out = match op {
        Op::Input(_) | Op::Param(_) | Op::Constant => unreachable!("leaves are not recomputed"),
        Op::StopGrad(a) => v(a).clone(),
        Op::MatMul(a, b) => {
            let (a, b) = (v(a), v(b));
            expect_2d(a)?;
            expect_2d(b)?;
            let ((n, k), (k2, m)) = (dims(a), dims(b));
            if k != k2 {
                return Err(format!("matmul inner dims {k} vs {k2}"));
            }
            Tensor::matrix(n, m, matmul_raw(a.data(), b.data(), n, k, m))
        }
        Op::MatMulBt(a, b) => {
            let (a, b) = (v(a), v(b));
            expect_2d(a)?;
            expect_2d(b)?;
            let ((n, k), (m, k2)) = (dims(a), dims(b));
            if k != k2 {
                return Err(format!("matmul_bt inner dims {k} vs {k2}"));
            }
            let (ad, bd) = (a.data(), b.data());
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                let ar = &ad[i * k..(i + 1) * k];
                for j in 0..m {
                    let br = &bd[j * k..(j + 1) * k];
                    out[i * m + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
                }
            }
            Tensor::matrix(n, m, out)
        }
        Op::Transpose(a) => {
            expect_2d(v(a))?;
            v(a).transpose()
        }
        Op::Add(a, b) => {
            same_shape(v(a), v(b))?;
            zip_map(v(a), v(b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            same_shape(v(a), v(b))?;
            zip_map(v(a), v(b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            same_shape(v(a), v(b))?;
            zip_map(v(a), v(b), |x, y| x * y)
        }
        Op::AddRow(a, r) | Op::MulRow(a, r) => {
            let (a_t, r_t) = (v(a), v(r));
            expect_2d(a_t)?;
            let (rows, cols) = dims(a_t);
            if r_t.shape() != [1, cols] {
                return Err(format!("row operand {:?} vs [1, {cols}]", r_t.shape()));
            }
            let add = matches!(op, Op::AddRow(..));
            let rd = r_t.data();
            let mut out = a_t.data().to_vec();
            for i in 0..rows {
                for j in 0..cols {
                    let x = &mut out[i * cols + j];
                    *x = if add { *x + rd[j] } else { *x * rd[j] };
                }
            }
            Tensor::matrix(rows, cols, out)
        }
        Op::MulCol(a, c) => {
            let (a_t, c_t) = (v(a), v(c));
            expect_2d(a_t)?;
            let (rows, cols) = dims(a_t);
            if c_t.shape() != [rows, 1] {
                return Err(format!("column operand {:?} vs [{rows}, 1]", c_t.shape()));
            }
            let cd = c_t.data();
            let mut out = a_t.data().to_vec();
            for i in 0..rows {
                for x in &mut out[i * cols..(i + 1) * cols] {
                    *x *= cd[i];
                }
            }
            Tensor::matrix(rows, cols, out)
        }
        Op::Scale(a, s) => v(a).map(|x| x * s),
        Op::AddScalar(a, s) => v(a).map(|x| x + s),
        Op::Tanh(a) => v(a).map(f64::tanh),
        Op::Sigmoid(a) => v(a).map(sigmoid),
        Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::Gelu(a) => v(a).map(gelu),
        Op::Exp(a) => v(a).map(f64::exp),
        Op::Log(a) => v(a).map(f64::ln),
        Op::Clip(a, lo, hi) => v(a).map(|x| x.min(*hi).max(*lo)),
        Op::SoftmaxRows(a) => {
            let a_t = v(a);
            expect_2d(a_t)?;
            let (rows, cols) = dims(a_t);
            let mut out = vec![0.0; rows * cols];
            for i in 0..rows {
                softmax_row(a_t.row(i), &mut out[i * cols..(i + 1) * cols]);
            }
            Tensor::matrix(rows, cols, out)
        }
        Op::LogSoftmaxRows(a) => {
            let a_t = v(a);
            expect_2d(a_t)?;
            let (rows, cols) = dims(a_t);
            let mut out = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                let row = a_t.row(i);
                let lse = log_sum_exp_row(row);
                out.extend(row.iter().map(|x| x - lse));
            }
            Tensor::matrix(rows, cols, out)
        }
        Op::LayerNormRows(a, eps) => {
            let a_t = v(a);
            expect_2d(a_t)?;
            let (rows, cols) = dims(a_t);
            let mut out = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                let row = a_t.row(i);
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + eps).sqrt();
                out.extend(row.iter().map(|x| (x - mean) * inv));
            }
            Tensor::matrix(rows, cols, out)
        }
        Op::SumAll(a) => Tensor::scalar(v(a).sum()),
        Op::MeanAll(a) => {
            let t = v(a);
            if t.is_empty() {
                return Err("mean of empty tensor".into());
            }
            Tensor::scalar(t.sum() / t.len() as f64)
        }
        Op::MeanRows(a) => {
            let t = v(a);
            expect_2d(t)?;
            let (rows, cols) = dims(t);
            if rows == 0 {
                return Err("mean over zero rows".into());
            }
            let mut col = vec![0.0; rows];
            let out = (0..cols)
                .map(|j| {
                    for (i, c) in col.iter_mut().enumerate() {
                        *c = t.data()[i * cols + j];
                    }
                    ordered_sum(&mut col) / rows as f64
                })
                .collect();
            Tensor::matrix(1, cols, out)
        }
        Op::MaxRows(a) => {
            let t = v(a);
            expect_2d(t)?;
            let (rows, cols) = dims(t);
            if rows == 0 {
                return Err("max over zero rows".into());
            }
            let out = (0..cols).map(|j| t.data()[argmax_col(t, j)]).collect();
            Tensor::matrix(1, cols, out)
        }
        Op::SumCols(a) => {
            let t = v(a);
            expect_2d(t)?;
            let out = (0..t.rows()).map(|i| t.row(i).iter().sum()).collect();
            Tensor::matrix(t.rows(), 1, out)
        }
        Op::AttnPool(w, h) => {
            let (w_t, h_t) = (v(w), v(h));
            expect_2d(h_t)?;
            let (rows, cols) = dims(h_t);
            if w_t.shape() != [rows, 1] {
                return Err(format!("pool weights {:?} vs [{rows}, 1]", w_t.shape()));
            }
            let mut terms = vec![0.0; rows];
            let out = (0..cols)
                .map(|j| {
                    for (i, t) in terms.iter_mut().enumerate() {
                        *t = w_t.data()[i] * h_t.data()[i * cols + j];
                    }
                    ordered_sum(&mut terms)
                })
                .collect();
            Tensor::matrix(1, cols, out)
        }
        Op::ConcatRows(parts) => {
            let cols = v(&parts[0]).cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let t = v(p);
                expect_2d(t)?;
                if t.cols() != cols {
                    return Err(format!("concat_rows column mismatch {} vs {cols}", t.cols()));
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::matrix(rows, cols, data)
        }
        Op::ConcatCols(parts) => {
            let rows = v(&parts[0]).rows();
            for p in parts {
                expect_2d(v(p))?;
                if v(p).rows() != rows {
                    return Err(format!("concat_cols row mismatch {} vs {rows}", v(p).rows()));
                }
            }
            let total: usize = parts.iter().map(|p| v(p).cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for p in parts {
                    data.extend_from_slice(v(p).row(i));
                }
            }
            Tensor::matrix(rows, total, data)
        }
        Op::SliceRows(a, s, e) => {
            let t = v(a);
            expect_2d(t)?;
            if s >= e || *e > t.rows() {
                return Err(format!("row slice {s}..{e} of {} rows", t.rows()));
            }
            let c = t.cols();
            Tensor::matrix(e - s, c, t.data()[s * c..e * c].to_vec())
        }
        Op::SliceCols(a, s, e) => {
            let t = v(a);
            expect_2d(t)?;
            if s >= e || *e > t.cols() {
                return Err(format!("column slice {s}..{e} of {} cols", t.cols()));
            }
            let mut data = Vec::with_capacity(t.rows() * (e - s));
            for i in 0..t.rows() {
                data.extend_from_slice(&t.row(i)[*s..*e]);
            }
            Tensor::matrix(t.rows(), e - s, data)
        }
        Op::GatherRows(a, idx) => {
            let t = v(a);
            expect_2d(t)?;
            let c = t.cols();
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                if i >= t.rows() {
                    return Err(format!("gather index {i} out of {} rows", t.rows()));
                }
                data.extend_from_slice(t.row(i));
            }
            Tensor::matrix(idx.len(), c, data)
        }
    };
    Ok(out)
}

/// Row index of the largest entry in column `j`; ties go to the lowest index.
fn argmax_col(t: &Tensor, j: usize) -> usize {
    let cols = t.cols();
    let mut best = j;
    for i in 1..t.rows() {
        let idx = i * cols + j;
        if t.data()[idx] > t.data()[best] {
            best = idx;
        }
    }
    best
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    names: HashMap<String, NodeId>,
}

impl Gradients {
    /// Gradient for a node; an exact zero tensor when no path reached it.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }

    /// Gradient for a named node (leaf or named output).
    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.names.get(name).map(|&id| self.wrt(id))
    }

    /// True when some path reached `id`.
    pub fn reached(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    /// Value of a named node.
    pub fn output(&self, name: &str) -> Result<&Tensor, GraphError> {
        self.id(name)
            .map(|id| self.value(id))
            .ok_or_else(|| GraphError::UnknownName(name.to_string()))
    }

    /// Drops every node recorded after the first `len` nodes.
    ///
    /// Lets a caller bind parameters once and run many independent forward
    /// passes without the graph growing.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.nodes.len() {
            return;
        }
        self.nodes.truncate(len);
        self.names.retain(|_, id| id.0 < len);
    }

    /// Names of every parameter leaf, in recording order.
    pub fn param_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(name) => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    fn bind_name(&mut self, name: &str, id: NodeId) -> Result<(), GraphError> {
        if self.names.insert(name.to_string(), id).is_some() {
            return Err(GraphError::DuplicateName(name.to_string()));
        }
        Ok(())
    }

    fn push_leaf(&mut self, op: Op, value: Tensor) -> Result<NodeId, GraphError> {
        let id = NodeId(self.nodes.len());
        if !value.is_finite() {
            return Err(GraphError::NonFinite { node: id.0, op: op.name() });
        }
        self.nodes.push(Node { op, value });
        Ok(id)
    }

    fn push(&mut self, op: Op) -> Result<NodeId, GraphError> {
        let id = NodeId(self.nodes.len());
        let value = compute(&op, &self.nodes).map_err(|detail| GraphError::Shape {
            node: id.0,
            op: op.name(),
            detail,
        })?;
        if !value.is_finite() {
            return Err(GraphError::NonFinite { node: id.0, op: op.name() });
        }
        self.nodes.push(Node { op, value });
        Ok(id)
    }

    /// A named input leaf, rebindable through [`Graph::evaluate`].
    pub fn input(&mut self, name: &str, value: Tensor) -> Result<NodeId, GraphError> {
        let id = self.push_leaf(Op::Input(name.to_string()), value)?;
        self.bind_name(name, id)?;
        Ok(id)
    }

    /// A named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId, GraphError> {
        let id = self.push_leaf(Op::Param(name.to_string()), value)?;
        self.bind_name(name, id)?;
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, GraphError> {
        self.push_leaf(Op::Constant, value)
    }

    /// Attaches a name to an existing node so it can be fetched as an output.
    pub fn name(&mut self, id: NodeId, name: &str) -> Result<(), GraphError> {
        self.bind_name(name, id)
    }

    /// Identity in the forward pass; blocks every gradient in the backward pass.
    pub fn stop_grad(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::StopGrad(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::MatMulBt(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::MulRow(a, row))
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId, GraphError> {
        self.push(Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId, GraphError> {
        self.push(Op::AddScalar(a, s))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Gelu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Log(a))
    }

    /// `max(min(a, hi), lo)`; gradient 1 on `[lo, hi]` and exactly 0 outside.
    pub fn clip(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, GraphError> {
        self.push(Op::Clip(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::LogSoftmaxRows(a))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm_rows(&mut self, a: NodeId, eps: f64) -> Result<NodeId, GraphError> {
        self.push(Op::LayerNormRows(a, eps))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::MeanAll(a))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::MeanRows(a))
    }

    pub fn max_rows(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::MaxRows(a))
    }

    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::SumCols(a))
    }

    pub fn attn_pool(&mut self, weights: NodeId, rows: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::AttnPool(weights, rows))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        if parts.is_empty() {
            return Err(GraphError::Shape {
                node: self.nodes.len(),
                op: "concat_rows",
                detail: "no operands".into(),
            });
        }
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        if parts.is_empty() {
            return Err(GraphError::Shape {
                node: self.nodes.len(),
                op: "concat_cols",
                detail: "no operands".into(),
            });
        }
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, GraphError> {
        self.push(Op::SliceRows(a, start, end))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, GraphError> {
        self.push(Op::SliceCols(a, start, end))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Vec<usize>) -> Result<NodeId, GraphError> {
        self.push(Op::GatherRows(a, idx))
    }

    /// Rebinds every input leaf from `inputs` and recomputes the graph.
    ///
    /// Parameters and constants keep their recorded values. Each input's
    /// shape must match the shape it was recorded with.
    pub fn evaluate(&mut self, inputs: &HashMap<String, Tensor>) -> Result<(), GraphError> {
        for i in 0..self.nodes.len() {
            match &self.nodes[i].op {
                Op::Input(name) => {
                    let t = inputs
                        .get(name)
                        .ok_or_else(|| GraphError::UnboundInput(name.clone()))?;
                    if t.shape() != self.nodes[i].value.shape() {
                        return Err(GraphError::Shape {
                            node: i,
                            op: "input",
                            detail: format!(
                                "input {name} bound with {:?}, recorded {:?}",
                                t.shape(),
                                self.nodes[i].value.shape()
                            ),
                        });
                    }
                    if !t.is_finite() {
                        return Err(GraphError::NonFinite { node: i, op: "input" });
                    }
                    self.nodes[i].value = t.clone();
                }
                Op::Param(_) | Op::Constant => {}
                op => {
                    let op = op.clone();
                    let value = compute(&op, &self.nodes[..i]).map_err(|detail| GraphError::Shape {
                        node: i,
                        op: op.name(),
                        detail,
                    })?;
                    if !value.is_finite() {
                        return Err(GraphError::NonFinite { node: i, op: op.name() });
                    }
                    self.nodes[i].value = value;
                }
            }
        }
        Ok(())
    }

    /// Backward pass from a named output.
    pub fn backward_named(&self, output: &str, seed: &Tensor) -> Result<Gradients, GraphError> {
        let id = self
            .id(output)
            .ok_or_else(|| GraphError::UnknownName(output.to_string()))?;
        self.backward(id, seed)
    }

    /// Backward pass from a scalar output with seed 1.
    pub fn backward_scalar(&self, output: NodeId) -> Result<Gradients, GraphError> {
        self.backward(output, &Tensor::scalar(1.0))
    }

    /// Reverse-mode sweep seeded with `seed` at `output`.
    pub fn backward(&self, output: NodeId, seed: &Tensor) -> Result<Gradients, GraphError> {
        if output.0 >= self.nodes.len() {
            return Err(GraphError::UnknownName(format!("node {}", output.0)));
        }
        if seed.shape() != self.nodes[output.0].value.shape() {
            return Err(GraphError::SeedShape {
                expected: self.nodes[output.0].value.shape().to_vec(),
                got: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.clone());
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            names: self.names.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |id: &NodeId| &self.nodes[id.0].value;
        let out = &self.nodes[i].value;
        let mut acc = |id: NodeId, t: Tensor| match &mut grads[id.0] {
            Some(existing) => existing.add_scaled(&t, 1.0),
            slot @ None => *slot = Some(t),
        };
        match &self.nodes[i].op {
            Op::Input(_) | Op::Param(_) | Op::Constant | Op::StopGrad(_) => {}
            Op::MatMul(a, b) => {
                let (at, bt) = (val(a), val(b));
                let (n, k, m) = (at.rows(), at.cols(), bt.cols());
                // dA = G · Bᵀ, dB = Aᵀ · G
                let bt_t = bt.transpose();
                acc(*a, Tensor::matrix(n, k, matmul_raw(g.data(), bt_t.data(), n, m, k)));
                let at_t = at.transpose();
                acc(*b, Tensor::matrix(k, m, matmul_raw(at_t.data(), g.data(), k, n, m)));
            }
            Op::MatMulBt(a, b) => {
                let (at, bt) = (val(a), val(b));
                let (n, k, m) = (at.rows(), at.cols(), bt.rows());
                acc(*a, Tensor::matrix(n, k, matmul_raw(g.data(), bt.data(), n, m, k)));
                let g_t = g.transpose();
                acc(*b, Tensor::matrix(m, k, matmul_raw(g_t.data(), at.data(), m, n, k)));
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, zip_map(g, val(b), |x, y| x * y));
                acc(*b, zip_map(g, val(a), |x, y| x * y));
            }
            Op::AddRow(a, r) => {
                let cols = g.cols();
                let mut dr = vec![0.0; cols];
                for i in 0..g.rows() {
                    for (d, x) in dr.iter_mut().zip(g.row(i)) {
                        *d += x;
                    }
                }
                acc(*a, g.clone());
                acc(*r, Tensor::matrix(1, cols, dr));
            }
            Op::MulRow(a, r) => {
                let (at, rt) = (val(a), val(r));
                let cols = g.cols();
                let mut da = g.clone();
                let mut dr = vec![0.0; cols];
                for i in 0..g.rows() {
                    for j in 0..cols {
                        let gv = g.data()[i * cols + j];
                        da.data_mut()[i * cols + j] = gv * rt.data()[j];
                        dr[j] += gv * at.data()[i * cols + j];
                    }
                }
                acc(*a, da);
                acc(*r, Tensor::matrix(1, cols, dr));
            }
            Op::MulCol(a, c) => {
                let (at, ct) = (val(a), val(c));
                let (rows, cols) = (g.rows(), g.cols());
                let mut da = g.clone();
                let mut dc = vec![0.0; rows];
                for i in 0..rows {
                    for j in 0..cols {
                        let gv = g.data()[i * cols + j];
                        da.data_mut()[i * cols + j] = gv * ct.data()[i];
                        dc[i] += gv * at.data()[i * cols + j];
                    }
                }
                acc(*a, da);
                acc(*c, Tensor::matrix(rows, 1, dc));
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddScalar(a, _) => acc(*a, g.clone()),
            Op::Tanh(a) => acc(*a, zip_map(g, out, |gv, y| gv * (1.0 - y * y))),
            Op::Sigmoid(a) => acc(*a, zip_map(g, out, |gv, y| gv * y * (1.0 - y))),
            Op::Relu(a) => acc(*a, zip_map(g, val(a), |gv, x| if x > 0.0 { gv } else { 0.0 })),
            Op::Gelu(a) => acc(*a, zip_map(g, val(a), |gv, x| gv * gelu_grad(x))),
            Op::Exp(a) => acc(*a, zip_map(g, out, |gv, y| gv * y)),
            Op::Log(a) => acc(*a, zip_map(g, val(a), |gv, x| gv / x)),
            Op::Clip(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(
                    *a,
                    zip_map(g, val(a), |gv, x| if x >= lo && x <= hi { gv } else { 0.0 }),
                )
            }
            Op::SoftmaxRows(a) => {
                let cols = g.cols();
                let mut d = vec![0.0; g.len()];
                for i in 0..g.rows() {
                    let (gr, yr) = (g.row(i), out.row(i));
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for j in 0..cols {
                        d[i * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, Tensor::matrix(g.rows(), cols, d));
            }
            Op::LogSoftmaxRows(a) => {
                let cols = g.cols();
                let mut d = vec![0.0; g.len()];
                for i in 0..g.rows() {
                    let (gr, yr) = (g.row(i), out.row(i));
                    let total: f64 = gr.iter().sum();
                    for j in 0..cols {
                        d[i * cols + j] = gr[j] - yr[j].exp() * total;
                    }
                }
                acc(*a, Tensor::matrix(g.rows(), cols, d));
            }
            Op::LayerNormRows(a, eps) => {
                let x = val(a);
                let cols = g.cols();
                let nf = cols as f64;
                let mut d = vec![0.0; g.len()];
                for i in 0..g.rows() {
                    let row = x.row(i);
                    let mean = row.iter().sum::<f64>() / nf;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let (gr, yr) = (g.row(i), out.row(i));
                    let g_mean = gr.iter().sum::<f64>() / nf;
                    let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for j in 0..cols {
                        d[i * cols + j] = inv * (gr[j] - g_mean - yr[j] * gy_mean);
                    }
                }
                acc(*a, Tensor::matrix(g.rows(), cols, d));
            }
            Op::SumAll(a) => {
                let s = g.item();
                acc(*a, Tensor::full(val(a).shape(), s));
            }
            Op::MeanAll(a) => {
                let s = g.item() / val(a).len() as f64;
                acc(*a, Tensor::full(val(a).shape(), s));
            }
            Op::MeanRows(a) => {
                let x = val(a);
                let (rows, cols) = (x.rows(), x.cols());
                let mut d = vec![0.0; rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        d[i * cols + j] = g.data()[j] / rows as f64;
                    }
                }
                acc(*a, Tensor::matrix(rows, cols, d));
            }
            Op::MaxRows(a) => {
                let x = val(a);
                let mut d = Tensor::zeros(x.shape());
                for j in 0..x.cols() {
                    d.data_mut()[argmax_col(x, j)] += g.data()[j];
                }
                acc(*a, d);
            }
            Op::SumCols(a) => {
                let x = val(a);
                let cols = x.cols();
                let mut d = vec![0.0; x.len()];
                for i in 0..x.rows() {
                    for j in 0..cols {
                        d[i * cols + j] = g.data()[i];
                    }
                }
                acc(*a, Tensor::matrix(x.rows(), cols, d));
            }
            Op::AttnPool(w, h) => {
                let (wt, ht) = (val(w), val(h));
                let (rows, cols) = (ht.rows(), ht.cols());
                let mut dw = vec![0.0; rows];
                let mut dh = vec![0.0; rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        dw[i] += g.data()[j] * ht.data()[i * cols + j];
                        dh[i * cols + j] = wt.data()[i] * g.data()[j];
                    }
                }
                acc(*w, Tensor::matrix(rows, 1, dw));
                acc(*h, Tensor::matrix(rows, cols, dh));
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut start = 0;
                for p in parts {
                    let r = val(p).rows();
                    acc(*p, Tensor::matrix(r, cols, g.data()[start * cols..(start + r) * cols].to_vec()));
                    start += r;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for p in parts {
                    let c = val(p).cols();
                    let mut d = Vec::with_capacity(rows * c);
                    for i in 0..rows {
                        d.extend_from_slice(&g.row(i)[offset..offset + c]);
                    }
                    acc(*p, Tensor::matrix(rows, c, d));
                    offset += c;
                }
            }
            Op::SliceRows(a, s, _) => {
                let x = val(a);
                let cols = x.cols();
                let mut d = Tensor::zeros(x.shape());
                d.data_mut()[s * cols..s * cols + g.len()].copy_from_slice(g.data());
                acc(*a, d);
            }
            Op::SliceCols(a, s, e) => {
                let x = val(a);
                let cols = x.cols();
                let mut d = Tensor::zeros(x.shape());
                for i in 0..x.rows() {
                    d.data_mut()[i * cols + s..i * cols + e].copy_from_slice(g.row(i));
                }
                acc(*a, d);
            }
            Op::GatherRows(a, idx) => {
                let x = val(a);
                let cols = x.cols();
                let mut d = Tensor::zeros(x.shape());
                for (k, &r) in idx.iter().enumerate() {
                    for j in 0..cols {
                        d.data_mut()[r * cols + j] += g.data()[k * cols + j];
                    }
                }
                acc(*a, d);
            }
        }
    }
}
