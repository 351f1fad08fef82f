//! Dense f64 matrices, a reverse-mode tape over the handful of ops the model
//! uses, a central-difference gradient checker, and a bit-exact parameter
//! checkpoint format.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::svg::SparseAdjacency;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "[{} values]", self.data.len())
        }
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "new",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Matrix {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: (1, cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in o_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape {
                op: "t_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b_row = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out.row_mut(i).iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.set(i, j, a.iter().zip(other.row(j)).map(|(x, y)| x * y).sum());
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "add")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn relu(&self) -> Matrix {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn row_softmax(&self) -> Matrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        out
    }

    /// Mean of the rows flagged in `mask`, as a `1 × cols` matrix.
    pub fn mean_rows(&self, mask: &[bool]) -> Result<Matrix> {
        if mask.len() != self.rows {
            return Err(Error::Shape {
                op: "mean_rows",
                left: self.shape(),
                right: (mask.len(), 1),
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Shape {
                op: "mean_rows (empty mask)",
                left: self.shape(),
                right: (0, 1),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        let inv = count as f64;
        Ok(Matrix::row_vector(out.into_iter().map(|v| v / inv).collect()))
    }
}

/// `ka·a + kb·b`; a zero weight drops its term so the endpoints return the
/// other operand bit for bit.
pub fn fuse_values(a: &[f64], b: &[f64], ka: f64, kb: f64) -> Vec<f64> {
    match (ka == 0.0, kb == 0.0) {
        (false, true) => a.iter().map(|x| ka * x).collect(),
        (true, false) => b.iter().map(|y| kb * y).collect(),
        (true, true) => vec![0.0; a.len()],
        (false, false) => a.iter().zip(b).map(|(x, y)| ka * x + kb * y).collect(),
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|&x| x - lse).collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    log_softmax(xs).into_iter().map(f64::exp).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter `{name}`");
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.params.push(Parameter { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds `scale · grads` into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in &grads.by_param {
            for (a, b) in self.params[id.0].grad.data_mut().iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
    }

    pub fn norms(&self) -> Vec<(String, f64)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.norm())).collect()
    }

    /// Versioned text container; values are stored as IEEE-754 bit patterns
    /// so a round trip is bit-exact.
    pub fn to_text(&self) -> String {
        let mut out = String::from("vulngraph-params v1\n");
        out.push_str(&format!("count {}\n", self.params.len()));
        for p in &self.params {
            out.push_str(&format!("param {} {} {}\n", p.name, p.value.rows(), p.value.cols()));
            for r in 0..p.value.rows() {
                let line: Vec<String> = p.value.row(r).iter().map(|v| format!("{:016x}", v.to_bits())).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut lines = text.lines();
        if lines.next() != Some("vulngraph-params v1") {
            return Err(bad("missing or unsupported header".into()));
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("count "))
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| bad("missing count".into()))?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let header = lines.next().ok_or_else(|| bad("truncated checkpoint".into()))?;
            let parts: Vec<&str> = header.split(' ').collect();
            if parts.len() != 4 || parts[0] != "param" {
                return Err(bad(format!("bad parameter header `{header}`")));
            }
            let rows: usize = parts[2].parse().map_err(|_| bad(format!("bad rows in `{header}`")))?;
            let cols: usize = parts[3].parse().map_err(|_| bad(format!("bad cols in `{header}`")))?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let line = lines
                    .next()
                    .ok_or_else(|| bad(format!("truncated values for {}", parts[1])))?;
                for word in line.split(' ').filter(|w| !w.is_empty()) {
                    let bits = u64::from_str_radix(word, 16).map_err(|_| bad(format!("bad value `{word}`")))?;
                    data.push(f64::from_bits(bits));
                }
            }
            if store.id(parts[1]).is_some() {
                return Err(bad(format!("duplicate parameter {}", parts[1])));
            }
            let value =
                Matrix::new(rows, cols, data).map_err(|_| bad(format!("wrong value count for {}", parts[1])))?;
            store.add(parts[1], value);
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Seeded initializers.
pub mod init {
    use super::*;

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Uniform in ±√(6 / (fan_in + fan_out)).
    pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Matrix {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        Matrix::new(fan_in, fan_out, data).expect("shape")
    }

    pub fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Matrix::new(rows, cols, data).expect("shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    /// Row lookup into a table; `None` rows are zero vectors.
    Gather {
        table: ParamId,
        rows: Vec<Option<usize>>,
    },
    MatMul(NodeId, NodeId),
    SpMM(Arc<SparseAdjacency>, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Scale(NodeId, f64),
    Fuse {
        a: NodeId,
        b: NodeId,
        ka: f64,
        kb: f64,
    },
    MeanRows(NodeId, Vec<bool>),
    RowSoftmax(NodeId),
    Sum(NodeId),
    /// Scalar function of `input` with a precomputed local gradient.
    ScalarFn {
        input: NodeId,
        local_grad: Matrix,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Per-parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Matrix>,
}

impl Gradients {
    /// Gradient for `id`; `None` when the parameter was not reachable.
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.by_param.get(&id)
    }

    fn add_to(&mut self, id: ParamId, shape: (usize, usize), f: impl FnOnce(&mut Matrix)) {
        let g = self
            .by_param
            .entry(id)
            .or_insert_with(|| Matrix::zeros(shape.0, shape.1));
        f(g);
    }
}

/// Records a forward computation for one scalar loss. Single-threaded; build
/// one tape per sample.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    consumed: bool,
    relu_pattern: Vec<bool>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            consumed: false,
            relu_pattern: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Clears recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.relu_pattern.clear();
        self.consumed = false;
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.get(0, 0)
    }

    /// Sign pattern of every ReLU input seen so far; differs between two
    /// evaluations exactly when some activation crossed the kink.
    pub fn relu_pattern(&self) -> &[bool] {
        &self.relu_pattern
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let value = self.params.value(id).clone();
        self.push(value, Op::Param(id))
    }

    pub fn gather(&mut self, table: ParamId, rows: Vec<Option<usize>>) -> Result<NodeId> {
        let t = self.params.value(table);
        let mut out = Matrix::zeros(rows.len(), t.cols());
        for (r, src) in rows.iter().enumerate() {
            if let Some(src) = *src {
                if src >= t.rows() {
                    return Err(Error::TokenOutOfRange {
                        id: src,
                        size: t.rows(),
                    });
                }
                out.row_mut(r).copy_from_slice(t.row(src));
            }
        }
        Ok(self.push(out, Op::Gather { table, rows }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn spmm(&mut self, adj: Arc<SparseAdjacency>, b: NodeId) -> Result<NodeId> {
        let v = adj.matmul(self.value(b))?;
        Ok(self.push(v, Op::SpMM(adj, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// `a + 1·b` with `b` a `1 × cols` row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::Shape {
                op: "add_row",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(bv.row(0)) {
                *x += y;
            }
        }
        Ok(self.push(v, Op::AddRow(a, b)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let input = &self.nodes[a.0].value;
        self.relu_pattern.extend(input.data().iter().map(|&x| x > 0.0));
        let v = input.relu();
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    /// `ka·a + kb·b` elementwise.
    pub fn fuse(&mut self, a: NodeId, b: NodeId, ka: f64, kb: f64) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        av.same_shape(bv, "fuse")?;
        let v = Matrix::new(av.rows(), av.cols(), fuse_values(av.data(), bv.data(), ka, kb))?;
        Ok(self.push(v, Op::Fuse { a, b, ka, kb }))
    }

    pub fn mean_rows(&mut self, a: NodeId, mask: Vec<bool>) -> Result<NodeId> {
        let v = self.value(a).mean_rows(&mask)?;
        Ok(self.push(v, Op::MeanRows(a, mask)))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).row_softmax();
        self.push(v, Op::RowSoftmax(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Matrix::row_vector(vec![s]), Op::Sum(a))
    }

    /// Records a scalar `value = f(input)` whose gradient w.r.t. `input` the
    /// caller has already computed.
    pub fn scalar_fn(&mut self, input: NodeId, value: f64, local_grad: Matrix) -> Result<NodeId> {
        let shape = self.value(input).shape();
        if local_grad.shape() != shape {
            return Err(Error::Shape {
                op: "scalar_fn",
                left: shape,
                right: local_grad.shape(),
            });
        }
        Ok(self.push(Matrix::row_vector(vec![value]), Op::ScalarFn { input, local_grad }))
    }

    /// Reverse pass from the `1 × 1` node `loss`. May run once per recording.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "backward (loss must be 1x1)",
                left: lv.shape(),
                right: (1, 1),
            });
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", lv.get(0, 0))));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let send = |grads: &mut Vec<Option<Matrix>>, to: NodeId, delta: Matrix| match &mut grads[to.0] {
                Some(existing) => existing.add_assign(&delta).expect("gradient shapes agree"),
                slot @ None => *slot = Some(delta),
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.add_to(*id, g.shape(), |acc| acc.add_assign(&g).expect("shape")),
                Op::Gather { table, rows } => {
                    let shape = self.params.value(*table).shape();
                    out.add_to(*table, shape, |acc| {
                        for (r, src) in rows.iter().enumerate() {
                            if let Some(src) = *src {
                                for (a, b) in acc.row_mut(src).iter_mut().zip(g.row(r)) {
                                    *a += b;
                                }
                            }
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b))?;
                    let db = self.value(*a).t_matmul(&g)?;
                    send(&mut grads, *a, da);
                    send(&mut grads, *b, db);
                }
                Op::SpMM(adj, b) => send(&mut grads, *b, adj.transpose_matmul(&g)),
                Op::Add(a, b) => {
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *b, g);
                }
                Op::AddRow(a, b) => {
                    let mut db = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    send(&mut grads, *b, Matrix::row_vector(db));
                    send(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    send(&mut grads, *a, Matrix::new(g.rows(), g.cols(), data)?);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let data = g.data().iter().zip(y.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                    send(&mut grads, *a, Matrix::new(g.rows(), g.cols(), data)?);
                }
                Op::Scale(a, s) => send(&mut grads, *a, g.scale(*s)),
                Op::Fuse { a, b, ka, kb } => {
                    send(&mut grads, *a, g.scale(*ka));
                    send(&mut grads, *b, g.scale(*kb));
                }
                Op::MeanRows(a, mask) => {
                    let count = mask.iter().filter(|&&m| m).count() as f64;
                    let cols = g.cols();
                    let mut da = Matrix::zeros(mask.len(), cols);
                    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        for (d, v) in da.row_mut(r).iter_mut().zip(g.row(0)) {
                            *d = v / count;
                        }
                    }
                    send(&mut grads, *a, da);
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(g, y)| g * y).sum();
                        for ((d, gv), yv) in da.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *d = yv * (gv - dot);
                        }
                    }
                    send(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    send(&mut grads, *a, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::ScalarFn { input, local_grad } => send(&mut grads, *input, local_grad.scale(g.get(0, 0))),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Check at most this many coordinates per parameter (sampled).
    pub max_coords_per_param: Option<usize>,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tol: 1e-4,
            max_coords_per_param: None,
            floor: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±h perturbation flipped a ReLU.
    pub skipped: usize,
    pub worst: Option<Mismatch>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// Compares tape gradients with central differences `(f(θ+h) − f(θ−h)) / 2h`.
///
/// `f` records the loss on a fresh tape. Coordinates where either
/// perturbation changes the ReLU sign pattern sit within `h` of a kink and
/// are skipped. Relative error is `|a − n| / max(|a|, |n|, floor)`.
pub fn grad_check<F>(store: &mut ParamStore, mut f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<'_>) -> Result<NodeId>,
{
    let (analytic, base_pattern) = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        let grads = tape.backward(loss)?;
        let analytic: Vec<Matrix> = store
            .iter()
            .map(|(id, p)| {
                grads
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(p.value.rows(), p.value.cols()))
            })
            .collect();
        (analytic, tape.relu_pattern().to_vec())
    };

    let mut eval = |store: &ParamStore| -> Result<(f64, bool)> {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss = {v} during finite differences")));
        }
        Ok((v, tape.relu_pattern() == base_pattern.as_slice()))
    };

    let mut rng = init::rng(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
        tol: opts.tol,
    };
    for (pid, grad) in analytic.iter().enumerate() {
        let n = grad.data().len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for idx in coords {
            let id = ParamId(pid);
            let orig = store.value(id).data()[idx];
            store.value_mut(id).data_mut()[idx] = orig + opts.h;
            let plus = eval(store);
            store.value_mut(id).data_mut()[idx] = orig - opts.h;
            let minus = eval(store);
            store.value_mut(id).data_mut()[idx] = orig;
            let ((fp, same_p), (fm, same_m)) = (plus?, minus?);
            if !(same_p && same_m) {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.h);
            let a = grad.data()[idx];
            if !a.is_finite() {
                return Err(Error::NonFinite(format!("analytic gradient {a}")));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some(Mismatch {
                        param: store.get(id).name.clone(),
                        index: idx,
                        analytic: a,
                        numeric,
                        rel_error: rel,
                    });
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Matrix::identity(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn elementwise_ops() {
        assert_eq!(m(&[&[-1.0, 2.0]]).relu(), m(&[&[0.0, 2.0]]));
        assert_eq!(m(&[&[0.0, 0.0]]).row_softmax(), m(&[&[0.5, 0.5]]));
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0], &[100.0, 100.0]]);
        assert_eq!(a.mean_rows(&[true, true, false]).unwrap(), m(&[&[2.0, 3.0]]));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("matmul"), "{msg}");
        assert!(Matrix::zeros(1, 2).add(&Matrix::zeros(2, 1)).is_err());
        assert!(Matrix::zeros(2, 2).mean_rows(&[true]).is_err());
    }

    #[test]
    fn transposed_products_agree() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = m(&[&[1.0, 0.5], &[2.0, -1.0]]);
        assert_eq!(a.t_matmul(&b).unwrap(), a.transpose().matmul(&b).unwrap());
        assert_eq!(b.matmul_t(&b).unwrap(), b.matmul(&b.transpose()).unwrap());
    }

    #[test]
    fn linear_loss_gradient_is_input_per_row() {
        let mut store = ParamStore::new();
        let w = store.add("w", m(&[&[0.3, -0.2, 0.1], &[0.5, 0.4, -0.7]]));
        let x = m(&[&[1.0], &[2.0], &[3.0]]);
        let mut tape = Tape::new(&store);
        let wn = tape.param(w);
        let xn = tape.constant(x);
        let y = tape.matmul(wn, xn).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap(), &m(&[&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]]));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::filled(2, 2, 1.0));
        let mut tape = Tape::new(&store);
        let c = tape.constant(Matrix::filled(1, 1, 3.0));
        let loss = tape.scale(c, 2.0);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(w).is_none());
        store.accumulate(&g, 1.0);
        assert!(store.grad(w).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let c = tape.constant(Matrix::filled(1, 1, 1.0));
        tape.backward(c).unwrap();
        assert!(matches!(tape.backward(c), Err(Error::BackwardTwice)));
        tape.reset();
        let c = tape.constant(Matrix::filled(1, 1, 1.0));
        assert!(tape.backward(c).is_ok());
    }

    #[test]
    fn quadratic_grad_check() {
        let mut store = ParamStore::new();
        let theta = store.add("theta", m(&[&[1.0, 2.0]]));
        {
            let mut tape = Tape::new(&store);
            let t = tape.param(theta);
            let loss = {
                let v = tape.value(t).clone();
                let val = v.data().iter().map(|x| x * x).sum();
                tape.scalar_fn(t, val, v.scale(2.0)).unwrap()
            };
            let g = tape.backward(loss).unwrap();
            assert_eq!(g.get(theta).unwrap(), &m(&[&[2.0, 4.0]]));
        }
        let report = grad_check(
            &mut store,
            |tape| {
                let t = tape.param(theta);
                let v = tape.value(t).clone();
                let val = v.data().iter().map(|x| x * x).sum();
                tape.scalar_fn(t, val, v.scale(2.0))
            },
            GradCheckOptions {
                tol: 1e-8,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked, 2);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut store = ParamStore::new();
        store.add("w", Matrix::filled(2, 2, 0.5));
        let report = grad_check(
            &mut store,
            |tape| Ok(tape.constant(Matrix::filled(1, 1, 7.0))),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn relu_kink_is_skipped() {
        let mut store = ParamStore::new();
        let w = store.add("w", m(&[&[0.0, 1.0]]));
        let report = grad_check(
            &mut store,
            |tape| {
                let n = tape.param(w);
                let r = tape.relu(n);
                Ok(tape.sum(r))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.skipped, 1);
        assert_eq!(report.checked, 1);
        assert!(report.passed());
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::new();
        store.add("w", Matrix::filled(1, 1, 1.0));
        let res = grad_check(
            &mut store,
            |tape| Ok(tape.constant(Matrix::filled(1, 1, f64::NAN))),
            GradCheckOptions::default(),
        );
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }

    /// Random three-layer composition covering every op on the tape.
    fn composite_loss(tape: &mut Tape<'_>, ids: &[ParamId], adj: &Arc<SparseAdjacency>) -> Result<NodeId> {
        let h0 = tape.gather(ids[0], vec![Some(2), Some(0), None, Some(1)])?;
        let w1 = tape.param(ids[1]);
        let h1 = tape.matmul(h0, w1)?;
        let s = tape.spmm(adj.clone(), h1)?;
        let w2 = tape.param(ids[2]);
        let b = tape.param(ids[3]);
        let z = tape.matmul(s, w2)?;
        let z = tape.add_row(z, b)?;
        let r = tape.relu(z);
        let res = tape.add(h1, r)?;
        let pooled = tape.mean_rows(res, vec![true, true, false, true])?;
        let other = tape.mean_rows(h1, vec![true, false, true, true])?;
        let fused = tape.fuse(pooled, other, 0.3, 0.7)?;
        let sig = tape.sigmoid(fused);
        let sm = tape.row_softmax(fused);
        let prod = tape.fuse(sig, sm, 1.0, 2.5)?;
        let w3 = tape.param(ids[4]);
        let y = tape.matmul(prod, w3)?;
        let total = tape.sum(y);
        Ok(tape.scale(total, 0.5))
    }

    #[test]
    fn random_compositions_pass_grad_check() {
        for seed in 0..5u64 {
            let mut rng = init::rng(seed);
            let mut store = ParamStore::new();
            let ids = vec![
                store.add("emb", init::normal(&mut rng, 3, 4, 1.0)),
                store.add("w1", init::xavier_uniform(&mut rng, 4, 5)),
                store.add("w2", init::xavier_uniform(&mut rng, 5, 5)),
                store.add("b", init::normal(&mut rng, 1, 5, 0.1)),
                store.add("w3", init::xavier_uniform(&mut rng, 5, 3)),
            ];
            let adj = Arc::new(SparseAdjacency::identity(4));
            let report = grad_check(
                &mut store,
                |t| composite_loss(t, &ids, &adj),
                GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.passed(), "seed {seed}: {report:?}");
            assert!(report.checked > 40);
        }
    }

    #[test]
    fn checkpoint_text_round_trip_is_bit_exact() {
        let mut rng = init::rng(3);
        let mut store = ParamStore::new();
        store.add("a.weight", init::normal(&mut rng, 3, 2, 1.0));
        store.add("b", Matrix::row_vector(vec![-0.0, f64::MIN_POSITIVE, 1.0 / 3.0]));
        let back = ParamStore::from_text(&store.to_text()).unwrap();
        for ((_, p), (_, q)) in store.iter().zip(back.iter()) {
            assert_eq!(p.name, q.name);
            let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&p.value), bits(&q.value));
        }
        assert!(ParamStore::from_text("garbage").is_err());
    }

    #[test]
    fn forward_is_deterministic_for_seed() {
        let a = init::xavier_uniform(&mut init::rng(9), 6, 4);
        let b = init::xavier_uniform(&mut init::rng(9), 6, 4);
        assert_eq!(a, b);
        let bound = (6.0f64 / 10.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }
}
