//! Reverse-mode differentiation over small dense `f64` arrays.
//!
//! A [`Graph`] is recorded first (define, then run). Leaves are either named
//! inputs, bound at [`Graph::evaluate`] time, or constants baked into the
//! graph. Nodes are appended in creation order, so the node list is already
//! a topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Only row-wise broadcasting exists ([`Graph::add_row`]); every other binary
//! op requires identical shapes.
//!
//! ```
//! use std::collections::BTreeMap;
//! use tor_core::diffcore::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.input("x");
//! let y = g.mul(x, x);
//! g.set_output(y);
//! let mut inputs = BTreeMap::new();
//! inputs.insert("x".to_string(), Tensor::scalar(3.0));
//! assert_eq!(g.evaluate(&inputs).unwrap().item(), 9.0);
//! let grads = g.backward().unwrap();
//! assert_eq!(grads["x"].item(), 6.0);
//! ```

use std::collections::{BTreeMap, HashMap};

use crate::error::{usage, Result, TorError};

/// Dense row-major array. A scalar has shape `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(usage(format!("tensor shape {shape:?} must be non-empty and positive")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(TorError::Shape {
                op: "tensor",
                shapes: format!("shape {shape:?} holds {n} elements, got {}", values.len()),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], values: vec![v] }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "empty vector");
        Self { shape: vec![values.len()], values }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(rows * cols, values.len(), "matrix element count");
        assert!(rows > 0 && cols > 0, "empty matrix");
        Self { shape: vec![rows, cols], values }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), values: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rows of a matrix; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.values.len(), 1);
        self.values[0]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Anything that can bind graph input names to tensors.
pub trait InputSource {
    fn lookup(&self, name: &str) -> Option<&Tensor>;
}

impl InputSource for BTreeMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl InputSource for HashMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Softmax { x: NodeId, causal: bool },
    LogSoftmax(NodeId),
    Gather { x: NodeId, rows: Vec<usize>, cols: Vec<usize> },
    Embed { table: NodeId, ids: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    Concat(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
    Minimum(NodeId, NodeId),
    Clamp { x: NodeId, lo: f64, hi: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Softmax { causal: false, .. } => "softmax",
            Op::Softmax { causal: true, .. } => "causal_softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Gather { .. } => "gather",
            Op::Embed { .. } => "embed",
            Op::ConcatRows(_) => "concat_rows",
            Op::Concat(_) => "concat",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Minimum(..) => "minimum",
            Op::Clamp { .. } => "clamp",
        }
    }
}

/// Recorded computation. See the module docs.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    ops: Vec<Op>,
    inputs: BTreeMap<String, NodeId>,
    output: Option<NodeId>,
    values: Vec<Tensor>,
    adjoint_scale: Option<f64>,
}

/// Gradients of the scalar output, keyed by input name.
pub type Gradients = BTreeMap<String, Tensor>;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scale every input adjoint by `factor`. Only useful as a negative
    /// control for gradient checking.
    pub fn corrupt_adjoints(&mut self, factor: f64) {
        self.adjoint_scale = Some(factor);
    }

    pub fn node_count(&self) -> usize {
        self.ops.len()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.values.clear();
        self.ops.push(op);
        NodeId(self.ops.len() - 1)
    }

    /// Named input; asking twice for the same name yields the same node.
    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(Op::Input(name.to_string()));
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Constant(t))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    /// `a[m, n] + row[n]` broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        self.push(Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::AddScalar(a, c))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax { x: a, causal: false })
    }

    /// Row-wise softmax where row `r` of an `m x n` input only sees columns
    /// `0..=r + n - m` (the rows are the last `m` positions); masked entries
    /// are exactly zero.
    pub fn causal_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax { x: a, causal: true })
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSoftmax(a))
    }

    /// Picks `a[rows[k], cols[k]]` into a vector.
    pub fn gather(&mut self, a: NodeId, rows: Vec<usize>, cols: Vec<usize>) -> NodeId {
        self.push(Op::Gather { x: a, rows, cols })
    }

    /// Row lookup: `table[ids[k], :]` stacked into `[ids.len(), d]`.
    pub fn embed(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        self.push(Op::Embed { table, ids })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    /// Flattens and joins any number of tensors into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Minimum(a, b))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.push(Op::Clamp { x: a, lo, hi })
    }

    pub fn set_output(&mut self, node: NodeId) {
        self.output = Some(node);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    /// Forward value of `node` from the most recent evaluation.
    pub fn value(&self, node: NodeId) -> Option<&Tensor> {
        self.values.get(node.0)
    }

    /// Runs the forward pass, keeping every intermediate for `backward`.
    pub fn evaluate(&mut self, inputs: &dyn InputSource) -> Result<Tensor> {
        let out = self.output.ok_or_else(|| usage("graph has no output node"))?;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.ops.len());
        for (idx, op) in self.ops.iter().enumerate() {
            let v = forward(op, &values, inputs)?;
            if !v.is_finite() {
                return Err(TorError::Numeric { node: idx, op: op.name() });
            }
            values.push(v);
        }
        self.values = values;
        Ok(self.values[out.0].clone())
    }

    /// Reverse sweep from the scalar output. Every named input receives a
    /// gradient; inputs that do not influence the output get zeros.
    pub fn backward(&mut self) -> Result<Gradients> {
        let out = self.output.ok_or_else(|| usage("graph has no output node"))?;
        if self.values.len() != self.ops.len() {
            return Err(usage("backward called before evaluate"));
        }
        if self.values[out.0].len() != 1 {
            return Err(usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.values[out.0].shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.ops.len()];
        adj[out.0] = Some(vec![1.0]);
        for idx in (0..=out.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TorError::Numeric { node: idx, op: self.ops[idx].name() });
            }
            match &self.ops[idx] {
                Op::Input(_) => {
                    adj[idx] = Some(g);
                }
                Op::Constant(_) => {}
                op => backprop(op, &self.values, idx, &g, &mut adj),
            }
        }
        let scale = self.adjoint_scale.unwrap_or(1.0);
        let mut grads = Gradients::new();
        for (name, &id) in &self.inputs {
            let shape = self.values[id.0].shape().to_vec();
            let mut values = adj[id.0].take().unwrap_or_else(|| vec![0.0; self.values[id.0].len()]);
            if scale != 1.0 {
                values.iter_mut().for_each(|v| *v *= scale);
            }
            grads.insert(name.clone(), Tensor { shape, values });
        }
        Ok(grads)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TorError {
    TorError::Shape { op, shapes: format!("{:?} vs {:?}", a.shape, b.shape) }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(shape_err(op, a, b));
    }
    Ok(())
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor { shape: a.shape.clone(), values: a.values.iter().map(|&x| f(x)).collect() }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        values: a.values.iter().zip(&b.values).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn require_matrix(op: &'static str, a: &Tensor) -> Result<()> {
    if a.shape.len() != 2 {
        return Err(TorError::Shape { op, shapes: format!("expected a matrix, got {:?}", a.shape) });
    }
    Ok(())
}

fn as_rows(a: &Tensor) -> (usize, usize) {
    (a.rows(), a.cols())
}

/// Max-subtracted softmax of one row over its first `visible` entries.
fn softmax_row(row: &[f64], visible: usize, out: &mut [f64]) {
    let m = row[..visible].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for j in 0..visible {
        out[j] = (row[j] - m).exp();
        z += out[j];
    }
    for o in out[..visible].iter_mut() {
        *o /= z;
    }
    for o in out[visible..].iter_mut() {
        *o = 0.0;
    }
}

fn forward(op: &Op, vals: &[Tensor], inputs: &dyn InputSource) -> Result<Tensor> {
    let v = |id: &NodeId| &vals[id.0];
    Ok(match op {
        Op::Input(name) => inputs
            .lookup(name)
            .cloned()
            .ok_or_else(|| usage(format!("input `{name}` is not bound")))?,
        Op::Constant(t) => t.clone(),
        Op::MatMul(a, b) => {
            let (a, b) = (v(a), v(b));
            require_matrix("matmul", a)?;
            require_matrix("matmul", b)?;
            let (m, k) = (a.shape[0], a.shape[1]);
            let (k2, n) = (b.shape[0], b.shape[1]);
            if k != k2 {
                return Err(shape_err("matmul", a, b));
            }
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = a.values[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &b.values[p * n..(p + 1) * n];
                    for (o, &y) in orow.iter_mut().zip(brow) {
                        *o += x * y;
                    }
                }
            }
            Tensor { shape: vec![m, n], values: out }
        }
        Op::Transpose(a) => {
            let a = v(a);
            require_matrix("transpose", a)?;
            let (m, n) = (a.shape[0], a.shape[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = a.values[i * n + j];
                }
            }
            Tensor { shape: vec![n, m], values: out }
        }
        Op::Add(a, b) => {
            same_shape("add", v(a), v(b))?;
            zip(v(a), v(b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            same_shape("sub", v(a), v(b))?;
            zip(v(a), v(b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            same_shape("mul", v(a), v(b))?;
            zip(v(a), v(b), |x, y| x * y)
        }
        Op::AddRow(a, r) => {
            let (a, r) = (v(a), v(r));
            if r.shape.len() != 1 || a.cols() != r.len() {
                return Err(shape_err("add_row", a, r));
            }
            let n = r.len();
            let mut out = a.clone();
            for (i, x) in out.values.iter_mut().enumerate() {
                *x += r.values[i % n];
            }
            out
        }
        Op::Scale(a, c) => map(v(a), |x| x * c),
        Op::AddScalar(a, c) => map(v(a), |x| x + c),
        Op::Exp(a) => map(v(a), f64::exp),
        Op::Log(a) => map(v(a), f64::ln),
        Op::Tanh(a) => map(v(a), f64::tanh),
        Op::Softmax { x, causal } => {
            let a = v(x);
            let (m, n) = as_rows(a);
            if *causal && m > n {
                return Err(TorError::Shape {
                    op: "causal_softmax",
                    shapes: format!("{m} rows exceed {n} columns"),
                });
            }
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let visible = if *causal { i + 1 + n - m } else { n };
                softmax_row(&a.values[i * n..(i + 1) * n], visible, &mut out[i * n..(i + 1) * n]);
            }
            Tensor { shape: a.shape.clone(), values: out }
        }
        Op::LogSoftmax(x) => {
            let a = v(x);
            let (m, n) = as_rows(a);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &a.values[i * n..(i + 1) * n];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
                for j in 0..n {
                    out[i * n + j] = row[j] - lse;
                }
            }
            Tensor { shape: a.shape.clone(), values: out }
        }
        Op::Gather { x, rows, cols } => {
            let a = v(x);
            let (m, n) = as_rows(a);
            if rows.len() != cols.len() || rows.is_empty() {
                return Err(TorError::Shape {
                    op: "gather",
                    shapes: format!("{} rows vs {} cols", rows.len(), cols.len()),
                });
            }
            let mut out = Vec::with_capacity(rows.len());
            for (&r, &c) in rows.iter().zip(cols) {
                if r >= m || c >= n {
                    return Err(TorError::Shape {
                        op: "gather",
                        shapes: format!("index ({r}, {c}) outside {:?}", a.shape),
                    });
                }
                out.push(a.values[r * n + c]);
            }
            Tensor::vector(out)
        }
        Op::Embed { table, ids } => {
            let t = v(table);
            require_matrix("embed", t)?;
            let (vocab, d) = (t.shape[0], t.shape[1]);
            if ids.is_empty() {
                return Err(TorError::Shape { op: "embed", shapes: "no ids".into() });
            }
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= vocab {
                    return Err(TorError::Shape {
                        op: "embed",
                        shapes: format!("id {id} outside table {:?}", t.shape),
                    });
                }
                out.extend_from_slice(&t.values[id * d..(id + 1) * d]);
            }
            Tensor { shape: vec![ids.len(), d], values: out }
        }
        Op::ConcatRows(parts) => {
            let first = v(&parts[0]);
            let n = first.cols();
            let mut rows = 0;
            let mut out = Vec::new();
            for p in parts {
                let t = v(p);
                if t.cols() != n || t.shape.len() > 2 {
                    return Err(shape_err("concat_rows", first, t));
                }
                rows += t.rows();
                out.extend_from_slice(&t.values);
            }
            Tensor { shape: vec![rows, n], values: out }
        }
        Op::Concat(parts) => {
            if parts.is_empty() {
                return Err(TorError::Shape { op: "concat", shapes: "no parts".into() });
            }
            Tensor::vector(parts.iter().flat_map(|p| v(p).values.iter().copied()).collect())
        }
        Op::Sum(a) => Tensor::scalar(v(a).values.iter().sum()),
        Op::Mean(a) => {
            let a = v(a);
            Tensor::scalar(a.values.iter().sum::<f64>() / a.len() as f64)
        }
        Op::Minimum(a, b) => {
            same_shape("minimum", v(a), v(b))?;
            zip(v(a), v(b), f64::min)
        }
        Op::Clamp { x, lo, hi } => map(v(x), |z| z.clamp(*lo, *hi)),
    })
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: NodeId, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = adj[id.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn backprop(op: &Op, vals: &[Tensor], idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let out = &vals[idx];
    match op {
        Op::Input(_) | Op::Constant(_) => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&vals[a.0], &vals[b.0]);
            let (m, k) = (av.shape[0], av.shape[1]);
            let n = bv.shape[1];
            // dA = G B^T
            accumulate(adj, *a, m * k, |da| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv.values[p * n..(p + 1) * n];
                        da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            });
            // dB = A^T G
            accumulate(adj, *b, k * n, |db| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let x = av.values[i * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        for (d, &y) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *d += x * y;
                        }
                    }
                }
            });
        }
        Op::Transpose(a) => {
            let (n, m) = (out.shape[0], out.shape[1]);
            accumulate(adj, *a, m * n, |da| {
                for j in 0..n {
                    for i in 0..m {
                        da[i * n + j] += g[j * m + i];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(adj, *a, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, x)| *d += x));
            accumulate(adj, *b, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, x)| *d += x));
        }
        Op::Sub(a, b) => {
            accumulate(adj, *a, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, x)| *d += x));
            accumulate(adj, *b, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, x)| *d -= x));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&vals[a.0].values, &vals[b.0].values);
            accumulate(adj, *a, g.len(), |d| {
                for i in 0..g.len() {
                    d[i] += g[i] * bv[i];
                }
            });
            accumulate(adj, *b, g.len(), |d| {
                for i in 0..g.len() {
                    d[i] += g[i] * av[i];
                }
            });
        }
        Op::AddRow(a, r) => {
            let n = vals[r.0].len();
            accumulate(adj, *a, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, x)| *d += x));
            accumulate(adj, *r, n, |d| {
                for (i, x) in g.iter().enumerate() {
                    d[i % n] += x;
                }
            });
        }
        Op::Scale(a, c) => {
            accumulate(adj, *a, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, x)| *d += c * x));
        }
        Op::AddScalar(a, _) => {
            accumulate(adj, *a, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, x)| *d += x));
        }
        Op::Exp(a) => {
            accumulate(adj, *a, g.len(), |d| {
                for i in 0..g.len() {
                    d[i] += g[i] * out.values[i];
                }
            });
        }
        Op::Log(a) => {
            let av = &vals[a.0].values;
            accumulate(adj, *a, g.len(), |d| {
                for i in 0..g.len() {
                    d[i] += g[i] / av[i];
                }
            });
        }
        Op::Tanh(a) => {
            accumulate(adj, *a, g.len(), |d| {
                for i in 0..g.len() {
                    let y = out.values[i];
                    d[i] += g[i] * (1.0 - y * y);
                }
            });
        }
        Op::Softmax { x, .. } => {
            let (m, n) = as_rows(out);
            accumulate(adj, *x, g.len(), |d| {
                for i in 0..m {
                    let y = &out.values[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[i * n + j] += y[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmax(x) => {
            let (m, n) = as_rows(out);
            accumulate(adj, *x, g.len(), |d| {
                for i in 0..m {
                    let y = &out.values[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        d[i * n + j] += gr[j] - y[j].exp() * total;
                    }
                }
            });
        }
        Op::Gather { x, rows, cols } => {
            let src = &vals[x.0];
            let n = src.cols();
            accumulate(adj, *x, src.len(), |d| {
                for (k, (&r, &c)) in rows.iter().zip(cols).enumerate() {
                    d[r * n + c] += g[k];
                }
            });
        }
        Op::Embed { table, ids } => {
            let t = &vals[table.0];
            let dm = t.shape[1];
            accumulate(adj, *table, t.len(), |d| {
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..dm {
                        d[id * dm + j] += g[k * dm + j];
                    }
                }
            });
        }
        Op::ConcatRows(parts) | Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = vals[p.0].len();
                let slice = &g[offset..offset + len];
                accumulate(adj, *p, len, |d| d.iter_mut().zip(slice).for_each(|(d, x)| *d += x));
                offset += len;
            }
        }
        Op::Sum(a) => {
            let len = vals[a.0].len();
            accumulate(adj, *a, len, |d| d.iter_mut().for_each(|d| *d += g[0]));
        }
        Op::Mean(a) => {
            let len = vals[a.0].len();
            let s = g[0] / len as f64;
            accumulate(adj, *a, len, |d| d.iter_mut().for_each(|d| *d += s));
        }
        Op::Minimum(a, b) => {
            let (av, bv) = (&vals[a.0].values, &vals[b.0].values);
            accumulate(adj, *a, g.len(), |d| {
                for i in 0..g.len() {
                    if av[i] <= bv[i] {
                        d[i] += g[i];
                    }
                }
            });
            accumulate(adj, *b, g.len(), |d| {
                for i in 0..g.len() {
                    if av[i] > bv[i] {
                        d[i] += g[i];
                    }
                }
            });
        }
        Op::Clamp { x, lo, hi } => {
            let xv = &vals[x.0].values;
            accumulate(adj, *x, g.len(), |d| {
                for i in 0..g.len() {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        d[i] += g[i];
                    }
                }
            });
        }
    }
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Largest relative error per input name.
    pub per_input: BTreeMap<String, f64>,
    pub max_error: f64,
    /// Coordinate holding `max_error`: (input, flat index, analytic, numeric).
    pub worst: Option<(String, usize, f64, f64)>,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks every coordinate of every graph input against the central
/// difference `(f(x+h) - f(x-h)) / 2h`.
pub fn finite_difference_check(
    graph: &mut Graph,
    inputs: &BTreeMap<String, Tensor>,
    h: f64,
    tolerance: f64,
) -> Result<FdReport> {
    if !(h > 0.0 && h <= 1e-3) {
        return Err(usage(format!("finite-difference step {h} outside (0, 1e-3]")));
    }
    graph.evaluate(inputs)?;
    let analytic = graph.backward()?;
    let mut work = inputs.clone();
    let names: Vec<String> = graph.input_names().map(str::to_string).collect();
    let mut per_input = BTreeMap::new();
    let mut max_error = 0.0f64;
    let mut worst = None;
    for name in names {
        let n = work
            .get(&name)
            .map(Tensor::len)
            .ok_or_else(|| usage(format!("input `{name}` is not bound")))?;
        let mut input_max = 0.0f64;
        for k in 0..n {
            let orig = work[&name].values[k];
            work.get_mut(&name).unwrap().values[k] = orig + h;
            let plus = graph.evaluate(&work)?.item();
            work.get_mut(&name).unwrap().values[k] = orig - h;
            let minus = graph.evaluate(&work)?.item();
            work.get_mut(&name).unwrap().values[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[&name].values[k];
            let err = relative_error(a, numeric);
            input_max = input_max.max(err);
            if err > max_error || worst.is_none() {
                max_error = max_error.max(err);
                worst = Some((name.clone(), k, a, numeric));
            }
        }
        per_input.insert(name, input_max);
    }
    // leave the graph holding values for the unperturbed inputs
    graph.evaluate(inputs)?;
    Ok(FdReport { per_input, max_error, worst, tolerance, passed: max_error <= tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Tensor)]) -> BTreeMap<String, Tensor> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn square_value_and_gradient() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.mul(x, x);
        g.set_output(y);
        let inputs = bind(&[("x", Tensor::scalar(3.0))]);
        assert_eq!(g.evaluate(&inputs).unwrap().item(), 9.0);
        assert_eq!(g.backward().unwrap()["x"].item(), 6.0);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input("x");
        let s = g.softmax(x);
        g.set_output(s);
        let out = g.evaluate(&bind(&[("x", Tensor::vector(vec![0.0; 3]))])).unwrap();
        for v in out.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_hand_values() {
        let mut g = Graph::new();
        let x = g.input("x");
        let s = g.log_softmax(x);
        g.set_output(s);
        let out = g.evaluate(&bind(&[("x", Tensor::vector(vec![1.0, 2.0]))])).unwrap();
        // log(e^1 / (e^1 + e^2)) = -ln(1 + e)
        let expected = -(1.0 + std::f64::consts::E).ln();
        assert!((out.values()[0] - expected).abs() < 1e-14);
        assert!((out.values()[0] - (-1.3132616875182228)).abs() < 1e-12);
        assert!((out.values()[1] - (-0.31326168751822286)).abs() < 1e-12);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input("x");
        let unused = g.input("unused");
        let c = g.constant(Tensor::scalar(5.0));
        let zero = g.scale(x, 0.0);
        let out = g.add(c, zero);
        g.set_output(out);
        let _ = unused;
        g.evaluate(&bind(&[("x", Tensor::scalar(2.0)), ("unused", Tensor::vector(vec![1.0, 2.0]))]))
            .unwrap();
        let grads = g.backward().unwrap();
        assert_eq!(grads["x"].item(), 0.0);
        assert_eq!(grads["unused"].values(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let c = g.matmul(a, b);
        g.set_output(c);
        let err = g
            .evaluate(&bind(&[
                ("a", Tensor::matrix(2, 3, vec![0.0; 6])),
                ("b", Tensor::matrix(2, 3, vec![0.0; 6])),
            ]))
            .unwrap_err();
        match err {
            TorError::Shape { op, shapes } => {
                assert_eq!(op, "matmul");
                assert!(shapes.contains("[2, 3]"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_reports_node() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.log(x);
        g.set_output(y);
        let err = g.evaluate(&bind(&[("x", Tensor::scalar(0.0))])).unwrap_err();
        assert!(matches!(err, TorError::Numeric { node: 1, op: "log" }));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.exp(x);
        g.set_output(y);
        g.evaluate(&bind(&[("x", Tensor::vector(vec![1.0, 2.0]))])).unwrap();
        assert!(matches!(g.backward(), Err(TorError::Usage(_))));
    }

    #[test]
    fn unbound_input_is_usage_error() {
        let mut g = Graph::new();
        let x = g.input("x");
        g.set_output(x);
        assert!(matches!(g.evaluate(&BTreeMap::new()), Err(TorError::Usage(_))));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let x = g.input("x");
        let s = g.causal_softmax(x);
        g.set_output(s);
        let out = g.evaluate(&bind(&[("x", Tensor::matrix(2, 2, vec![5.0, 9.0, 1.0, 1.0]))])).unwrap();
        assert_eq!(out.values(), &[1.0, 0.0, 0.5, 0.5]);
    }

    fn quadratic_graph() -> (Graph, BTreeMap<String, Tensor>) {
        // f(x) = sum_i c_i x_i^2 + x_0 x_4
        let mut g = Graph::new();
        let x = g.input("x");
        let c = g.constant(Tensor::vector(vec![1.0, -2.0, 0.5, 3.0, 1.5]));
        let xx = g.mul(x, x);
        let w = g.mul(c, xx);
        let s = g.sum(w);
        let pick = g.gather(x, vec![0], vec![0]);
        let pick4 = g.gather(x, vec![0], vec![4]);
        let cross = g.mul(pick, pick4);
        let cs = g.sum(cross);
        let out = g.add(s, cs);
        g.set_output(out);
        let inputs = bind(&[("x", Tensor::vector(vec![0.3, -1.2, 2.0, 0.7, -0.4]))]);
        (g, inputs)
    }

    #[test]
    fn fd_check_quadratic_passes() {
        let (mut g, inputs) = quadratic_graph();
        let report = finite_difference_check(&mut g, &inputs, 1e-5, 1e-4).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn fd_check_linear_is_exact() {
        let mut g = Graph::new();
        let x = g.input("x");
        let c = g.constant(Tensor::vector(vec![2.0, -3.0, 0.25]));
        let p = g.mul(c, x);
        let s = g.sum(p);
        g.set_output(s);
        let inputs = bind(&[("x", Tensor::vector(vec![1.0, 2.0, 3.0]))]);
        // Dyadic steps keep x +- h exact, so only the final division rounds.
        for h in [1e-3, 1e-4, 2f64.powi(-10), 2f64.powi(-20)] {
            let report = finite_difference_check(&mut g, &inputs, h, 1e-4).unwrap();
            assert!(report.max_error <= 1e-10, "h={h}: {}", report.max_error);
        }
    }

    #[test]
    fn fd_check_detects_corrupted_adjoint() {
        let (mut g, inputs) = quadratic_graph();
        g.corrupt_adjoints(1.1);
        let report = finite_difference_check(&mut g, &inputs, 1e-5, 1e-4).unwrap();
        assert!(!report.passed);
        assert!(report.max_error > 0.05);
    }

    #[test]
    fn fd_step_out_of_range() {
        let (mut g, inputs) = quadratic_graph();
        assert!(finite_difference_check(&mut g, &inputs, 1e-2, 1e-4).is_err());
        assert!(finite_difference_check(&mut g, &inputs, 0.0, 1e-4).is_err());
    }
}
