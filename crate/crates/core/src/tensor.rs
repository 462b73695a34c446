//! Dense double-precision tensors and a tape for reverse-mode differentiation.
//!
//! Every operation on a [`Tape`] evaluates eagerly and, when the tape records,
//! remembers its operands so [`Tape::backward`] can replay the chain rule in
//! reverse recording order. Trainable values live in a [`ParamStore`]; the
//! tape copies them in on use and scatters gradients back out.
//!
//! There is no broadcasting. Matrix operations require rank-2 operands with
//! exactly compatible shapes, and the few row-wise operations that combine a
//! matrix with a row or column vector are separate, explicitly named ops
//! ([`Tape::add_row`], [`Tape::scale_rows`]).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::sync::atomic::{AtomicU32, Ordering};

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
    },
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    NonFinite {
        op: &'static str,
    },
    NotScalar {
        shape: Vec<usize>,
    },
    Detached,
    DuplicateParameter(String),
    EmptyInput {
        op: &'static str,
    },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            TensorError::BadShape { op, shape } => write!(f, "{op}: unsupported shape {shape:?}"),
            TensorError::IndexOutOfRange { op, index, len } => {
                write!(f, "{op}: index {index} out of range for length {len}")
            }
            TensorError::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            TensorError::NotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            TensorError::Detached => write!(f, "backward called on a tensor with no recorded graph"),
            TensorError::DuplicateParameter(name) => write!(f, "duplicate parameter name `{name}`"),
            TensorError::EmptyInput { op } => write!(f, "{op}: empty input"),
        }
    }
}

type Result<T> = core::result::Result<T, TensorError>;

/// Row-major dense array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::BadShape { op: "tensor", shape });
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1, 1], data: vec![value] }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::BadShape { op, shape: self.shape.clone() }),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter is initialized; biases start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named trainable tensors with gradient accumulators.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, role: ParamRole, value: Tensor) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(TensorError::DuplicateParameter(name.into()));
        }
        let grad = Tensor::zeros(value.shape.clone());
        self.params.push(Parameter { name: name.into(), role, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn total_size(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u32,
    idx: u32,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Lookup(Vec<(ParamId, usize, f64)>),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    SegmentSoftmax(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ScaleRows(Var, Var),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    Bce(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
}

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Records operations for one forward pass.
pub struct Tape {
    id: u32,
    record: bool,
    nodes: Vec<Node>,
    relu_signs: Vec<i8>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_mode(true)
    }

    /// A tape that evaluates but keeps no graph; `backward` on it fails.
    pub fn without_grad() -> Self {
        Self::with_mode(false)
    }

    fn with_mode(record: bool) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            record,
            nodes: Vec::new(),
            relu_signs: Vec::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx as usize].value
    }

    /// Sign (-1, 0, +1) of every ReLU input seen so far, in evaluation order.
    pub fn relu_pattern(&self) -> &[i8] {
        &self.relu_signs
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Ok(Var { tape: self.id, idx: (self.nodes.len() - 1) as u32 })
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx as usize >= self.nodes.len() {
            return Err(TensorError::Detached);
        }
        Ok(())
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.check(v)?;
        self.value(v).dims(op)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let value = store.get(id).value.clone();
        self.push("param", value, Op::Param(id))
    }

    /// Stacks scaled parameter rows: output row `r` is `scale_r * table_r[row_r]`.
    ///
    /// All referenced tables must share a column count.
    pub fn lookup(&mut self, store: &ParamStore, entries: Vec<(ParamId, usize, f64)>) -> Result<Var> {
        let first = entries.first().ok_or(TensorError::EmptyInput { op: "lookup" })?;
        let cols = store.get(first.0).value.dims("lookup")?.1;
        let mut data = Vec::with_capacity(entries.len() * cols);
        for &(pid, row, scale) in &entries {
            let table = &store.get(pid).value;
            let (rows, c) = table.dims("lookup")?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "lookup",
                    lhs: vec![cols],
                    rhs: vec![c],
                });
            }
            if row >= rows {
                return Err(TensorError::IndexOutOfRange { op: "lookup", index: row, len: rows });
            }
            data.extend(table.row(row).iter().map(|v| v * scale));
        }
        let value = Tensor::matrix(entries.len(), cols, data)?;
        self.push("lookup", value, Op::Lookup(entries))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "transpose")?;
        let out = transpose_raw(self.value(a).data(), m, n);
        self.push("transpose", Tensor::matrix(n, m, out)?, Op::Transpose(a))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, "scale", |x| x * c, Op::Scale(a, c))
    }

    fn map(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| f(*x)).collect())?;
        self.push(name, t, op)
    }

    /// Adds the `1 x m` row `b` to every row of the `n x m` matrix `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.dims(x, "add_row")?;
        let (br, bm) = self.dims(b, "add_row")?;
        if br != 1 || bm != m {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: vec![n, m],
                rhs: vec![br, bm],
            });
        }
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(m.max(1)) {
            row.iter_mut().zip(&bias).for_each(|(v, b)| *v += b);
        }
        self.push("add_row", Tensor::matrix(n, m, data)?, Op::AddRow(x, b))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::EmptyInput { op: "concat_cols" })?;
        let (n, _) = self.dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p, "concat_cols")?;
            if r != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: vec![r, c],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push("concat_cols", Tensor::matrix(n, total, data)?, Op::ConcatCols(parts.to_vec()))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::EmptyInput { op: "concat_rows" })?;
        let (_, m) = self.dims(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p, "concat_rows")?;
            if c != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: vec![r, c],
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * m);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        self.push("concat_rows", Tensor::matrix(rows, m, data)?, Op::ConcatRows(parts.to_vec()))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, "sigmoid", sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, "tanh", libm::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let signs: Vec<i8> = self.value(a).data().iter().map(|&x| sign(x)).collect();
        self.relu_signs.extend(signs);
        self.map(a, "relu", |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims(a, "softmax")?;
        let mut data = self.value(a).data().to_vec();
        if m > 0 {
            for row in data.chunks_mut(m) {
                softmax_in_place(row);
            }
        }
        self.push("softmax", Tensor::matrix(n, m, data)?, Op::Softmax(a))
    }

    /// Softmax of an `n x 1` column taken separately within each segment.
    pub fn segment_softmax(&mut self, a: Var, segments: Vec<usize>) -> Result<Var> {
        let (n, m) = self.dims(a, "segment_softmax")?;
        if m != 1 || segments.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "segment_softmax",
                lhs: vec![n, m],
                rhs: vec![segments.len(), 1],
            });
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; n];
        for group in segment_groups(&segments) {
            let mut vals: Vec<f64> = group.iter().map(|&r| x[r]).collect();
            softmax_in_place(&mut vals);
            for (&r, v) in group.iter().zip(vals) {
                out[r] = v;
            }
        }
        self.push("segment_softmax", Tensor::matrix(n, 1, out)?, Op::SegmentSoftmax(a, segments))
    }

    /// Sums the rows of `a` that share a segment id into `n_segments` output rows.
    pub fn segment_sum(&mut self, a: Var, segments: Vec<usize>, n_segments: usize) -> Result<Var> {
        let (n, m) = self.dims(a, "segment_sum")?;
        if segments.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "segment_sum",
                lhs: vec![n, m],
                rhs: vec![segments.len()],
            });
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; n_segments * m];
        for (r, &s) in segments.iter().enumerate() {
            if s >= n_segments {
                return Err(TensorError::IndexOutOfRange { op: "segment_sum", index: s, len: n_segments });
            }
            for c in 0..m {
                out[s * m + c] += x[r * m + c];
            }
        }
        self.push("segment_sum", Tensor::matrix(n_segments, m, out)?, Op::SegmentSum(a, segments))
    }

    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        let (n, m) = self.dims(a, "gather_rows")?;
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * m);
        for &r in &index {
            if r >= n {
                return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: r, len: n });
            }
            out.extend_from_slice(&x[r * m..(r + 1) * m]);
        }
        self.push("gather_rows", Tensor::matrix(index.len(), m, out)?, Op::GatherRows(a, index))
    }

    /// Multiplies row `r` of the `n x m` matrix `x` by entry `r` of the `n x 1` column `s`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, m) = self.dims(x, "scale_rows")?;
        let (sn, sm) = self.dims(s, "scale_rows")?;
        if sn != n || sm != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                lhs: vec![n, m],
                rhs: vec![sn, sm],
            });
        }
        let sv = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for (r, row) in data.chunks_mut(m.max(1)).enumerate().take(n) {
            row.iter_mut().for_each(|v| *v *= sv[r]);
        }
        self.push("scale_rows", Tensor::matrix(n, m, data)?, Op::ScaleRows(x, s))
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims(a, "row_sum")?;
        let x = self.value(a).data();
        let out = (0..n).map(|r| x[r * m..(r + 1) * m].iter().sum()).collect();
        self.push("row_sum", Tensor::matrix(n, 1, out)?, Op::RowSum(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a);
        if v.is_empty() {
            return Err(TensorError::EmptyInput { op: "mean" });
        }
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a))
    }

    /// Mean binary cross-entropy of `n x 1` probabilities against 0/1 labels,
    /// with probabilities clamped to `[PROB_EPSILON, 1 - PROB_EPSILON]`.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let (n, m) = self.dims(p, "bce")?;
        if m != 1 || labels.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "bce",
                lhs: vec![n, m],
                rhs: vec![labels.len(), 1],
            });
        }
        if n == 0 {
            return Err(TensorError::EmptyInput { op: "bce" });
        }
        let loss = binary_cross_entropy(self.value(p).data(), labels);
        self.push("bce", Tensor::scalar(loss), Op::Bce(p, labels.to_vec()))
    }

    /// Back-propagates from the scalar `loss`, adding each parameter's
    /// gradient into `store`. Gradients accumulate until zeroed.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.check(loss)?;
        if !self.record {
            return Err(TensorError::Detached);
        }
        let shape = self.value(loss).shape();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar { shape: shape.to_vec() });
        }
        let end = loss.idx as usize + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..end).map(|_| None).collect();
        grads[end - 1] = Some(vec![1.0]);
        for i in (0..end).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads, store);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], store: &mut ParamStore) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(pid) => {
                let grad = &mut store.get_mut(*pid).grad.data;
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Op::Lookup(entries) => {
                let cols = out.shape()[1];
                for (r, &(pid, row, scale)) in entries.iter().enumerate() {
                    let grad = &mut store.get_mut(pid).grad.data[row * cols..(row + 1) * cols];
                    for c in 0..cols {
                        grad[c] += scale * g[r * cols + c];
                    }
                }
            }
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                let bt = transpose_raw(vb.data(), k, n);
                let da = matmul_raw(g, &bt, m, n, k);
                let at = transpose_raw(va.data(), m, k);
                let db = matmul_raw(&at, g, k, m, n);
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::Transpose(a) => {
                let (n, m) = (out.shape()[0], out.shape()[1]);
                accumulate(grads, *a, &transpose_raw(g, n, m));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let da: Vec<f64> = g.iter().zip(vb).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(va).map(|(g, x)| g * x).collect();
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                accumulate(grads, *a, &da);
            }
            Op::AddRow(x, b) => {
                let m = out.shape()[1];
                accumulate(grads, *x, g);
                let mut db = vec![0.0; m];
                if m > 0 {
                    for row in g.chunks(m) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
                accumulate(grads, *b, &db);
            }
            Op::ConcatCols(parts) => {
                let (n, total) = (out.shape()[0], out.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut dp = Vec::with_capacity(n * w);
                    for r in 0..n {
                        dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(grads, p, &dp);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    accumulate(grads, p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::Sigmoid(a) => {
                let d: Vec<f64> = g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(grads, *a, &d);
            }
            Op::Tanh(a) => {
                let d: Vec<f64> = g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                accumulate(grads, *a, &d);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d: Vec<f64> = g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                accumulate(grads, *a, &d);
            }
            Op::Softmax(a) => {
                let m = out.shape()[1];
                let mut d = vec![0.0; out.len()];
                if m > 0 {
                    for ((dr, yr), gr) in d.chunks_mut(m).zip(out.data().chunks(m)).zip(g.chunks(m)) {
                        softmax_backward(yr, gr, dr);
                    }
                }
                accumulate(grads, *a, &d);
            }
            Op::SegmentSoftmax(a, segments) => {
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for group in segment_groups(segments) {
                    let dot: f64 = group.iter().map(|&r| g[r] * y[r]).sum();
                    for &r in &group {
                        d[r] = y[r] * (g[r] - dot);
                    }
                }
                accumulate(grads, *a, &d);
            }
            Op::SegmentSum(a, segments) => {
                let m = out.shape()[1];
                let mut d = Vec::with_capacity(segments.len() * m);
                for &s in segments {
                    d.extend_from_slice(&g[s * m..(s + 1) * m]);
                }
                accumulate(grads, *a, &d);
            }
            Op::GatherRows(a, index) => {
                let src = self.value(*a);
                let m = src.shape()[1];
                let mut d = vec![0.0; src.len()];
                for (k, &r) in index.iter().enumerate() {
                    for c in 0..m {
                        d[r * m + c] += g[k * m + c];
                    }
                }
                accumulate(grads, *a, &d);
            }
            Op::ScaleRows(x, s) => {
                let vx = self.value(*x);
                let vs = self.value(*s).data();
                let m = vx.shape()[1];
                let n = vx.shape()[0];
                let mut dx = vec![0.0; vx.len()];
                let mut ds = vec![0.0; n];
                for r in 0..n {
                    for c in 0..m {
                        let k = r * m + c;
                        dx[k] = g[k] * vs[r];
                        ds[r] += g[k] * vx.data()[k];
                    }
                }
                accumulate(grads, *x, &dx);
                accumulate(grads, *s, &ds);
            }
            Op::RowSum(a) => {
                let src = self.value(*a);
                let m = src.shape()[1];
                let mut d = Vec::with_capacity(src.len());
                for &gr in g {
                    d.extend(core::iter::repeat_n(gr, m));
                }
                accumulate(grads, *a, &d);
            }
            Op::Sum(a) => {
                let d = vec![g[0]; self.value(*a).len()];
                accumulate(grads, *a, &d);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let d = vec![g[0] / n as f64; n];
                accumulate(grads, *a, &d);
            }
            Op::Bce(p, labels) => {
                let pv = self.value(*p).data();
                let n = pv.len() as f64;
                let d: Vec<f64> = pv
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        if p <= PROB_EPSILON || p >= 1.0 - PROB_EPSILON {
                            0.0
                        } else {
                            -g[0] * (y / p - (1.0 - y) / (1.0 - p)) / n
                        }
                    })
                    .collect();
                accumulate(grads, *p, &d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut grads[v.idx as usize] {
        Some(existing) => existing.iter_mut().zip(d).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d.to_vec()),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, y)| *o += x * y);
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Row indices grouped by segment id, groups ordered by id.
fn segment_groups(segments: &[usize]) -> Vec<Vec<usize>> {
    let n_groups = segments.iter().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); n_groups];
    for (r, &s) in segments.iter().enumerate() {
        groups[s].push(r);
    }
    groups.retain(|g| !g.is_empty());
    groups
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = libm::exp(*x - max);
        total += *x;
    }
    xs.iter_mut().for_each(|x| *x /= total);
}

fn softmax_backward(y: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
    for ((o, y), g) in out.iter_mut().zip(y).zip(g) {
        *o = y * (g - dot);
    }
}

/// Mean binary cross-entropy with the same clamping as [`Tape::bce`].
pub fn binary_cross_entropy(probs: &[f64], labels: &[f64]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
            y * libm::log(p) + (1.0 - y) * libm::log(1.0 - p)
        })
        .sum();
    -total / probs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add(name, ParamRole::Weight, t).unwrap();
        (s, id)
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0)).unwrap();
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn softmax_of_single_element_is_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 1, vec![-3.7]).unwrap()).unwrap();
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0]);
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap()).unwrap();
        let b = tape.constant(Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap()).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 3] }
        );
        let msg = alloc::format!("{err}");
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"));
    }

    #[test]
    fn square_gradient() {
        let (mut store, x) = store_with("x", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let v = tape.param(&store, x).unwrap();
        let sq = tape.mul(v, v).unwrap();
        tape.backward(sq, &mut store).unwrap();
        assert_eq!(store.get(x).grad.data(), &[6.0]);
    }

    #[test]
    fn sigmoid_sum_gradient_at_zero() {
        let (mut store, x) = store_with("x", Tensor::zeros(vec![1, 3]));
        let mut tape = Tape::new();
        let v = tape.param(&store, x).unwrap();
        let s = tape.sigmoid(v).unwrap();
        let total = tape.sum(s).unwrap();
        tape.backward(total, &mut store).unwrap();
        assert_eq!(store.get(x).grad.data(), &[0.25, 0.25, 0.25]);
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let (mut store, x) = store_with("x", Tensor::scalar(3.0));
        for _ in 0..2 {
            let mut tape = Tape::new();
            let v = tape.param(&store, x).unwrap();
            let sq = tape.mul(v, v).unwrap();
            tape.backward(sq, &mut store).unwrap();
        }
        assert_eq!(store.get(x).grad.data(), &[12.0]);
        store.zero_grads();
        assert_eq!(store.get(x).grad.data(), &[0.0]);
    }

    #[test]
    fn backward_on_untracked_tape_is_detached() {
        let (mut store, x) = store_with("x", Tensor::scalar(3.0));
        let mut tape = Tape::without_grad();
        let v = tape.param(&store, x).unwrap();
        let sq = tape.mul(v, v).unwrap();
        assert_eq!(tape.backward(sq, &mut store), Err(TensorError::Detached));

        let mut other = Tape::new();
        let w = other.param(&store, x).unwrap();
        let tape2 = Tape::new();
        assert_eq!(tape2.backward(w, &mut store), Err(TensorError::Detached));
    }

    #[test]
    fn backward_requires_scalar() {
        let (mut store, x) = store_with("x", Tensor::zeros(vec![1, 2]));
        let mut tape = Tape::new();
        let v = tape.param(&store, x).unwrap();
        assert!(matches!(tape.backward(v, &mut store), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn non_finite_values_trip_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(f64::MAX)).unwrap();
        assert_eq!(tape.add(a, a), Err(TensorError::NonFinite { op: "add" }));
    }

    #[test]
    fn duplicate_parameter_names_rejected() {
        let (mut store, _) = store_with("w", Tensor::scalar(1.0));
        assert!(matches!(
            store.add("w", ParamRole::Bias, Tensor::scalar(0.0)),
            Err(TensorError::DuplicateParameter(_))
        ));
    }

    #[test]
    fn relu_subgradient_is_zero_at_kink() {
        let (mut store, x) = store_with("x", Tensor::matrix(1, 3, vec![-1.0, 0.0, 2.0]).unwrap());
        let mut tape = Tape::new();
        let v = tape.param(&store, x).unwrap();
        let r = tape.relu(v).unwrap();
        let s = tape.sum(r).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.get(x).grad.data(), &[0.0, 0.0, 1.0]);
        assert_eq!(tape.relu_pattern(), &[-1, 0, 1]);
    }

    #[test]
    fn segment_softmax_normalizes_each_segment() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(5, 1, vec![0.3, -1.0, 2.0, 0.5, 0.5]).unwrap()).unwrap();
        let y = tape.segment_softmax(x, vec![0, 0, 2, 1, 1]).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + v[1] - 1.0).abs() < 1e-15);
        assert_eq!(v[2], 1.0);
        assert_eq!(v[3], 0.5);
        assert_eq!(v[4], 0.5);
    }

    #[test]
    fn bce_of_half_is_ln2() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::matrix(2, 1, vec![0.5, 0.5]).unwrap()).unwrap();
        let l = tape.bce(p, &[1.0, 0.0]).unwrap();
        assert!((tape.value(l).data()[0] - core::f64::consts::LN_2).abs() < 1e-15);
    }
}
