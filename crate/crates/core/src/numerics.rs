//! Dense row-major tensors with a reverse-mode tape.
//!
//! Everything is `f64`. Values recorded on a [`Tape`] are computed eagerly;
//! [`Tape::backward`] walks the record in reverse and accumulates gradients
//! into the [`ParamStore`] that supplied the parameter leaves.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("oracle error: {0}")]
    Oracle(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(NumericsError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(NumericsError::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return shape_err("Tensor::new", &shape, &[data.len()]);
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            let r = r.as_ref();
            if r.len() != n {
                return shape_err("Tensor::from_rows", &[m, n], &[r.len()]);
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![m, n], data)
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(NumericsError::Contract(format!(
                "{op} expects a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            self.shape.first().copied().unwrap_or(1)
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let n = self.cols();
        &self.data[r * n..(r + 1) * n]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.matrix_dims("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Index of the largest entry in row `r`; ties resolve to the lowest index.
    pub fn argmax_row(&self, r: usize) -> usize {
        argmax(self.row(r))
    }
}

/// Lowest index of the maximum value.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, n) = b.matrix_dims("matmul")?;
    if k != k2 {
        return shape_err("matmul", &a.shape, &b.shape);
    }
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[m×n] += a[m×k] · b[n×k]ᵀ
fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// out[k×n] += a[m×k]ᵀ · b[m×n]
fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Row-wise softmax with max subtraction. Rank-0 and rank-1 inputs are
/// treated as a single row.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let n = x.cols();
    for row in out.data.chunks_mut(n) {
        softmax_in_place(row);
    }
    out
}

pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let n = x.cols();
    for row in out.data.chunks_mut(n) {
        log_softmax_in_place(row);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named learnable tensors, in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NumericsError::Contract(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Order-sensitive digest of every parameter value, bit-exact.
    pub fn checksum(&self) -> u64 {
        // FNV-1a over names and value bits
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for p in &self.params {
            p.name.bytes().for_each(&mut eat);
            for v in &p.value.data {
                v.to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    ParamRows(ParamId, Vec<Option<usize>>),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<Option<usize>>),
    Reshape(Var),
    Pick(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Single-owner record of differentiable operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Records a value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Gathers rows of a matrix parameter; `None` yields a zero row.
    pub fn param_rows(
        &mut self,
        store: &ParamStore,
        id: ParamId,
        rows: &[Option<usize>],
    ) -> Result<Var> {
        let table = store.value(id);
        let (m, n) = table.matrix_dims("param_rows")?;
        let mut data = Vec::with_capacity(rows.len() * n);
        for r in rows {
            match r {
                Some(r) if *r < m => data.extend_from_slice(table.row(*r)),
                Some(r) => {
                    return Err(NumericsError::Contract(format!(
                        "row {r} out of range for parameter with {m} rows"
                    )))
                }
                None => data.extend(std::iter::repeat_n(0.0, n)),
            }
        }
        let value = Tensor::new(vec![rows.len(), n], data)?;
        Ok(self.push(value, Op::ParamRows(id, rows.to_vec())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).matrix_dims("matmul_bt")?;
        let (n, k2) = self.value(b).matrix_dims("matmul_bt")?;
        if k != k2 {
            return shape_err("matmul_bt", self.shape(a), self.shape(b));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_acc(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |p, q| p * q);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|v| *v *= c);
        self.push(value, Op::Scale(a, c))
    }

    /// Adds a length-n row vector to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.value(a).matrix_dims("add_row")?;
        if self.value(row).len() != n {
            return shape_err("add_row", self.shape(a), self.shape(row));
        }
        let mut value = self.value(a).clone();
        let r = &self.value(row).data;
        for chunk in value.data.chunks_mut(n) {
            for (v, b) in chunk.iter_mut().zip(r) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    /// Multiplies every entry of `a` by the single value held in `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return shape_err("mul_scalar", self.shape(a), self.shape(s));
        }
        let c = self.value(s).item();
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|v| *v *= c);
        Ok(self.push(value, Op::MulScalar(a, s)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|v| *v = v.tanh());
        self.push(value, Op::Tanh(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        self.push(value, Op::LogSoftmaxRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(value, Op::Mean(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| NumericsError::Contract("concat_cols of nothing".into()))?;
        let (m, _) = self.value(first).matrix_dims("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.value(p).matrix_dims("concat_cols")?;
            if mp != m {
                return shape_err("concat_cols", self.shape(first), self.shape(p));
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(Tensor::new(vec![m, total], data)?, Op::ConcatCols(parts.to_vec())))
    }

    /// Row gather; `None` produces a zero row.
    pub fn gather_rows(&mut self, a: Var, rows: &[Option<usize>]) -> Result<Var> {
        let (m, n) = self.value(a).matrix_dims("gather_rows")?;
        let mut data = Vec::with_capacity(rows.len() * n);
        for r in rows {
            match r {
                Some(r) if *r < m => data.extend_from_slice(self.value(a).row(*r)),
                Some(r) => {
                    return Err(NumericsError::Contract(format!(
                        "gather row {r} out of range for {m} rows"
                    )))
                }
                None => data.extend(std::iter::repeat_n(0.0, n)),
            }
        }
        let value = Tensor::new(vec![rows.len(), n], data)?;
        Ok(self.push(value, Op::GatherRows(a, rows.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Selects `a[i, cols[i]]` for every row, giving a vector of length m.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = self.value(a).matrix_dims("pick")?;
        if cols.len() != m {
            return shape_err("pick", self.shape(a), &[cols.len()]);
        }
        if let Some(c) = cols.iter().find(|&&c| c >= n) {
            return Err(NumericsError::Contract(format!(
                "pick column {c} out of range for {n} columns"
            )));
        }
        let data = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| self.value(a).data[i * n + c])
            .collect();
        Ok(self.push(Tensor::new(vec![m], data)?, Op::Pick(a, cols.to_vec())))
    }

    /// Accumulates d(loss)/d(parameter) into `store` for every parameter
    /// leaf reachable from `loss`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    for (acc, d) in p.grad.data.iter_mut().zip(&g.data) {
                        *acc += d;
                    }
                }
                Op::ParamRows(id, rows) => {
                    let p = store.get_mut(*id);
                    let n = p.value.cols();
                    for (k, r) in rows.iter().enumerate() {
                        if let Some(r) = r {
                            let dst = &mut p.grad.data[r * n..(r + 1) * n];
                            for (acc, d) in dst.iter_mut().zip(&g.data[k * n..(k + 1) * n]) {
                                *acc += d;
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                    // dA = G · Bᵀ ; dB = Aᵀ · G
                    let ga = accum(&mut grads, *a, &av.shape);
                    matmul_bt_acc(&g.data, &bv.data, ga, m, n, k);
                    let gb = accum(&mut grads, *b, &bv.shape);
                    matmul_at_acc(&av.data, &g.data, gb, m, k, n);
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[0]);
                    // C = A Bᵀ: dA = G · B ; dB = Gᵀ · A
                    let ga = accum(&mut grads, *a, &av.shape);
                    matmul_into_acc(&g.data, &bv.data, ga, m, n, k);
                    let gb = accum(&mut grads, *b, &bv.shape);
                    matmul_at_acc(&g.data, &av.data, gb, m, n, k);
                }
                Op::Transpose(a) => {
                    let gt = g.transpose()?;
                    add_into(accum(&mut grads, *a, self.shape(*a)), &gt.data);
                }
                Op::Add(a, b) => {
                    add_into(accum(&mut grads, *a, self.shape(*a)), &g.data);
                    add_into(accum(&mut grads, *b, self.shape(*b)), &g.data);
                }
                Op::Sub(a, b) => {
                    add_into(accum(&mut grads, *a, self.shape(*a)), &g.data);
                    let gb = accum(&mut grads, *b, self.shape(*b));
                    for (acc, d) in gb.iter_mut().zip(&g.data) {
                        *acc -= d;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = accum(&mut grads, *a, &av.shape);
                    for ((acc, d), y) in ga.iter_mut().zip(&g.data).zip(&bv.data) {
                        *acc += d * y;
                    }
                    let gb = accum(&mut grads, *b, &bv.shape);
                    for ((acc, d), x) in gb.iter_mut().zip(&g.data).zip(&av.data) {
                        *acc += d * x;
                    }
                }
                Op::Scale(a, c) => {
                    let ga = accum(&mut grads, *a, self.shape(*a));
                    for (acc, d) in ga.iter_mut().zip(&g.data) {
                        *acc += d * c;
                    }
                }
                Op::AddRow(a, row) => {
                    add_into(accum(&mut grads, *a, self.shape(*a)), &g.data);
                    let n = self.value(*row).len();
                    let gr = accum(&mut grads, *row, self.shape(*row));
                    for chunk in g.data.chunks(n) {
                        add_into(gr, chunk);
                    }
                }
                Op::MulScalar(a, s) => {
                    let c = self.value(*s).item();
                    let av = self.value(*a);
                    let ga = accum(&mut grads, *a, &av.shape);
                    for (acc, d) in ga.iter_mut().zip(&g.data) {
                        *acc += d * c;
                    }
                    let dot: f64 = g.data.iter().zip(&av.data).map(|(d, x)| d * x).sum();
                    accum(&mut grads, *s, self.shape(*s))[0] += dot;
                }
                Op::Tanh(a) => {
                    let y = &node.value.data;
                    let ga = accum(&mut grads, *a, self.shape(*a));
                    for ((acc, d), y) in ga.iter_mut().zip(&g.data).zip(y) {
                        *acc += d * (1.0 - y * y);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let n = y.cols();
                    let ga = accum(&mut grads, *a, self.shape(*a));
                    for ((gy, yr), acc) in g
                        .data
                        .chunks(n)
                        .zip(y.data.chunks(n))
                        .zip(ga.chunks_mut(n))
                    {
                        let dot: f64 = gy.iter().zip(yr).map(|(d, p)| d * p).sum();
                        for ((o, d), p) in acc.iter_mut().zip(gy).zip(yr) {
                            *o += p * (d - dot);
                        }
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let n = y.cols();
                    let ga = accum(&mut grads, *a, self.shape(*a));
                    for ((gy, yr), acc) in g
                        .data
                        .chunks(n)
                        .zip(y.data.chunks(n))
                        .zip(ga.chunks_mut(n))
                    {
                        let total: f64 = gy.iter().sum();
                        for ((o, d), ly) in acc.iter_mut().zip(gy).zip(yr) {
                            *o += d - ly.exp() * total;
                        }
                    }
                }
                Op::Sum(a) => {
                    let d = g.item();
                    accum(&mut grads, *a, self.shape(*a))
                        .iter_mut()
                        .for_each(|acc| *acc += d);
                }
                Op::Mean(a) => {
                    let d = g.item() / self.value(*a).len() as f64;
                    accum(&mut grads, *a, self.shape(*a))
                        .iter_mut()
                        .for_each(|acc| *acc += d);
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let np = self.value(p).cols();
                        let gp = accum(&mut grads, p, self.shape(p));
                        for (i, dst) in gp.chunks_mut(np).enumerate() {
                            let src = &g.data[i * total + offset..i * total + offset + np];
                            add_into(dst, src);
                        }
                        offset += np;
                    }
                }
                Op::GatherRows(a, rows) => {
                    let n = self.value(*a).cols();
                    let ga = accum(&mut grads, *a, self.shape(*a));
                    for (k, r) in rows.iter().enumerate() {
                        if let Some(r) = r {
                            add_into(&mut ga[r * n..(r + 1) * n], &g.data[k * n..(k + 1) * n]);
                        }
                    }
                }
                Op::Reshape(a) => {
                    add_into(accum(&mut grads, *a, self.shape(*a)), &g.data);
                }
                Op::Pick(a, cols) => {
                    let n = self.value(*a).cols();
                    let ga = accum(&mut grads, *a, self.shape(*a));
                    for (i, &c) in cols.iter().enumerate() {
                        ga[i * n + c] += g.data[i];
                    }
                }
            }
        }
        Ok(())
    }
}

fn accum<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut [f64] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data
        .as_mut_slice()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

// out[m×k] += a[m×n] · b[n×k]
fn matmul_into_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let orow = &mut out[i * k..(i + 1) * k];
        for j in 0..n {
            let av = a[i * n + j];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[j * k..(j + 1) * k]) {
                *o += av * bv;
            }
        }
    }
}

pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Central-difference gradient oracle.
///
/// Runs `f` once with backward to get the tape gradient of `param`, then
/// perturbs each coordinate by `±eps`. The relative error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-4)`: below the floor
/// the comparison is absolute, since a central difference of a flat function
/// is pure rounding noise.
pub fn finite_difference_check<F, E>(
    mut f: F,
    store: &mut ParamStore,
    param: ParamId,
    eps: f64,
) -> std::result::Result<f64, E>
where
    F: FnMut(&ParamStore, &mut Tape) -> std::result::Result<Var, E>,
    E: From<NumericsError>,
{
    if !(eps > 0.0) {
        return Err(NumericsError::Contract(format!("eps must be positive, got {eps}")).into());
    }
    let eval = |store: &ParamStore, f: &mut F| -> std::result::Result<f64, E> {
        let mut tape = Tape::new();
        let loss = f(store, &mut tape)?;
        Ok(tape.value(loss).item())
    };

    let base_a = eval(store, &mut f)?;
    let base_b = eval(store, &mut f)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(NumericsError::Oracle(format!(
            "function is not deterministic: {base_a} vs {base_b}"
        ))
        .into());
    }

    let saved_grads: Vec<Tensor> = store.iter().map(|p| p.grad.clone()).collect();
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    tape.backward(loss, store)?;
    let analytic = store.get(param).grad.clone();
    for (p, g) in store.iter_mut().zip(saved_grads) {
        p.grad = g;
    }

    let mut worst: f64 = 0.0;
    for i in 0..analytic.len() {
        let orig = store.get(param).value.data[i];
        store.get_mut(param).value.data[i] = orig + eps;
        let plus = eval(store, &mut f)?;
        store.get_mut(param).value.data[i] = orig - eps;
        let minus = eval(store, &mut f)?;
        store.get_mut(param).value.data[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}
