//! Dense f64 tensors and an eager reverse-mode tape.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters live in
//! a [`ParamStore`] that the graph borrows immutably, so frozen weights are
//! never copied into the tape. Calling [`Graph::backward`] walks the records in
//! reverse once and returns a [`Gradients`] table; the graph is then dropped.

use std::collections::HashMap;

use crate::error::{contract_err, shape_err, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = v);
        t
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err!("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(shape_err!("shape {:?} must be non-empty with entries >= 1", shape));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors. `requires_grad` on each tensor marks it trainable.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        let id = ParamId(self.tensors.len());
        assert!(
            self.by_name.insert(name.clone(), id).is_none(),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor.with_grad(trainable));
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.get(id).requires_grad).collect()
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| !self.get(id).requires_grad).collect()
    }

    /// Adds the parameter gradients in `grads` onto each trainable tensor's `grad`.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            let t = &mut self.tensors[id.0];
            if !t.requires_grad {
                continue;
            }
            match &mut t.grad {
                Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => t.grad = Some(g.to_vec()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Min,
    Avg,
}

#[derive(Debug)]
enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

#[derive(Debug)]
enum Op {
    /// Input leaf or any value with no recorded history.
    Leaf,
    Param,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    Mul(usize, usize),
    AddRow { x: usize, bias: usize },
    Scale(usize, f64),
    Gelu(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(usize),
    ConcatLast(usize, usize),
    ConcatRows(Vec<usize>),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    Reshape(usize),
    Sum(usize),
    Pool { x: usize, kind: PoolKind, pick: Vec<usize> },
    CrossEntropy { logits: usize, probs: Vec<f64>, targets: Vec<usize> },
    Bce { logits: usize, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    requires_grad: bool,
}

impl Node {
    fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Eager tape for a single forward/backward pass.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    // Row-major a is m×k (or k×m when a_t); b is k×n (or n×k when b_t).
    if m * k * n <= SMALL_GEMM {
        return gemm_small(m, k, n, a, a_t, b, b_t, c, beta);
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Below this many multiply-adds packing overhead outweighs the blocked kernel.
const SMALL_GEMM: usize = 1 << 16;

#[allow(clippy::too_many_arguments)]
fn gemm_small(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    if beta == 0.0 {
        c.fill(0.0);
    } else if beta != 1.0 {
        c.iter_mut().for_each(|v| *v *= beta);
    }
    let at = |i: usize, p: usize| if a_t { a[p * m + i] } else { a[i * k + p] };
    if b_t {
        for i in 0..m {
            for j in 0..n {
                let bj = &b[j * k..(j + 1) * k];
                let mut acc = 0.0;
                if a_t {
                    for (p, &bv) in bj.iter().enumerate() {
                        acc += a[p * m + i] * bv;
                    }
                } else {
                    acc = a[i * k..(i + 1) * k].iter().zip(bj).map(|(x, y)| x * y).sum();
                }
                c[i * n + j] += acc;
            }
        }
    } else {
        for i in 0..m {
            let ci = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = at(i, p);
                for (cv, &bv) in ci.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *cv += av * bv;
                }
            }
        }
    }
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn gelu_scalar(x: f64) -> f64 {
    x * norm_cdf(x)
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => &self.store.get(*id).data,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols()
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].numel() / self.cols(v)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.value(v).to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { shape, value: Value::Owned(data), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf tensor; its `requires_grad` flag decides whether it
    /// receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.nodes.push(Node { shape: t.shape, value: Value::Owned(t.data), op: Op::Leaf, requires_grad: rg });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(false))
    }

    /// References a stored parameter without copying it. Repeated calls for
    /// the same id return the same node, so uses accumulate into one gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let t = self.store.get(id);
        self.nodes.push(Node {
            shape: t.shape.clone(),
            value: Value::Param(id),
            op: Op::Param,
            requires_grad: t.requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    fn matrix_dims(&self, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(shape_err!("expected a matrix, got shape {:?}", s));
        }
        Ok((s[0], s[1]))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a)?;
        let (k2, n) = self.matrix_dims(b)?;
        if k != k2 {
            return Err(shape_err!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a: a.0, b: b.0, trans_b: false }, rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a)?;
        let (n, k2) = self.matrix_dims(b)?;
        if k != k2 {
            return Err(shape_err!(
                "matmul_t inner dimensions differ: {:?} x {:?}^T",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), true, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a: a.0, b: b.0, trans_b: true }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a.0, b.0), rg))
    }

    /// Adds a length-n vector to every row of `x[..×n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.cols(x);
        if self.nodes[bias.0].numel() != n {
            return Err(shape_err!("add_row: bias {:?} does not match rows of {:?}", self.shape(bias), self.shape(x)));
        }
        let b = self.value(bias);
        let out: Vec<f64> = self.value(x).iter().enumerate().map(|(i, v)| v + b[i % n]).collect();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow { x: x.0, bias: bias.0 }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x.0, c), rg)
    }

    /// Exact-erf GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| gelu_scalar(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x.0), rg)
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.cols(x);
        for (p, nm) in [(gamma, "gamma"), (beta, "beta")] {
            if self.nodes[p.0].numel() != d {
                return Err(shape_err!("layernorm {nm} {:?} does not match last axis of {:?}", self.shape(p), self.shape(x)));
            }
        }
        let rows = self.rows(x);
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, rstd };
        Ok(self.push(self.shape(x).to_vec(), out, op, rg))
    }

    /// Row-wise softmax over the last axis, max-shifted.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let n = self.cols(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Softmax(x.0), rg)
    }

    pub fn concat_last_axis(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err!("concat_last_axis: leading shapes {:?} and {:?} differ", sa, sb));
        }
        let (ca, cb) = (self.cols(a), self.cols(b));
        let rows = self.rows(a);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&va[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&vb[r * cb..(r + 1) * cb]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::ConcatLast(a.0, b.0), rg))
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err!("concat_rows of nothing"));
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let c = self.cols(parts[0]);
        let mut rows = 0;
        for &p in parts {
            if self.shape(p).len() != 2 || self.cols(p) != c {
                return Err(shape_err!("concat_rows: {:?} does not have {} columns", self.shape(p), c));
            }
            rows += self.rows(p);
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x)?;
        if len == 0 || start + len > r {
            return Err(shape_err!("slice_rows {start}..{} out of range for {:?}", start + len, self.shape(x)));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![len, c], out, Op::SliceRows { x: x.0, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x)?;
        if len == 0 || start + len > c {
            return Err(shape_err!("slice_cols {start}..{} out of range for {:?}", start + len, self.shape(x)));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![r, len], out, Op::SliceCols { x: x.0, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.nodes[x.0].numel() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x.0), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Pools the rows of `x[L×d]` into a `1×d` row.
    pub fn pool_rows(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let (r, c) = self.matrix_dims(x)?;
        let xv = self.value(x);
        let mut out = vec![0.0; c];
        let mut pick = vec![0usize; c];
        for j in 0..c {
            match kind {
                PoolKind::Avg => out[j] = (0..r).map(|i| xv[i * c + j]).sum::<f64>() / r as f64,
                PoolKind::Max | PoolKind::Min => {
                    let mut best = 0;
                    for i in 1..r {
                        let better = match kind {
                            PoolKind::Max => xv[i * c + j] > xv[best * c + j],
                            _ => xv[i * c + j] < xv[best * c + j],
                        };
                        if better {
                            best = i;
                        }
                    }
                    pick[j] = best;
                    out[j] = xv[best * c + j];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![1, c], out, Op::Pool { x: x.0, kind, pick }, rg))
    }

    /// Mean softmax cross-entropy of `logits[B×C]` against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let c = self.cols(logits);
        let b = self.rows(logits);
        if targets.len() != b {
            return Err(shape_err!("cross_entropy: {} targets for {} rows", targets.len(), b));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(crate::error::input_err!("label {t} out of range for {c} classes"));
        }
        let mut probs = self.value(logits).to_vec();
        for row in probs.chunks_mut(c) {
            softmax_in_place(row);
        }
        // log-sum-exp keeps large-margin losses accurate
        let lv = self.value(logits);
        let mut exact = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * c..(r + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            exact += lse - row[t];
        }
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy { logits: logits.0, probs, targets: targets.to_vec() };
        Ok(self.push(vec![1], vec![exact / b as f64], op, rg))
    }

    /// Mean binary cross-entropy with logits over every entry of `logits`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let n = self.nodes[logits.0].numel();
        if targets.len() != n {
            return Err(shape_err!("bce: {} targets for {} logits", targets.len(), n));
        }
        if targets.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
            return Err(crate::error::input_err!("bce targets must lie in [0, 1]"));
        }
        let lv = self.value(logits);
        let loss: f64 = lv
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(vec![1], vec![loss], Op::Bce { logits: logits.0, targets: targets.to_vec() }, rg))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(contract_err!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params: Vec<(ParamId, usize)> = self
            .param_nodes
            .iter()
            .filter(|(_, v)| grads[v.0].is_some())
            .map(|(&id, v)| (id, v.0))
            .collect();
        params.sort();
        Ok(Gradients { by_node: grads, params })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |id: usize| self.nodes[id].requires_grad;
        let val = |id: usize| match &self.nodes[id].value {
            Value::Owned(d) => d.as_slice(),
            Value::Param(p) => self.store.get(*p).data.as_slice(),
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let k = self.nodes[*a].shape[1];
                if needs(*a) {
                    // dA = G · Bᵀ (or G · B when b was transposed)
                    let buf = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, val(*b), !*trans_b, buf, 1.0);
                }
                if needs(*b) {
                    if *trans_b {
                        // dB[n×k] = Gᵀ · A
                        let buf = slot(grads, *b, n * k);
                        gemm(n, m, k, g, true, val(*a), false, buf, 1.0);
                    } else {
                        // dB[k×n] = Aᵀ · G
                        let buf = slot(grads, *b, k * n);
                        gemm(k, m, n, val(*a), true, g, false, buf, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                for &p in [a, b] {
                    if needs(p) {
                        add_into(slot(grads, p, g.len()), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let vb = val(*b);
                    let buf = slot(grads, *a, g.len());
                    buf.iter_mut().zip(g.iter().zip(vb)).for_each(|(o, (gi, bi))| *o += gi * bi);
                }
                if needs(*b) {
                    let va = val(*a);
                    let buf = slot(grads, *b, g.len());
                    buf.iter_mut().zip(g.iter().zip(va)).for_each(|(o, (gi, ai))| *o += gi * ai);
                }
            }
            Op::AddRow { x, bias } => {
                if needs(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if needs(*bias) {
                    let n = node.cols();
                    let buf = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        add_into(buf, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                if needs(*x) {
                    let buf = slot(grads, *x, g.len());
                    buf.iter_mut().zip(g).for_each(|(o, gi)| *o += gi * c);
                }
            }
            Op::Gelu(x) => {
                if needs(*x) {
                    let xv = val(*x);
                    let buf = slot(grads, *x, g.len());
                    for ((o, gi), &xi) in buf.iter_mut().zip(g).zip(xv) {
                        *o += gi * (norm_cdf(xi) + xi * norm_pdf(xi));
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = node.cols();
                let rows = rstd.len();
                if needs(*gamma) {
                    let buf = slot(grads, *gamma, d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            buf[j] += gr[j] * hr[j];
                        }
                    }
                }
                if needs(*beta) {
                    let buf = slot(grads, *beta, d);
                    for gr in g.chunks(d) {
                        add_into(buf, gr);
                    }
                }
                if needs(*x) {
                    let gam = val(*gamma).to_vec();
                    let buf = slot(grads, *x, rows * d);
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_gh = 0.0;
                        let mut mean_ghx = 0.0;
                        for j in 0..d {
                            let gh = gr[j] * gam[j];
                            mean_gh += gh;
                            mean_ghx += gh * hr[j];
                        }
                        mean_gh /= d as f64;
                        mean_ghx /= d as f64;
                        for j in 0..d {
                            let gh = gr[j] * gam[j];
                            buf[r * d + j] += rstd[r] * (gh - mean_gh - hr[j] * mean_ghx);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if needs(*x) {
                    let n = node.cols();
                    let y = match &node.value {
                        Value::Owned(d) => d.as_slice(),
                        Value::Param(_) => unreachable!(),
                    };
                    let buf = slot(grads, *x, g.len());
                    for ((br, gr), yr) in buf.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            br[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::ConcatLast(a, b) => {
                let (ca, cb) = (self.nodes[*a].cols(), self.nodes[*b].cols());
                let rows = g.len() / (ca + cb);
                if needs(*a) {
                    let buf = slot(grads, *a, rows * ca);
                    for r in 0..rows {
                        add_into(&mut buf[r * ca..(r + 1) * ca], &g[r * (ca + cb)..r * (ca + cb) + ca]);
                    }
                }
                if needs(*b) {
                    let buf = slot(grads, *b, rows * cb);
                    for r in 0..rows {
                        add_into(&mut buf[r * cb..(r + 1) * cb], &g[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p].numel();
                    if needs(p) {
                        add_into(slot(grads, p, n), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                if needs(*x) {
                    let c = node.cols();
                    let n = self.nodes[*x].numel();
                    let buf = slot(grads, *x, n);
                    add_into(&mut buf[start * c..start * c + g.len()], g);
                }
            }
            Op::SliceCols { x, start } => {
                if needs(*x) {
                    let len = node.cols();
                    let c = self.nodes[*x].cols();
                    let n = self.nodes[*x].numel();
                    let buf = slot(grads, *x, n);
                    for (i, gr) in g.chunks(len).enumerate() {
                        add_into(&mut buf[i * c + start..i * c + start + len], gr);
                    }
                }
            }
            Op::Reshape(x) => {
                if needs(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    let n = self.nodes[*x].numel();
                    slot(grads, *x, n).iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Pool { x, kind, pick } => {
                if needs(*x) {
                    let (r, c) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                    let buf = slot(grads, *x, r * c);
                    for j in 0..c {
                        match kind {
                            PoolKind::Avg => (0..r).for_each(|i| buf[i * c + j] += g[j] / r as f64),
                            _ => buf[pick[j] * c + j] += g[j],
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, probs, targets } => {
                if needs(*logits) {
                    let c = self.nodes[*logits].cols();
                    let b = targets.len() as f64;
                    let buf = slot(grads, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let y = if j == t { 1.0 } else { 0.0 };
                            buf[r * c + j] += g[0] * (probs[r * c + j] - y) / b;
                        }
                    }
                }
            }
            Op::Bce { logits, targets } => {
                if needs(*logits) {
                    let lv = val(*logits);
                    let n = targets.len() as f64;
                    let buf = slot(grads, *logits, targets.len());
                    for ((o, &z), &y) in buf.iter_mut().zip(lv).zip(targets) {
                        *o += g[0] * (sigmoid(z) - y) / n;
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: usize, n: usize) -> &mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; n]).as_mut_slice()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.by_node[v.0].as_deref()
    }

    /// Gradients of every parameter that the loss depends on, in id order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params.iter().map(|&(id, n)| (id, self.by_node[n].as_deref().unwrap()))
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|&(_, n)| self.by_node[n].as_deref())
    }
}

/// Compares reverse-mode gradients against central differences for every
/// coordinate of the parameters in `ids`.
///
/// `f` builds the scalar loss on a fresh graph over `store`. Returns the max
/// over coordinates of `|ad - fd| / max(1, |ad|, |fd|)`.
pub fn finite_diff_check<F>(store: &mut ParamStore, ids: &[ParamId], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    assert!(h > 0.0, "step must be positive");
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        let grads = g.backward(loss)?;
        ids.iter()
            .map(|&id| {
                grads
                    .param(id)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; store.get(id).numel()])
            })
            .collect()
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        Ok(g.value(loss)[0])
    };
    let mut worst: f64 = 0.0;
    for (k, &id) in ids.iter().enumerate() {
        for j in 0..store.get(id).numel() {
            let orig = store.get(id).data[j];
            store.get_mut(id).data[j] = orig + h;
            let up = eval(store)?;
            store.get_mut(id).data[j] = orig - h;
            let down = eval(store)?;
            store.get_mut(id).data[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let ad = analytic[k][j];
            let err = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
