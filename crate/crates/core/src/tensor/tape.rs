use serde::{Deserialize, Serialize};

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => kernels::gelu(x),
            Activation::Relu => x.max(0.0),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => kernels::gelu_grad(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Kron(Var, Var),
    KronMatMul { x: Var, a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize> },
    SelectRow { x: Var, row: usize },
    MeanRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Activation(Var, Activation),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    RowNormalize { x: Var, norms: Vec<f64> },
    CosineSim { u: Var, v: Var, nu: f64, nv: f64 },
    Diag(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation. Node ids increase in creation order,
/// so the node list is already a topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    pub fn get_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::Rank {
            op,
            expected: 2,
            shape: s.to_vec(),
        }),
    }
}

/// Rows and columns of a tensor viewed as a matrix; vectors are one row.
fn as_rows(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        &[c] => (1, c),
        &[r, c] => (r, c),
        s => {
            let c = *s.last().unwrap();
            (t.numel() / c, c)
        }
    }
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

    /// Drops every node recorded after the first `len`. Vars pointing past
    /// the new end become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn kron(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).kron(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Kron(a, b), rg))
    }

    /// `x · (a ⊗ b)` computed blockwise, never forming the Kronecker product.
    pub fn kron_matmul(&mut self, x: Var, a: Var, b: Var) -> Result<Var> {
        let (m, n) = matrix("kron_matmul", self.value(x))?;
        let (p, q) = matrix("kron_matmul", self.value(a))?;
        let (r, s) = matrix("kron_matmul", self.value(b))?;
        if n != p * r {
            return Err(Error::Dimension {
                op: "kron_matmul",
                lhs: vec![m, n],
                rhs: vec![p * r, q * s],
            });
        }
        let mut out = vec![0.0; m * q * s];
        kernels::kron_matmul(
            self.value(x).data(),
            m,
            self.value(a).data(),
            p,
            q,
            self.value(b).data(),
            r,
            s,
            &mut out,
        );
        let rg = self.any_grad(&[x, a, b]);
        let t = Tensor::new(vec![m, q * s], out)?;
        Ok(self.push(t, Op::KronMatMul { x, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .add(self.value(b))
            .map_err(|_| dim_err("add", self.value(a), self.value(b)))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .sub(self.value(b))
            .map_err(|_| dim_err("sub", self.value(a), self.value(b)))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `m×n` (or length-`n`) input.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, n) = as_rows(tx);
        if tb.numel() != n || tb.rank() != 1 {
            return Err(dim_err("add_bias", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = matrix("slice_cols", t)?;
        if start >= end || end > c {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: vec![r, c],
                rhs: vec![start, end],
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + end]);
        }
        let out = Tensor::new(vec![r, w], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let (r, _) = matrix("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (pr, pc) = matrix("concat_cols", t)?;
            if pr != r {
                return Err(dim_err("concat_cols", first, t));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks matrices (or vectors, as single rows) with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let (_, c) = as_rows(first);
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (pr, pc) = as_rows(t);
            if pc != c || t.rank() > 2 {
                return Err(dim_err("concat_rows", first, t));
            }
            rows += pr;
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes row `i` of the output.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (r, c) = matrix("gather_rows", t)?;
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::Dimension {
                    op: "gather_rows",
                    lhs: vec![r, c],
                    rhs: vec![id],
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, _) = matrix("select_row", t)?;
        if row >= r {
            return Err(Error::Dimension {
                op: "select_row",
                lhs: t.shape().to_vec(),
                rhs: vec![row],
            });
        }
        let out = Tensor::vector(t.row(row).to_vec());
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SelectRow { x, row }, rg))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = matrix("mean_rows", t)?;
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (d, v) in data.iter_mut().zip(t.row(i)) {
                *d += v;
            }
        }
        for d in &mut data {
            *d /= r as f64;
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::vector(data), Op::MeanRows(x), rg))
    }

    /// Per-row layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = as_rows(t);
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != c || b.numel() != c {
            return Err(dim_err("layer_norm", t, g));
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| act.apply(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Activation(x, act), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    fn check_no_nan(&self, x: Var, op: &'static str) -> Result<()> {
        if self.value(x).data().iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidValue {
                op,
                detail: "NaN input".into(),
            });
        }
        Ok(())
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check_no_nan(x, "softmax_rows")?;
        let t = self.value(x);
        let (_, c) = as_rows(t);
        let mut out = vec![0.0; t.numel()];
        for (src, dst) in t.data().chunks(c).zip(out.chunks_mut(c)) {
            kernels::softmax_row(src, dst);
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    /// Row-wise log-softmax via max-subtracted log-sum-exp. Vectors are one row.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check_no_nan(x, "log_softmax_row")?;
        let t = self.value(x);
        let (_, c) = as_rows(t);
        let mut out = vec![0.0; t.numel()];
        for (src, dst) in t.data().chunks(c).zip(out.chunks_mut(c)) {
            kernels::log_softmax_row(src, dst);
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::LogSoftmaxRows(x), rg))
    }

    /// Scales every row to unit L2 norm.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = as_rows(t);
        let mut norms = vec![0.0; r];
        let mut out = t.data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::DegenerateVector { op: "row_normalize" });
            }
            norms[i] = n;
            for v in row {
                *v /= n;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::RowNormalize { x, norms }, rg))
    }

    pub fn cosine_sim(&mut self, u: Var, v: Var) -> Result<Var> {
        let (tu, tv) = (self.value(u), self.value(v));
        if tu.rank() != 1 || tu.shape() != tv.shape() {
            return Err(dim_err("cosine_sim", tu, tv));
        }
        let (nu, nv) = (tu.norm(), tv.norm());
        let c = super::cosine_sim(tu, tv)?;
        let rg = self.any_grad(&[u, v]);
        Ok(self.push(Tensor::scalar(c), Op::CosineSim { u, v, nu, nv }, rg))
    }

    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = matrix("diag", t)?;
        if r != c {
            return Err(Error::Dimension {
                op: "diag",
                lhs: vec![r, c],
                rhs: vec![r, r],
            });
        }
        let out = Tensor::vector((0..r).map(|i| t.get2(i, i)).collect());
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Diag(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Reverse-mode sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(Error::Rank {
                op: "backward",
                expected: 0,
                shape: out.shape().to_vec(),
            });
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[output.0] = Some(vec![1.0]);

        for id in (0..n).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let shapes = self.nodes[..n]
            .iter()
            .map(|node| node.value.shape().to_vec())
            .collect();
        // Only leaves that require grad keep their gradients meaningful; interior
        // entries are retained for inspection.
        Ok(Gradients { grads, shapes })
    }

    fn accumulate<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if let Some(ga) = self.accumulate(grads, *a) {
                    kernels::matmul_a_bt(g, tb.data(), ga, m, k, n);
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    kernels::matmul_at_b(ta.data(), g, gb, m, k, n);
                }
            }
            Op::Kron(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (p, q) = (ta.shape()[0], ta.shape()[1]);
                let (r, s) = (tb.shape()[0], tb.shape()[1]);
                let cols = q * s;
                let block = |i: usize, j: usize, k: usize, l: usize| g[(i * r + k) * cols + j * s + l];
                if let Some(ga) = self.accumulate(grads, *a) {
                    for i in 0..p {
                        for j in 0..q {
                            let mut acc = 0.0;
                            for k in 0..r {
                                for l in 0..s {
                                    acc += block(i, j, k, l) * tb.data()[k * s + l];
                                }
                            }
                            ga[i * q + j] += acc;
                        }
                    }
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    for i in 0..p {
                        for j in 0..q {
                            let aij = ta.data()[i * q + j];
                            for k in 0..r {
                                for l in 0..s {
                                    gb[k * s + l] += aij * block(i, j, k, l);
                                }
                            }
                        }
                    }
                }
            }
            Op::KronMatMul { x, a, b } => self.kron_matmul_backward(*x, *a, *b, g, grads),
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.accumulate(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(tb) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(ta) {
                        *d += s * x;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                let n = self.value(*bias).numel();
                if let Some(gb) = self.accumulate(grads, *bias) {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s * c);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let gt = kernels::transpose(g, r, c);
                if let Some(gx) = self.accumulate(grads, *x) {
                    gx.iter_mut().zip(&gt).for_each(|(d, s)| *d += s);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).shape()[1];
                let (r, w) = (node.value.shape()[0], node.value.shape()[1]);
                if let Some(gx) = self.accumulate(grads, *x) {
                    for i in 0..r {
                        for j in 0..w {
                            gx[i * c + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (node.value.shape()[0], node.value.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if let Some(gp) = self.accumulate(grads, p) {
                        for i in 0..r {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(gp) = self.accumulate(grads, p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(d, s)| *d += s);
                    }
                    offset += n;
                }
            }
            Op::GatherRows { table, ids } => {
                let c = self.value(*table).shape()[1];
                if let Some(gt) = self.accumulate(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            gt[id * c + j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::SelectRow { x, row } => {
                let c = self.value(*x).shape()[1];
                if let Some(gx) = self.accumulate(grads, *x) {
                    for j in 0..c {
                        gx[row * c + j] += g[j];
                    }
                }
            }
            Op::MeanRows(x) => {
                let (r, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                if let Some(gx) = self.accumulate(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j] / r as f64;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = self.value(*gamma).numel();
                let r = inv_std.len();
                let gm = self.value(*gamma).data();
                if let Some(gg) = self.accumulate(grads, *gamma) {
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if let Some(gb) = self.accumulate(grads, *beta) {
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                }
                if let Some(gx) = self.accumulate(grads, *x) {
                    for i in 0..r {
                        let gh: Vec<f64> = (0..c).map(|j| g[i * c + j] * gm[j]).collect();
                        let mean_gh = gh.iter().sum::<f64>() / c as f64;
                        let mean_gh_xh = gh
                            .iter()
                            .zip(&xhat[i * c..(i + 1) * c])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / c as f64;
                        for j in 0..c {
                            let xh = xhat[i * c + j];
                            gx[i * c + j] += inv_std[i] * (gh[j] - mean_gh - xh * mean_gh_xh);
                        }
                    }
                }
            }
            Op::Activation(x, act) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.accumulate(grads, *x) {
                    for ((d, s), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *d += s * act.derivative(v);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let (_, c) = as_rows(&node.value);
                if let Some(gx) = self.accumulate(grads, *x) {
                    for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                let y = node.value.data();
                let (_, c) = as_rows(&node.value);
                if let Some(gx) = self.accumulate(grads, *x) {
                    for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                        let gsum: f64 = gr.iter().sum();
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += gv - yv.exp() * gsum;
                        }
                    }
                }
            }
            Op::RowNormalize { x, norms } => {
                let y = node.value.data();
                let (_, c) = as_rows(&node.value);
                if let Some(gx) = self.accumulate(grads, *x) {
                    for (i, n) in norms.iter().enumerate() {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[i * c + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                }
            }
            Op::CosineSim { u, v, nu, nv } => {
                let (tu, tv) = (self.value(*u).data(), self.value(*v).data());
                let c = node.value.data()[0];
                let s = g[0];
                if let Some(gu) = self.accumulate(grads, *u) {
                    for j in 0..tu.len() {
                        gu[j] += s * (tv[j] / (nu * nv) - c * tu[j] / (nu * nu));
                    }
                }
                if let Some(gv) = self.accumulate(grads, *v) {
                    for j in 0..tv.len() {
                        gv[j] += s * (tu[j] / (nu * nv) - c * tv[j] / (nv * nv));
                    }
                }
            }
            Op::Diag(x) => {
                let c = self.value(*x).shape()[1];
                if let Some(gx) = self.accumulate(grads, *x) {
                    for (i, s) in g.iter().enumerate() {
                        gx[i * c + i] += s;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                if let Some(gx) = self.accumulate(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
        }
    }

    fn kron_matmul_backward(&self, x: Var, a: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (tx, ta, tb) = (self.value(x), self.value(a), self.value(b));
        let m = tx.shape()[0];
        let (p, q) = (ta.shape()[0], ta.shape()[1]);
        let (r, s) = (tb.shape()[0], tb.shape()[1]);
        let (in_cols, out_cols) = (p * r, q * s);
        let (xd, ad, bd) = (tx.data(), ta.data(), tb.data());

        // gb_i[row, j, :] = g_j[row, :] · Bᵀ, reused by dx.
        let mut g_bt = vec![0.0; m * q * r];
        for row in 0..m {
            for j in 0..q {
                let gj = &g[row * out_cols + j * s..row * out_cols + (j + 1) * s];
                for kk in 0..r {
                    let brow = &bd[kk * s..(kk + 1) * s];
                    g_bt[(row * q + j) * r + kk] = gj.iter().zip(brow).map(|(u, v)| u * v).sum();
                }
            }
        }
        if let Some(gx) = self.accumulate(grads, x) {
            for row in 0..m {
                for i in 0..p {
                    for j in 0..q {
                        let aij = ad[i * q + j];
                        let src = &g_bt[(row * q + j) * r..(row * q + j + 1) * r];
                        let dst = &mut gx[row * in_cols + i * r..row * in_cols + (i + 1) * r];
                        for (d, v) in dst.iter_mut().zip(src) {
                            *d += aij * v;
                        }
                    }
                }
            }
        }
        if let Some(ga) = self.accumulate(grads, a) {
            for row in 0..m {
                for i in 0..p {
                    let xi = &xd[row * in_cols + i * r..row * in_cols + (i + 1) * r];
                    for j in 0..q {
                        let src = &g_bt[(row * q + j) * r..(row * q + j + 1) * r];
                        ga[i * q + j] += xi.iter().zip(src).map(|(u, v)| u * v).sum::<f64>();
                    }
                }
            }
        }
        if let Some(gb) = self.accumulate(grads, b) {
            // dB = Σ_{row,i,j} A[i,j] · x_i[row]ᵀ g_j[row]
            for row in 0..m {
                for i in 0..p {
                    let xi = &xd[row * in_cols + i * r..row * in_cols + (i + 1) * r];
                    for j in 0..q {
                        let aij = ad[i * q + j];
                        if aij == 0.0 {
                            continue;
                        }
                        let gj = &g[row * out_cols + j * s..row * out_cols + (j + 1) * s];
                        for (kk, &xv) in xi.iter().enumerate() {
                            let coef = aij * xv;
                            if coef == 0.0 {
                                continue;
                            }
                            let dst = &mut gb[kk * s..(kk + 1) * s];
                            for (d, v) in dst.iter_mut().zip(gj) {
                                *d += coef * v;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0, 3.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 7.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::eye(2));
        let c = tape.constant(Tensor::ones(&[2, 2]));
        let y = tape.matmul(c, w).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(w).is_some());
    }

    #[test]
    fn fused_kron_matmul_matches_materialized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(p, q, r, s) in &[(2, 2, 3, 1), (4, 4, 2, 3), (1, 3, 5, 2)] {
            let x = Tensor::randn(&[5, p * r], 1.0, &mut rng);
            let a = Tensor::randn(&[p, q], 1.0, &mut rng);
            let b = Tensor::randn(&[r, s], 1.0, &mut rng);
            let dense = x.matmul(&a.kron(&b).unwrap()).unwrap();
            let mut tape = Tape::new();
            let (vx, va, vb) = (tape.constant(x), tape.constant(a), tape.constant(b));
            let fused = tape.kron_matmul(vx, va, vb).unwrap();
            assert!(tape.value(fused).max_abs_diff(&dense) < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn log_softmax_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[3, 7], 2.0, &mut rng);
        let shifted = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + 41.5).collect()).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(x);
        let b = tape.constant(shifted);
        let la = tape.log_softmax_rows(a).unwrap();
        let lb = tape.log_softmax_rows(b).unwrap();
        assert!(tape.value(la).max_abs_diff(tape.value(lb)) < 1e-12);
        for row in 0..3 {
            let s: f64 = tape.value(la).row(row).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
