//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the inputs its
//! backward rule needs. `Tape::backward` walks the nodes in exact reverse
//! recording order, accumulating vector-Jacobian products into per-node
//! gradient buffers. Nodes that do not depend on any gradient-requiring leaf
//! are recorded but skipped during the backward sweep.

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::dense::{kernels, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of a recorded operation; used for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    Scale,
    AddRow,
    MulRow,
    Gelu,
    LayerNorm,
    Softmax,
    CausalMask,
    MaskRows,
    MaskedAdd,
    ConcatRows,
    ConcatCols,
    SliceRows,
    SliceCols,
    Transpose,
    Sum,
    Sin,
    GatherRows,
    CrossEntropy,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 21] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddRow,
        OpKind::MulRow,
        OpKind::Gelu,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::CausalMask,
        OpKind::MaskRows,
        OpKind::MaskedAdd,
        OpKind::ConcatRows,
        OpKind::ConcatCols,
        OpKind::SliceRows,
        OpKind::SliceCols,
        OpKind::Transpose,
        OpKind::Sum,
        OpKind::Sin,
        OpKind::GatherRows,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddRow => "add_row",
            OpKind::MulRow => "mul_row",
            OpKind::Gelu => "gelu",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Softmax => "softmax_rows",
            OpKind::CausalMask => "causal_mask",
            OpKind::MaskRows => "mask_rows",
            OpKind::MaskedAdd => "masked_add",
            OpKind::ConcatRows => "concat_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceRows => "slice_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::Transpose => "transpose",
            OpKind::Sum => "sum",
            OpKind::Sin => "sin",
            OpKind::GatherRows => "gather_rows",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Gelu(Var),
    LayerNorm(Var, Vec<(f64, f64)>),
    Softmax(Var),
    CausalMask(Var),
    MaskRows(Var, Rc<[bool]>),
    MaskedAdd {
        base: Var,
        delta: Var,
        rows: Rc<[bool]>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    Sum(Var),
    Sin(Var),
    GatherRows(Var, Vec<usize>),
    /// Saved softmax probabilities and `(row, class)` targets.
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulRow(..) => OpKind::MulRow,
            Op::Gelu(..) => OpKind::Gelu,
            Op::LayerNorm(..) => OpKind::LayerNorm,
            Op::Softmax(..) => OpKind::Softmax,
            Op::CausalMask(..) => OpKind::CausalMask,
            Op::MaskRows(..) => OpKind::MaskRows,
            Op::MaskedAdd { .. } => OpKind::MaskedAdd,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Sum(..) => OpKind::Sum,
            Op::Sin(..) => OpKind::Sin,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Node indices in the order the backward sweep processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

/// The computation tape. One tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    fault: Option<OpKind>,
}

/// Multiplier applied to upstream gradients of the op selected by
/// [`Tape::inject_fault`].
pub const FAULT_FACTOR: f64 = 1.25;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Corrupts the backward rule of every `kind` node on this tape. Test
    /// fixture for the gradient audit; never set during training.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn fault(&self) -> Option<OpKind> {
        self.fault
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and parameter binding.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
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

    /// Records a leaf. The tensor's own `requires_grad` decides whether
    /// gradients are tracked for it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        let mut value = t;
        value.grad = None;
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Binds a stored parameter as a leaf. Repeated calls return the same
    /// handle so gradients from every use accumulate in one buffer.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.tensor(id);
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec())
            .expect("stored tensor is well formed")
            .with_requires_grad(t.requires_grad);
        let v = self.leaf(value);
        self.params.insert(id, v);
        v
    }

    pub fn param_bindings(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what} on mismatched shapes {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let out = self.value(a).add(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    fn check_row_vec(&self, x: Var, b: Var, what: &str) -> Result<usize> {
        let (_, n) = self.dims(x)?;
        if self.value(b).len() != n {
            return Err(Error::Shape(format!(
                "{what}: row vector of shape {:?} does not match matrix {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        Ok(n)
    }

    /// `x[m×n] + b` with `b` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.check_row_vec(x, b, "add_row")?;
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        out.requires_grad = false;
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&bias).for_each(|(o, b)| *o += b);
        }
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    /// `x[m×n] * g` with `g` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let n = self.check_row_vec(x, g, "mul_row")?;
        let gain = self.value(g).data().to_vec();
        let mut out = self.value(x).clone();
        out.requires_grad = false;
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&gain).for_each(|(o, g)| *o *= g);
        }
        let rg = self.any_grad(&[x, g]);
        Ok(self.push(out, Op::MulRow(x, g), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::sin);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sin(x), rg)
    }

    /// Row standardization without affine parameters (epsilon 1e-5).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        let mut out = vec![0.0; m * n];
        let stats = kernels::layer_norm(self.value(x).data(), &mut out, n);
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::LayerNorm(x, stats), rg))
    }

    /// Layer norm followed by per-column gain and bias.
    pub fn layer_norm_affine(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.layer_norm(x)?;
        let g = self.mul_row(n, gain)?;
        self.add_row(g, bias)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if n == 0 {
            return Err(Error::Shape("softmax over zero columns".into()));
        }
        let mut out = vec![0.0; m * n];
        kernels::softmax_rows(self.value(x).data(), &mut out, n);
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Sets entries strictly above the diagonal to `-inf`.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        let mut out = self.value(x).clone();
        out.requires_grad = false;
        let d = out.data_mut();
        for i in 0..m {
            for j in (i + 1)..n {
                d[i * n + j] = f64::NEG_INFINITY;
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::CausalMask(x), rg))
    }

    /// Keeps rows where `keep[i]` and zeroes the rest.
    pub fn mask_rows(&mut self, x: Var, keep: Rc<[bool]>) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if keep.len() != m {
            return Err(Error::Shape(format!(
                "row mask of length {} applied to {m} rows",
                keep.len()
            )));
        }
        let mut out = self.value(x).clone();
        out.requires_grad = false;
        for (row, &k) in out.data_mut().chunks_mut(n).zip(keep.iter()) {
            if !k {
                row.fill(0.0);
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::MaskRows(x, keep), rg))
    }

    /// `base + delta` on rows where `rows[i]`; other rows copy `base` unchanged.
    pub fn masked_add(&mut self, base: Var, delta: Var, rows: Rc<[bool]>) -> Result<Var> {
        self.check_same(base, delta, "masked_add")?;
        let (m, n) = self.dims(base)?;
        if rows.len() != m {
            return Err(Error::Shape(format!(
                "row mask of length {} applied to {m} rows",
                rows.len()
            )));
        }
        let mut out = self.value(base).clone();
        out.requires_grad = false;
        let dd = self.value(delta).data();
        for (i, row) in out.data_mut().chunks_mut(n).enumerate() {
            if rows[i] {
                row.iter_mut()
                    .zip(&dd[i * n..(i + 1) * n])
                    .for_each(|(o, d)| *o += d);
            }
        }
        let rg = self.any_grad(&[base, delta]);
        Ok(self.push(out, Op::MaskedAdd { base, delta, rows }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let (_, n) = self.dims(first)?;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p)?;
            if pn != n {
                return Err(Error::Shape(format!(
                    "concat_rows width mismatch: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            data.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let (m, _) = self.dims(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims(p)?;
            if pm != m {
                return Err(Error::Shape(format!(
                    "concat_cols height mismatch: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                data[i * n + off..i * n + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if start + len > m {
            return Err(Error::Shape(format!(
                "row slice {start}..{} out of bounds for {m} rows",
                start + len
            )));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(vec![len, n], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SliceRows(x, start), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if start + len > n {
            return Err(Error::Shape(format!(
                "column slice {start}..{} out of bounds for {n} columns",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SliceCols(x, start), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(table)?;
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= m {
                return Err(Error::Shape(format!("row index {id} out of range for {m} rows")));
            }
            data.extend_from_slice(&src[id * n..(id + 1) * n]);
        }
        let out = Tensor::new(vec![ids.len(), n], data)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(out, Op::GatherRows(table, ids.to_vec()), rg))
    }

    /// Mean softmax cross-entropy over the listed `(row, class)` targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.dims(logits)?;
        if targets.is_empty() {
            return Err(Error::EmptyLoss);
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; m * n];
        kernels::softmax_rows(x, &mut probs, n);
        let mut loss = 0.0;
        for &(r, c) in targets {
            if r >= m || c >= n {
                return Err(Error::Shape(format!(
                    "target ({r}, {c}) outside logits of shape [{m}, {n}]"
                )));
            }
            let row = &x[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[c];
        }
        loss /= targets.len() as f64;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut visited = Vec::new();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(mut g) = grads[idx].take() else {
                continue;
            };
            visited.push(idx);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= FAULT_FACTOR);
            }
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads, visited })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[v.0].value.len()]);
        }
        slot.as_mut()
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a)?;
                let (_, n) = self.dims(*b)?;
                if let Some(da) = self.acc(grads, *a) {
                    kernels::matmul_nt_acc(g, self.value(*b).data(), da, m, k, n);
                }
                if let Some(db) = self.acc(grads, *b) {
                    kernels::matmul_tn_acc(self.value(*a).data(), g, db, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g);
                }
            }
            Op::AddRow(x, b) => {
                let n = self.value(*b).len();
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = self.acc(grads, *b) {
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::MulRow(x, w) => {
                let n = self.value(*w).len();
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if let Some(dx) = self.acc(grads, *x) {
                    for (i, (d, g)) in dx.iter_mut().zip(g).enumerate() {
                        *d += g * wv[i % n];
                    }
                }
                if let Some(dw) = self.acc(grads, *w) {
                    for (i, (&gv, &xv)) in g.iter().zip(xv).enumerate() {
                        dw[i % n] += gv * xv;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * kernels::gelu_grad(xv[i]);
                    }
                }
            }
            Op::Sin(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * xv[i].cos();
                    }
                }
            }
            Op::LayerNorm(x, stats) => {
                let (_, n) = self.dims(*x)?;
                let y = node.value.data();
                if let Some(dx) = self.acc(grads, *x) {
                    let nf = n as f64;
                    for (r, &(_, inv)) in stats.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let yr = &y[r * n..(r + 1) * n];
                        let mean_g = gr.iter().sum::<f64>() / nf;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for j in 0..n {
                            dx[r * n + j] += inv * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let (_, n) = self.dims(*x)?;
                let y = node.value.data();
                if let Some(dx) = self.acc(grads, *x) {
                    for ((gr, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(dx.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::CausalMask(x) => {
                let (_, n) = self.dims(*x)?;
                if let Some(dx) = self.acc(grads, *x) {
                    for (i, (d, gr)) in dx.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        for j in 0..=i.min(n - 1) {
                            d[j] += gr[j];
                        }
                    }
                }
            }
            Op::MaskRows(x, keep) => {
                let (_, n) = self.dims(*x)?;
                if let Some(dx) = self.acc(grads, *x) {
                    for (i, (d, gr)) in dx.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        if keep[i] {
                            d.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                        }
                    }
                }
            }
            Op::MaskedAdd { base, delta, rows } => {
                let (_, n) = self.dims(*base)?;
                if let Some(db) = self.acc(grads, *base) {
                    db.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(dd) = self.acc(grads, *delta) {
                    for (i, (d, gr)) in dd.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        if rows[i] {
                            d.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(d) = self.acc(grads, p) {
                        d.iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(d, g)| *d += g);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = node.value.dims2()?;
                let mut off = 0;
                for &p in parts {
                    let (_, w) = self.dims(p)?;
                    if let Some(d) = self.acc(grads, p) {
                        for i in 0..m {
                            for j in 0..w {
                                d[i * w + j] += g[i * n + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows(x, start) => {
                let (_, n) = self.dims(*x)?;
                if let Some(dx) = self.acc(grads, *x) {
                    dx[start * n..start * n + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, g)| *d += g);
                }
            }
            Op::SliceCols(x, start) => {
                let (m, n) = self.dims(*x)?;
                let len = node.value.cols();
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..m {
                        for j in 0..len {
                            dx[i * n + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (m, n) = self.dims(*x)?;
                if let Some(dx) = self.acc(grads, *x) {
                    // g is n×m
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::GatherRows(table, ids) => {
                let (_, n) = self.dims(*table)?;
                if let Some(dt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..n {
                            dt[id * n + j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (_, n) = self.dims(*logits)?;
                if let Some(dl) = self.acc(grads, *logits) {
                    let w = g[0] / targets.len() as f64;
                    for &(r, c) in targets {
                        for j in 0..n {
                            dl[r * n + j] += w * probs[r * n + j];
                        }
                        dl[r * n + c] -= w;
                    }
                }
            }
        }
        Ok(())
    }
}
