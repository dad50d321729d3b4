//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every forward operation appends a node to a [`Tape`]. Node `i` only ever
//! references nodes `< i`, so the tape is in topological order by
//! construction and [`Tape::backward`] is a single reverse sweep that visits
//! each node once. Gradients accumulate, so a value consumed twice (a diamond
//! in the graph) receives the sum of both contributions.
//!
//! Broadcasting is limited to equal-rank operands whose mismatched dimensions
//! are 1 in one of them, which covers bias rows, per-row scalars and scalars.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    AddScalar {
        x: Var,
    },
    Matmul {
        a: Var,
        b: Var,
    },
    Transpose {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Exp {
        x: Var,
    },
    Log {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Softplus {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        input: Var,
        filters: Var,
        bias: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols {
        xs: Vec<Var>,
    },
    ScatterRows {
        base: Var,
        update: Var,
        idx: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            },
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Relu { .. } => "relu",
            Op::Softplus { .. } => "softplus",
            Op::Clamp { .. } => "clamp",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Conv2d { .. } => "conv2d",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::GatherRows { .. } => "gather_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols { .. } => "concat_cols",
            Op::ScatterRows { .. } => "scatter_rows",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Epsilon added to the variance inside [`Tape::layernorm`].
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Gradient of the last [`backward`](Self::backward) call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad matches value shape"))
    }

    /// First node holding a non-finite value, with the name of the op that produced it.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (Var(i), n.op.name()))
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    // ── Elementwise binary with broadcasting ─────────────────────────

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| {
            Error::shape(
                match kind {
                    BinaryKind::Add => "add",
                    BinaryKind::Sub => "sub",
                    BinaryKind::Mul => "mul",
                    BinaryKind::Div => "div",
                },
                &sa,
                &sb,
            )
        })?;
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
            BinaryKind::Div => |x: f64, y: f64| x / y,
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![0.0; out_shape.iter().product()];
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(av[ia], bv[ib]));
            out
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale { x, c }, |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar { x }, |v| v + c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let data = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::Matmul { a, b }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let data = transpose(self.value(x).data(), r, c);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    // ── Elementwise unary ────────────────────────────────────────────

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp { x }, f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log { x }, f64::ln)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid { x }, sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu { x }, |v| v.max(0.0))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus { x }, softplus)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    // ── Structured ops ───────────────────────────────────────────────

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| xv[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes over the last axis, then applies per-feature gain and bias.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layernorm", &shape, &[]))?;
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layernorm", &shape, self.shape(gain)));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let rows = xv.len() / d.max(1);
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYERNORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Stride-1, same-padded convolution.
    ///
    /// `input` is `[H, W, C]`, `filters` is `[O, K, K, C]` with odd `K`, `bias` has `O`
    /// entries; the result is `[O, H, W]`.
    pub fn conv2d(&mut self, input: Var, filters: Var, bias: Var) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let fshape = self.shape(filters).to_vec();
        let (h, w, c) = match ishape.as_slice() {
            [h, w, c] => (*h, *w, *c),
            _ => return Err(Error::shape("conv2d", &ishape, &fshape)),
        };
        let (o, k) = match fshape.as_slice() {
            [o, k, k2, c2] if k == k2 && *c2 == c => (*o, *k),
            _ => return Err(Error::shape("conv2d", &ishape, &fshape)),
        };
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel size {k} must be odd")));
        }
        let pad = k / 2;
        if k > h.min(w) + 2 * pad {
            return Err(Error::shape("conv2d", &ishape, &fshape));
        }
        if self.value(bias).len() != o {
            return Err(Error::shape("conv2d", &fshape, self.shape(bias)));
        }
        let iv = self.value(input).data();
        let fv = self.value(filters).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; o * h * w];
        for (oi, &b) in bv.iter().enumerate() {
            out[oi * h * w..(oi + 1) * h * w].fill(b);
        }
        for_each_tap(h, w, k, |y, x, yy, xx, ky, kx| {
            let inp = &iv[(yy * w + xx) * c..(yy * w + xx + 1) * c];
            for oi in 0..o {
                let f = &fv[((oi * k + ky) * k + kx) * c..((oi * k + ky) * k + kx + 1) * c];
                out[(oi * h + y) * w + x] += dot(f, inp);
            }
        });
        let rg = self.rg(&[input, filters, bias]);
        Ok(self.push(
            Tensor::new(vec![o, h, w], out)?,
            Op::Conv2d { input, filters, bias },
            rg,
        ))
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / t.len().max(1) as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::Mean { x }, rg)
    }

    /// Sums along `axis`, keeping it as a dimension of size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", &shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xv[o * len * inner + j * inner + i];
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(oshape, out)?, Op::SumAxis { x, axis }, rg))
    }

    // ── Row/column plumbing on rank-2 tensors ────────────────────────

    /// Selects rows (repeats allowed; the backward pass scatter-adds).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::OutOfRange(format!("gather_rows index {bad} >= {r}")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::GatherRows { x, idx: idx.to_vec() },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > c {
            return Err(Error::shape("slice_cols", &[r, c], &[start, len]));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Config("concat of nothing".into()))?;
        let (r, _) = self.value(first).dims2()?;
        let mut total = 0;
        for &x in xs {
            let (ri, ci) = self.value(x).dims2()?;
            if ri != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(x)));
            }
            total += ci;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &x in xs {
                out.extend_from_slice(self.value(x).row_slice(i));
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(
            Tensor::new(vec![r, total], out)?,
            Op::ConcatCols { xs: xs.to_vec() },
            rg,
        ))
    }

    /// Copy of `base` with rows `idx` replaced by the rows of `update`.
    pub fn scatter_rows(&mut self, base: Var, update: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(base).dims2()?;
        let (ur, uc) = self.value(update).dims2()?;
        if ur != idx.len() || uc != c {
            return Err(Error::shape("scatter_rows", &[r, c], &[ur, uc]));
        }
        let mut seen = vec![false; r];
        for &i in idx {
            if i >= r || seen[i] {
                return Err(Error::OutOfRange(format!("scatter_rows index {i}")));
            }
            seen[i] = true;
        }
        let mut out = self.value(base).data().to_vec();
        let uv = self.value(update).data();
        for (k, &i) in idx.iter().enumerate() {
            out[i * c..(i + 1) * c].copy_from_slice(&uv[k * c..(k + 1) * c]);
        }
        let rg = self.rg(&[base, update]);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::ScatterRows {
                base,
                update,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a one-element `loss`, replacing any previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn acc_with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let g = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Take the op out so node values can be borrowed while accumulating.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (ga, gb) = {
                    let out_shape = self.nodes[i].value.shape();
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let mut ga = vec![0.0; av.len()];
                    let mut gb = vec![0.0; bv.len()];
                    for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| {
                        let (da, db) = match kind {
                            BinaryKind::Add => (1.0, 1.0),
                            BinaryKind::Sub => (1.0, -1.0),
                            BinaryKind::Mul => (bv[ib], av[ia]),
                            BinaryKind::Div => (1.0 / bv[ib], -av[ia] / (bv[ib] * bv[ib])),
                        };
                        ga[ia] += g[o] * da;
                        gb[ib] += g[o] * db;
                    });
                    (ga, gb)
                };
                self.acc(a, ga);
                self.acc(b, gb);
            }
            Op::Scale { x, c } => self.acc(*x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar { x } | Op::Reshape { x } => self.acc(*x, g.to_vec()),
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.value(a).dims2().expect("rank 2");
                let (_, n) = self.value(b).dims2().expect("rank 2");
                if self.requires_grad(a) {
                    // dA = G · Bᵀ
                    let bv = self.value(b).data();
                    let mut ga = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            ga[r * k + kk] = dot(grow, &bv[kk * n..(kk + 1) * n]);
                        }
                    }
                    self.acc(a, ga);
                }
                if self.requires_grad(b) {
                    // dB = Aᵀ · G
                    let av = self.value(a).data();
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            axpy(av[r * k + kk], grow, &mut gb[kk * n..(kk + 1) * n]);
                        }
                    }
                    self.acc(b, gb);
                }
            }
            Op::Transpose { x } => {
                let (r, c) = self.value(*x).dims2().expect("rank 2");
                self.acc(*x, transpose(g, c, r));
            }
            Op::Exp { x } => {
                let y = self.nodes[i].value.data();
                let contrib = g.iter().zip(y).map(|(g, y)| g * y).collect();
                self.acc(*x, contrib);
            }
            Op::Log { x } => {
                let xv = self.value(*x).data();
                let contrib = g.iter().zip(xv).map(|(g, x)| g / x).collect();
                self.acc(*x, contrib);
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[i].value.data();
                let contrib = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.acc(*x, contrib);
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let contrib = g.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                self.acc(*x, contrib);
            }
            Op::Softplus { x } => {
                let xv = self.value(*x).data();
                let contrib = g.iter().zip(xv).map(|(g, &x)| g * sigmoid(x)).collect();
                self.acc(*x, contrib);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let contrib = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                    .collect();
                self.acc(*x, contrib);
            }
            Op::Softmax { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let y = self.nodes[i].value.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + ii;
                        let s: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - s);
                        }
                    }
                }
                self.acc(*x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).len();
                let rows = xhat.len() / d.max(1);
                let gv = self.value(*gain).data().to_vec();
                let mut gx = vec![0.0; xhat.len()];
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        ggain[j] += gr[j] * hr[j];
                        gbias[j] += gr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        gx[r * d + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                self.acc(*x, gx);
                self.acc(*gain, ggain);
                self.acc(*bias, gbias);
            }
            Op::Conv2d { input, filters, bias } => {
                let (input, filters, bias) = (*input, *filters, *bias);
                let (h, w, c) = match self.shape(input) {
                    [h, w, c] => (*h, *w, *c),
                    _ => unreachable!("checked in forward"),
                };
                let (o, k) = match self.shape(filters) {
                    [o, k, _, _] => (*o, *k),
                    _ => unreachable!("checked in forward"),
                };
                let iv = self.value(input).data().to_vec();
                let fv = self.value(filters).data().to_vec();
                let want_i = self.requires_grad(input);
                let want_f = self.requires_grad(filters);
                let mut gi = vec![0.0; if want_i { iv.len() } else { 0 }];
                let mut gf = vec![0.0; if want_f { fv.len() } else { 0 }];
                for_each_tap(h, w, k, |y, x, yy, xx, ky, kx| {
                    let ioff = (yy * w + xx) * c;
                    for oi in 0..o {
                        let go = g[(oi * h + y) * w + x];
                        if go == 0.0 {
                            continue;
                        }
                        let foff = ((oi * k + ky) * k + kx) * c;
                        if want_i {
                            axpy(go, &fv[foff..foff + c], &mut gi[ioff..ioff + c]);
                        }
                        if want_f {
                            axpy(go, &iv[ioff..ioff + c], &mut gf[foff..foff + c]);
                        }
                    }
                });
                let gb = (0..o).map(|oi| g[oi * h * w..(oi + 1) * h * w].iter().sum()).collect();
                if want_i {
                    self.acc(input, gi);
                }
                if want_f {
                    self.acc(filters, gf);
                }
                self.acc(bias, gb);
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                self.acc(*x, vec![g[0]; n]);
            }
            Op::Mean { x } => {
                let n = self.value(*x).len();
                self.acc(*x, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for ii in 0..inner {
                            gx[o * len * inner + j * inner + ii] = g[o * inner + ii];
                        }
                    }
                }
                self.acc(*x, gx);
            }
            Op::GatherRows { x, idx } => {
                let c = self.shape(*x)[1];
                self.acc_with(*x, |gx| {
                    for (k, &r) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[r * c + j] += g[k * c + j];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(*x).dims2().expect("rank 2");
                let len = self.nodes[i].value.shape()[1];
                let start = *start;
                self.acc_with(*x, |gx| {
                    for row in 0..r {
                        for j in 0..len {
                            gx[row * c + start + j] += g[row * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols { xs } => {
                let total = self.nodes[i].value.shape()[1];
                let mut offset = 0;
                for &x in xs {
                    let (r, c) = self.value(x).dims2().expect("rank 2");
                    self.acc_with(x, |gx| {
                        for row in 0..r {
                            for j in 0..c {
                                gx[row * c + j] += g[row * total + offset + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::ScatterRows { base, update, idx } => {
                let c = self.shape(*base)[1];
                let mut gb = g.to_vec();
                let mut gu = vec![0.0; idx.len() * c];
                for (k, &r) in idx.iter().enumerate() {
                    gu[k * c..(k + 1) * c].copy_from_slice(&g[r * c..(r + 1) * c]);
                    gb[r * c..(r + 1) * c].fill(0.0);
                }
                self.acc(*base, gb);
                self.acc(*update, gu);
            }
        }
        self.nodes[i].op = op;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Plain (non-taped) max-subtracted softmax of a slice.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik != 0.0 {
                axpy(aik, &b[kk * n..(kk + 1) * n], orow);
            }
        }
    }
    out
}

fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Visits every in-bounds (output pixel, kernel tap) pair of a same-padded convolution.
fn for_each_tap(h: usize, w: usize, k: usize, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
    let pad = k / 2;
    for y in 0..h {
        for x in 0..w {
            for ky in 0..k {
                let Some(yy) = (y + ky).checked_sub(pad).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(xx) = (x + kx).checked_sub(pad).filter(|&v| v < w) else {
                        continue;
                    };
                    f(y, x, yy, xx, ky, kx);
                }
            }
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == out[d] { acc } else { 0 };
        acc *= shape[d];
    }
    strides
}

fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if sa == sb {
        for o in 0..n {
            f(o, o, o);
        }
        return;
    }
    let ta = broadcast_strides(sa, out);
    let tb = broadcast_strides(sb, out);
    let rank = out.len();
    let mut index = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            index[d] += 1;
            ia += ta[d];
            ib += tb[d];
            if index[d] < out[d] {
                break;
            }
            ia -= ta[d] * out[d];
            ib -= tb[d] * out[d];
            index[d] = 0;
        }
    }
}
