//! Reverse-mode automatic differentiation over [`DenseArray`] values.
//!
//! The tape is eager: each op computes its output immediately and records the
//! inputs needed for the backward sweep. Graphs are built per evaluation by a
//! [`DifferentiableFn`], so evaluation and gradients are pure and safe to call
//! from many threads on a shared objective — every call owns its tape.
//!
//! The primitive set is deliberately small (arithmetic, exp/log, sigmoid,
//! softplus, trig, reductions and segment scans, gathers, matmul) and every
//! objective in the crate is expressed in it. Because the tape is eager,
//! *values* are available while the graph is being built; code that needs
//! data-dependent constants (interpolation cell indices, zero-density masks)
//! reads forward values and bakes them in as constants, which keeps the
//! recorded graph differentiable while the constants stay piecewise-fixed.
//!
//! Nonlinear indexing (trilinear interpolation) has a fused fast path,
//! [`Tape::interp`], equivalent to eight gathers combined with constant
//! weights; the generic gather path covers the case where the weights are
//! themselves tape variables.

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softplus, DenseArray};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Node id; indexes the per-node gradient list from [`Tape::backward`].
    pub fn id(self) -> usize {
        self.0
    }
}

/// Precomputed 8-corner interpolation table: for each output element, source
/// indices and constant convex weights.
#[derive(Debug)]
pub struct InterpTable {
    pub idx: Vec<[u32; 8]>,
    pub w: Vec<[f64; 8]>,
}

enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Sin(Var),
    Cos(Var),
    Sigmoid(Var),
    Softplus(Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Sum(Var),
    /// Sum within consecutive groups of `n`: [g*n] -> [g].
    SegmentSum(Var, usize),
    /// Exclusive prefix sum within consecutive groups of `n`: [g*n] -> [g*n].
    SegmentCumsumExcl(Var, usize),
    /// Repeat each entry `n` times: [g] -> [g*n].
    RepeatPerSegment(Var, usize),
    Gather(Var, Arc<Vec<u32>>),
    Interp(Var, Arc<InterpTable>),
    /// [m,k] x [k,n] -> [m,n].
    MatMul(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Sum(..) => "sum",
            Op::SegmentSum(..) => "segment_sum",
            Op::SegmentCumsumExcl(..) => "segment_cumsum_excl",
            Op::RepeatPerSegment(..) => "repeat_per_segment",
            Op::Gather(..) => "gather",
            Op::Interp(..) => "interp",
            Op::MatMul(..) => "matmul",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node {
    value: DenseArray,
    needs_grad: bool,
    op: Op,
}

/// Eager define-by-run tape.
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Error>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(64),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First non-finite fault recorded while building, if any.
    pub fn fault(&self) -> Option<&Error> {
        self.fault.as_ref()
    }

    /// Remove and return the recorded fault, if any. Callers that drive a
    /// tape directly (rather than through [`evaluate`]/[`gradient`]) check
    /// this after building.
    pub fn take_fault(&mut self) -> Option<Error> {
        self.fault.take()
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: DenseArray, needs_grad: bool, op: Op) -> Var {
        if self.fault.is_none() && !value.all_finite() {
            self.fault = Some(Error::NonFinite {
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: DenseArray) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.push(value, false, Op::Const)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(DenseArray::scalar(v))
    }

    fn binop(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if va.shape() == vb.shape() {
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            DenseArray::from_vec(va.shape().to_vec(), data)
        } else if vb.is_scalar() {
            let y = vb.data()[0];
            va.map(|x| f(x, y))
        } else if va.is_scalar() {
            let x = va.data()[0];
            vb.map(|y| f(x, y))
        } else {
            panic!(
                "{}: incompatible shapes {:?} vs {:?}",
                op.name(),
                va.shape(),
                vb.shape()
            );
        };
        let needs = self.ng(a) || self.ng(b);
        self.push(value, needs, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binop(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binop(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binop(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binop(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unop(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[a.0].value.map(f);
        let needs = self.ng(a);
        self.push(value, needs, op)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unop(a, |x| -x, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unop(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unop(a, f64::ln, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unop(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unop(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unop(a, f64::cos, Op::Cos(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unop(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unop(a, softplus, Op::Softplus(a))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unop(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unop(a, |x| x * s, Op::MulScalar(a, s))
    }

    /// Square, as multiply with itself.
    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Full reduction to a scalar node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let needs = self.ng(a);
        self.push(DenseArray::scalar(s), needs, Op::Sum(a))
    }

    pub fn segment_sum(&mut self, a: Var, n: usize) -> Var {
        let va = &self.nodes[a.0].value;
        assert!(n > 0 && va.len() % n == 0, "segment_sum group size");
        let g = va.len() / n;
        let mut out = vec![0.0; g];
        for (i, chunk) in va.data().chunks_exact(n).enumerate() {
            out[i] = chunk.iter().sum();
        }
        let needs = self.ng(a);
        self.push(DenseArray::vector(out), needs, Op::SegmentSum(a, n))
    }

    /// Exclusive prefix sum within each consecutive group of `n` entries.
    pub fn segment_cumsum_excl(&mut self, a: Var, n: usize) -> Var {
        let va = &self.nodes[a.0].value;
        assert!(n > 0 && va.len() % n == 0, "segment_cumsum group size");
        let mut out = vec![0.0; va.len()];
        for (seg_out, seg_in) in out
            .chunks_exact_mut(n)
            .zip(va.data().chunks_exact(n))
        {
            let mut acc = 0.0;
            for (o, &x) in seg_out.iter_mut().zip(seg_in) {
                *o = acc;
                acc += x;
            }
        }
        let needs = self.ng(a);
        self.push(DenseArray::vector(out), needs, Op::SegmentCumsumExcl(a, n))
    }

    /// Repeat each entry `n` times (adjoint of segment_sum).
    pub fn repeat_per_segment(&mut self, a: Var, n: usize) -> Var {
        let va = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(va.len() * n);
        for &x in va.data() {
            out.extend(std::iter::repeat(x).take(n));
        }
        let needs = self.ng(a);
        self.push(DenseArray::vector(out), needs, Op::RepeatPerSegment(a, n))
    }

    pub fn gather(&mut self, a: Var, idx: Arc<Vec<u32>>) -> Var {
        let va = &self.nodes[a.0].value;
        let out: Vec<f64> = idx.iter().map(|&i| va.data()[i as usize]).collect();
        let needs = self.ng(a);
        self.push(DenseArray::vector(out), needs, Op::Gather(a, idx))
    }

    /// Fused weighted 8-corner gather with constant weights.
    pub fn interp(&mut self, src: Var, table: Arc<InterpTable>) -> Var {
        let vs = self.nodes[src.0].value.data();
        let mut out = Vec::with_capacity(table.idx.len());
        for (ids, ws) in table.idx.iter().zip(&table.w) {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += ws[k] * vs[ids[k] as usize];
            }
            out.push(acc);
        }
        let needs = self.ng(src);
        self.push(DenseArray::vector(out), needs, Op::Interp(src, table))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shapes {:?} x {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &va.data()[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &vb.data()[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let needs = self.ng(a) || self.ng(b);
        self.push(
            DenseArray::from_vec(vec![m, n], out),
            needs,
            Op::MatMul(a, b),
        )
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let arrays: Vec<&DenseArray> = parts.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = DenseArray::concat(&arrays);
        let needs = parts.iter().any(|&v| self.ng(v));
        self.push(value, needs, Op::Concat(parts.to_vec()))
    }

    /// Flat contiguous slice of a node's storage; result is a vector.
    pub fn slice(&mut self, a: Var, range: Range<usize>) -> Var {
        let va = &self.nodes[a.0].value;
        assert!(range.end <= va.len(), "slice out of range");
        let value = DenseArray::vector(va.data()[range.clone()].to_vec());
        let needs = self.ng(a);
        self.push(value, needs, Op::Slice(a, range.start, range.len()))
    }

    /// Flat contiguous slice reinterpreted under `shape` (one copy, no
    /// separate reshape node); used to carve weight matrices out of a flat
    /// parameter vector.
    pub fn slice_shaped(&mut self, a: Var, range: Range<usize>, shape: Vec<usize>) -> Var {
        let va = &self.nodes[a.0].value;
        assert!(range.end <= va.len(), "slice out of range");
        assert_eq!(
            shape.iter().product::<usize>(),
            range.len(),
            "slice_shaped shape/range mismatch"
        );
        let value = DenseArray::from_vec(shape, va.data()[range.clone()].to_vec());
        let needs = self.ng(a);
        self.push(value, needs, Op::Slice(a, range.start, range.len()))
    }

    /// Reinterpret a node's storage under a new shape (same element count).
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let value = self.nodes[a.0].value.clone().reshaped(shape);
        let needs = self.ng(a);
        self.push(value, needs, Op::Reshape(a))
    }

    /// Convenience: sum of squared entries as a scalar node.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        self.sum(sq)
    }

    /// Backward sweep from a scalar root. Returns per-node gradients (None
    /// for nodes the root does not depend on, or that need no gradient).
    pub fn backward(&self, root: Var) -> Result<Vec<Option<DenseArray>>> {
        let rv = &self.nodes[root.0].value;
        assert!(rv.is_scalar(), "backward root must be scalar, got {:?}", rv.shape());
        let mut grads: Vec<Option<DenseArray>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(DenseArray::scalar(1.0));

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    /// Add the VJP contributions of node `i` (upstream gradient `g`) into the
    /// gradients of its inputs.
    fn accumulate(&self, i: usize, g: &DenseArray, grads: &mut [Option<DenseArray>]) {
        let node = &self.nodes[i];
        let gl = g.len();
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                add_contrib(&self.nodes, grads, *a, gl, |j| gd[j]);
                add_contrib(&self.nodes, grads, *b, gl, |j| gd[j]);
            }
            Op::Sub(a, b) => {
                add_contrib(&self.nodes, grads, *a, gl, |j| gd[j]);
                add_contrib(&self.nodes, grads, *b, gl, |j| -gd[j]);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                add_contrib(&self.nodes, grads, *a, gl, |j| gd[j] * pick(bd, j));
                add_contrib(&self.nodes, grads, *b, gl, |j| gd[j] * pick(ad, j));
            }
            Op::Div(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                add_contrib(&self.nodes, grads, *a, gl, |j| gd[j] / pick(bd, j));
                add_contrib(&self.nodes, grads, *b, gl, |j| {
                    let bv = pick(bd, j);
                    -gd[j] * pick(ad, j) / (bv * bv)
                });
            }
            Op::Neg(a) => add_contrib(&self.nodes, grads, *a, gl, |j| -gd[j]),
            Op::Exp(a) => {
                let out = node.value.data();
                add_contrib(&self.nodes, grads, *a, gl, |j| gd[j] * out[j]);
            }
            Op::Ln(a) => {
                let ad = self.value(*a).data();
                add_contrib(&self.nodes, grads, *a, gl, |j| gd[j] / ad[j]);
            }
            Op::Sqrt(a) => {
                let out = node.value.data();
                add_contrib(&self.nodes, grads, *a, gl, |j| 0.5 * gd[j] / out[j]);
            }
            Op::Sin(a) => {
                let ad = self.value(*a).data();
                add_contrib(&self.nodes, grads, *a, gl, |j| gd[j] * ad[j].cos());
            }
            Op::Cos(a) => {
                let ad = self.value(*a).data();
                add_contrib(&self.nodes, grads, *a, gl, |j| -gd[j] * ad[j].sin());
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                add_contrib(&self.nodes, grads, *a, gl, |j| {
                    let s = out[j];
                    gd[j] * s * (1.0 - s)
                });
            }
            Op::Softplus(a) => {
                let ad = self.value(*a).data();
                add_contrib(&self.nodes, grads, *a, gl, |j| gd[j] * sigmoid(ad[j]));
            }
            Op::AddScalar(a) => add_contrib(&self.nodes, grads, *a, gl, |j| gd[j]),
            Op::MulScalar(a, s) => {
                let s = *s;
                add_contrib(&self.nodes, grads, *a, gl, |j| gd[j] * s);
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                let n = self.value(*a).len();
                add_contrib(&self.nodes, grads, *a, n, |_| g0);
            }
            Op::SegmentSum(a, n) => {
                let n = *n;
                let len = self.value(*a).len();
                add_contrib(&self.nodes, grads, *a, len, |j| gd[j / n]);
            }
            Op::SegmentCumsumExcl(a, n) => {
                // out[j] = sum_{k<j in segment} in[k]
                // => d in[k] = sum_{j>k in segment} g[j]: reverse exclusive scan.
                let n = *n;
                let len = self.value(*a).len();
                let mut contrib = vec![0.0; len];
                for (seg_c, seg_g) in contrib.chunks_exact_mut(n).zip(gd.chunks_exact(n)) {
                    let mut acc = 0.0;
                    for k in (0..n).rev() {
                        seg_c[k] = acc;
                        acc += seg_g[k];
                    }
                }
                add_contrib(&self.nodes, grads, *a, len, |j| contrib[j]);
            }
            Op::RepeatPerSegment(a, n) => {
                let n = *n;
                let len = self.value(*a).len();
                add_contrib(&self.nodes, grads, *a, len, |j| {
                    gd[j * n..(j + 1) * n].iter().sum()
                });
            }
            Op::Gather(a, idx) => {
                if let Some(slot) = grad_slot(&self.nodes, grads, *a) {
                    let sd = slot.data_mut();
                    for (j, &src) in idx.iter().enumerate() {
                        sd[src as usize] += gd[j];
                    }
                }
            }
            Op::Interp(src, table) => {
                if let Some(slot) = grad_slot(&self.nodes, grads, *src) {
                    let sd = slot.data_mut();
                    for (j, (ids, ws)) in table.idx.iter().zip(&table.w).enumerate() {
                        let gj = gd[j];
                        for k in 0..8 {
                            sd[ids[k] as usize] += ws[k] * gj;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                // dA = g . B^T
                if self.ng(*a) {
                    let bd = self.value(*b).data();
                    let slot = grad_slot(&self.nodes, grads, *a).unwrap();
                    let sd = slot.data_mut();
                    for i2 in 0..m {
                        let grow = &gd[i2 * n..(i2 + 1) * n];
                        let srow = &mut sd[i2 * k..(i2 + 1) * k];
                        for (p, s) in srow.iter_mut().enumerate() {
                            let brow = &bd[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for (gv, bv) in grow.iter().zip(brow) {
                                acc += gv * bv;
                            }
                            *s += acc;
                        }
                    }
                }
                // dB = A^T . g
                if self.ng(*b) {
                    let ad = self.value(*a).data();
                    let slot = grad_slot(&self.nodes, grads, *b).unwrap();
                    let sd = slot.data_mut();
                    for i2 in 0..m {
                        let grow = &gd[i2 * n..(i2 + 1) * n];
                        for p in 0..k {
                            let av = ad[i2 * k + p];
                            let srow = &mut sd[p * n..(p + 1) * n];
                            for (s, gv) in srow.iter_mut().zip(grow) {
                                *s += av * gv;
                            }
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let o = off;
                    add_contrib(&self.nodes, grads, p, len, |j| gd[o + j]);
                    off += len;
                }
            }
            Op::Slice(a, start, len) => {
                if let Some(slot) = grad_slot(&self.nodes, grads, *a) {
                    let sd = slot.data_mut();
                    for j in 0..*len {
                        sd[start + j] += gd[j];
                    }
                }
            }
            Op::Reshape(a) => add_contrib(&self.nodes, grads, *a, gl, |j| gd[j]),
        }
    }
}

/// Gradient buffer for input `v`, lazily zero-initialized; None when the node
/// does not require a gradient.
fn grad_slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<DenseArray>],
    v: Var,
) -> Option<&'a mut DenseArray> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let shape = nodes[v.0].value.shape().to_vec();
    Some(grads[v.0].get_or_insert_with(|| DenseArray::zeros(shape)))
}

/// Scalar-broadcast-aware read of a binop input's data.
#[inline]
fn pick(data: &[f64], j: usize) -> f64 {
    if data.len() == 1 {
        data[0]
    } else {
        data[j]
    }
}

/// Accumulate an output-shaped contribution into input `v`, reducing to a
/// scalar when the input was broadcast.
fn add_contrib<F: FnMut(usize) -> f64>(
    nodes: &[Node],
    grads: &mut [Option<DenseArray>],
    v: Var,
    out_len: usize,
    mut contrib: F,
) {
    if let Some(slot) = grad_slot(nodes, grads, v) {
        if slot.len() == out_len {
            for (j, s) in slot.data_mut().iter_mut().enumerate() {
                *s += contrib(j);
            }
        } else {
            debug_assert!(slot.is_scalar());
            let mut acc = 0.0;
            for j in 0..out_len {
                acc += contrib(j);
            }
            slot.data_mut()[0] += acc;
        }
    }
}

/// A scalar-valued differentiable objective: an evaluable map from one
/// parameter array to a scalar, together with its gradient map (obtained by
/// replaying the same graph backwards).
pub trait DifferentiableFn: Send + Sync {
    fn param_shape(&self) -> Vec<usize>;
    /// Record the computation onto `tape`, returning the scalar output node.
    fn build(&self, tape: &mut Tape, param: Var) -> Var;
}

/// Closure adapter for [`DifferentiableFn`].
pub struct FnObjective<F> {
    shape: Vec<usize>,
    build: F,
}

impl<F> FnObjective<F>
where
    F: Fn(&mut Tape, Var) -> Var + Send + Sync,
{
    pub fn new(shape: Vec<usize>, build: F) -> Self {
        FnObjective { shape, build }
    }
}

impl<F> DifferentiableFn for FnObjective<F>
where
    F: Fn(&mut Tape, Var) -> Var + Send + Sync,
{
    fn param_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }

    fn build(&self, tape: &mut Tape, param: Var) -> Var {
        (self.build)(tape, param)
    }
}

fn check_shape(f: &dyn DifferentiableFn, at: &DenseArray) -> Result<()> {
    let want = f.param_shape();
    if at.shape() != want.as_slice() {
        return Err(Error::BadParamShape {
            got: at.shape().to_vec(),
            want,
        });
    }
    Ok(())
}

/// Evaluate `f` at `at`. Two calls with identical inputs produce bit-identical
/// outputs; a non-finite intermediate reports the offending operation.
pub fn evaluate(f: &dyn DifferentiableFn, at: &DenseArray) -> Result<f64> {
    check_shape(f, at)?;
    let mut tape = Tape::new();
    let p = tape.leaf(at.clone());
    let root = f.build(&mut tape, p);
    if let Some(fault) = tape.fault.take() {
        return Err(fault);
    }
    Ok(tape.value(root).item())
}

/// Evaluate `f` and its gradient at `at`.
pub fn gradient(f: &dyn DifferentiableFn, at: &DenseArray) -> Result<(f64, DenseArray)> {
    check_shape(f, at)?;
    let mut tape = Tape::new();
    let p = tape.leaf(at.clone());
    let root = f.build(&mut tape, p);
    if let Some(fault) = tape.fault.take() {
        return Err(fault);
    }
    let value = tape.value(root).item();
    let grads = tape.backward(root)?;
    let g = grads[0]
        .clone()
        .unwrap_or_else(|| DenseArray::zeros(at.shape().to_vec()));
    if !g.all_finite() {
        return Err(Error::NonFinite {
            op: "backward",
            node: root.0,
        });
    }
    Ok((value, g))
}

/// Compare the analytic gradient against central finite differences with step
/// `h`, returning the max relative error
/// `max_i |analytic_i - central_i| / max(|analytic_i|, 1e-8)`.
pub fn fd_check(f: &dyn DifferentiableFn, at: &DenseArray, h: f64) -> Result<f64> {
    let (_, g) = gradient(f, at)?;
    let mut worst = 0.0f64;
    let mut x = at.clone();
    for i in 0..at.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let fp = evaluate(f, &x)?;
        x.data_mut()[i] = orig - h;
        let fm = evaluate(f, &x)?;
        x.data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let a = g.data()[i];
        let rel = (a - fd).abs() / a.abs().max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
