//! Reverse-mode differentiation over the fixed computation pattern used by
//! the pipeline: encoding -> MLP -> compositing -> loss.
//!
//! Values are recorded on a tape of vector-valued nodes backed by a single
//! flat arena, so building and discarding one graph per ray costs no steady
//! state allocation (see [`Tape::mark`] / [`Tape::truncate`]). A backward
//! sweep from a scalar loss visits each recorded operation exactly once and
//! accumulates adjoints into a parallel gradient arena.
//!
//! The op set is deliberately small: elementwise arithmetic, the transcendental
//! functions the positional encoding needs, matrix-vector products for MLP
//! layers, the activations (relu, softplus, sigmoid), and the scalar
//! reductions (sum, squared norm). `concat`/`broadcast` are structural
//! helpers whose adjoints are split/sum.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GradError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("log of non-positive value")]
    LogNonPositive,
    #[error("backward requires a scalar loss node, got length {0}")]
    NonScalarLoss(usize),
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(u32);

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Div(ValueId, ValueId),
    Neg(ValueId),
    Exp(ValueId),
    Log(ValueId),
    Sin(ValueId),
    Cos(ValueId),
    /// Multiplication by an exact constant (used for power-of-two frequency
    /// scaling in the positional encoding, and for 1/n loss normalization).
    Scale(ValueId, f64),
    /// y = W x with W row-major (rows = output length, cols = len of x).
    MatVec { w: ValueId, x: ValueId },
    Relu(ValueId),
    Softplus(ValueId),
    Sigmoid(ValueId),
    Sum(ValueId),
    SquaredNorm(ValueId),
    /// Concatenation of `n_args` operands stored in the tape's argument arena.
    Concat { args_start: u32, n_args: u32 },
    /// Scalar replicated to the node's length.
    Broadcast(ValueId),
}

#[derive(Clone, Copy, Debug)]
struct Node {
    op: Op,
    off: u32,
    len: u32,
}

/// Snapshot of tape extent, used to rewind per-ray graphs while keeping
/// parameter leaves registered.
#[derive(Clone, Copy, Debug)]
pub struct TapeMark {
    nodes: usize,
    vals: usize,
    concat_args: usize,
}

/// Recording tape. Construction and backward are single-threaded; independent
/// tapes may be used concurrently.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    grads: Vec<f64>,
    concat_args: Vec<ValueId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.vals.clear();
        self.grads.clear();
        self.concat_args.clear();
    }

    pub fn mark(&self) -> TapeMark {
        TapeMark {
            nodes: self.nodes.len(),
            vals: self.vals.len(),
            concat_args: self.concat_args.len(),
        }
    }

    /// Rewind to `mark`, discarding everything recorded after it.
    pub fn truncate(&mut self, mark: TapeMark) {
        self.nodes.truncate(mark.nodes);
        self.vals.truncate(mark.vals);
        self.concat_args.truncate(mark.concat_args);
    }

    pub fn num_ops(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: ValueId) -> &[f64] {
        let n = self.nodes[id.0 as usize];
        &self.vals[n.off as usize..(n.off + n.len) as usize]
    }

    pub fn scalar_value(&self, id: ValueId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "scalar_value on node of length {}", v.len());
        v[0]
    }

    /// Gradient of the last backward'd loss with respect to `id`.
    pub fn grad(&self, id: ValueId) -> &[f64] {
        let n = self.nodes[id.0 as usize];
        &self.grads[n.off as usize..(n.off + n.len) as usize]
    }

    pub fn len_of(&self, id: ValueId) -> usize {
        self.nodes[id.0 as usize].len as usize
    }

    fn push(&mut self, op: Op, len: usize) -> (ValueId, usize) {
        let off = self.vals.len();
        self.vals.resize(off + len, 0.0);
        let id = ValueId(self.nodes.len() as u32);
        self.nodes.push(Node {
            op,
            off: off as u32,
            len: len as u32,
        });
        (id, off)
    }

    /// Record a leaf holding `data`. Leaves are inputs: constants, encoded
    /// pixels, or parameter slices registered via [`register_params`].
    pub fn leaf(&mut self, data: &[f64]) -> ValueId {
        let (id, off) = self.push(Op::Leaf, data.len());
        self.vals[off..off + data.len()].copy_from_slice(data);
        id
    }

    pub fn constant(&mut self, data: &[f64]) -> ValueId {
        self.leaf(data)
    }

    pub fn scalar(&mut self, v: f64) -> ValueId {
        self.leaf(&[v])
    }

    fn binary_elementwise(&mut self, a: ValueId, b: ValueId, op: Op) -> ValueId {
        let (na, nb) = (self.nodes[a.0 as usize], self.nodes[b.0 as usize]);
        assert_eq!(
            na.len, nb.len,
            "elementwise op on mismatched lengths {} vs {}",
            na.len, nb.len
        );
        let len = na.len as usize;
        let (id, off) = self.push(op, len);
        let (ao, bo) = (na.off as usize, nb.off as usize);
        for i in 0..len {
            let (x, y) = (self.vals[ao + i], self.vals[bo + i]);
            self.vals[off + i] = match op {
                Op::Add(..) => x + y,
                Op::Sub(..) => x - y,
                Op::Mul(..) => x * y,
                Op::Div(..) => x / y,
                _ => unreachable!(),
            };
        }
        id
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.binary_elementwise(a, b, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.binary_elementwise(a, b, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.binary_elementwise(a, b, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, GradError> {
        if self.value(b).iter().any(|&v| v == 0.0) {
            return Err(GradError::DivisionByZero);
        }
        Ok(self.binary_elementwise(a, b, Op::Div(a, b)))
    }

    fn unary(&mut self, a: ValueId, op: Op, f: impl Fn(f64) -> f64) -> ValueId {
        let na = self.nodes[a.0 as usize];
        let len = na.len as usize;
        let (id, off) = self.push(op, len);
        let ao = na.off as usize;
        for i in 0..len {
            self.vals[off + i] = f(self.vals[ao + i]);
        }
        id
    }

    pub fn neg(&mut self, a: ValueId) -> ValueId {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn exp(&mut self, a: ValueId) -> ValueId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: ValueId) -> Result<ValueId, GradError> {
        if self.value(a).iter().any(|&v| v <= 0.0) {
            return Err(GradError::LogNonPositive);
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn sin(&mut self, a: ValueId) -> ValueId {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: ValueId) -> ValueId {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> ValueId {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn softplus(&mut self, a: ValueId) -> ValueId {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// y = W x. `w` is a row-major matrix of shape (rows, cols) stored flat;
    /// `x` must have length cols, and rows is inferred from `w.len() / cols`.
    pub fn matvec(&mut self, w: ValueId, x: ValueId) -> ValueId {
        let (nw, nx) = (self.nodes[w.0 as usize], self.nodes[x.0 as usize]);
        let cols = nx.len as usize;
        assert!(cols > 0, "matvec with empty input vector");
        assert_eq!(
            nw.len as usize % cols,
            0,
            "matvec: weight length {} not divisible by input length {}",
            nw.len,
            cols
        );
        let rows = nw.len as usize / cols;
        let (id, off) = self.push(Op::MatVec { w, x }, rows);
        let (wo, xo) = (nw.off as usize, nx.off as usize);
        for i in 0..rows {
            let row = &self.vals[wo + i * cols..wo + (i + 1) * cols];
            let xv = &self.vals[xo..xo + cols];
            self.vals[off + i] = dot(row, xv);
        }
        id
    }

    pub fn sum(&mut self, a: ValueId) -> ValueId {
        let na = self.nodes[a.0 as usize];
        let (id, off) = self.push(Op::Sum(a), 1);
        let ao = na.off as usize;
        self.vals[off] = self.vals[ao..ao + na.len as usize].iter().sum();
        id
    }

    pub fn squared_norm(&mut self, a: ValueId) -> ValueId {
        let na = self.nodes[a.0 as usize];
        let (id, off) = self.push(Op::SquaredNorm(a), 1);
        let ao = na.off as usize;
        let s = &self.vals[ao..ao + na.len as usize];
        self.vals[off] = dot(s, s);
        id
    }

    pub fn concat(&mut self, parts: &[ValueId]) -> ValueId {
        assert!(!parts.is_empty(), "concat of zero operands");
        let args_start = self.concat_args.len() as u32;
        self.concat_args.extend_from_slice(parts);
        let total: usize = parts
            .iter()
            .map(|p| self.nodes[p.0 as usize].len as usize)
            .sum();
        let (id, off) = self.push(
            Op::Concat {
                args_start,
                n_args: parts.len() as u32,
            },
            total,
        );
        let mut cursor = off;
        for p in parts {
            let np = self.nodes[p.0 as usize];
            let (po, pl) = (np.off as usize, np.len as usize);
            self.vals.copy_within(po..po + pl, cursor);
            cursor += pl;
        }
        id
    }

    /// Replicate a scalar node to a vector of length `n`.
    pub fn broadcast(&mut self, a: ValueId, n: usize) -> ValueId {
        let na = self.nodes[a.0 as usize];
        assert_eq!(na.len, 1, "broadcast source must be scalar");
        let v = self.vals[na.off as usize];
        let (id, off) = self.push(Op::Broadcast(a), n);
        self.vals[off..off + n].fill(v);
        id
    }

    /// Reverse sweep from a scalar `loss`, filling the gradient arena.
    /// May be called repeatedly; each call recomputes gradients from scratch.
    pub fn backward(&mut self, loss: ValueId) -> Result<(), GradError> {
        let lnode = self.nodes[loss.0 as usize];
        if lnode.len != 1 {
            return Err(GradError::NonScalarLoss(lnode.len as usize));
        }
        self.grads.clear();
        self.grads.resize(self.vals.len(), 0.0);
        self.grads[lnode.off as usize] = 1.0;

        let nodes = &self.nodes;
        let vals = &self.vals;
        let concat_args = &self.concat_args;
        let grads = &mut self.grads;
        let node_range = |id: ValueId| {
            let n = nodes[id.0 as usize];
            n.off as usize..(n.off + n.len) as usize
        };

        for idx in (0..=loss.0 as usize).rev() {
            let node = nodes[idx];
            let (off, len) = (node.off as usize, node.len as usize);
            // Operands always precede their result in the arena, so the
            // gradient arena splits cleanly at this node's offset.
            let (lo, hi) = grads.split_at_mut(off);
            let g: &[f64] = &hi[..len];
            match node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(lo, node_range(a), g, 1.0);
                    accumulate(lo, node_range(b), g, 1.0);
                }
                Op::Sub(a, b) => {
                    accumulate(lo, node_range(a), g, 1.0);
                    accumulate(lo, node_range(b), g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (ra, rb) = (node_range(a), node_range(b));
                    for i in 0..len {
                        lo[ra.start + i] += g[i] * vals[rb.start + i];
                        lo[rb.start + i] += g[i] * vals[ra.start + i];
                    }
                }
                Op::Div(a, b) => {
                    let (ra, rb) = (node_range(a), node_range(b));
                    for i in 0..len {
                        let bv = vals[rb.start + i];
                        let y = vals[off + i];
                        lo[ra.start + i] += g[i] / bv;
                        lo[rb.start + i] -= g[i] * y / bv;
                    }
                }
                Op::Neg(a) => accumulate(lo, node_range(a), g, -1.0),
                Op::Exp(a) => {
                    let ra = node_range(a);
                    for i in 0..len {
                        lo[ra.start + i] += g[i] * vals[off + i];
                    }
                }
                Op::Log(a) => {
                    let ra = node_range(a);
                    for i in 0..len {
                        lo[ra.start + i] += g[i] / vals[ra.start + i];
                    }
                }
                Op::Sin(a) => {
                    let ra = node_range(a);
                    for i in 0..len {
                        lo[ra.start + i] += g[i] * vals[ra.start + i].cos();
                    }
                }
                Op::Cos(a) => {
                    let ra = node_range(a);
                    for i in 0..len {
                        lo[ra.start + i] -= g[i] * vals[ra.start + i].sin();
                    }
                }
                Op::Scale(a, c) => accumulate(lo, node_range(a), g, c),
                Op::MatVec { w, x } => {
                    // dW += g (outer) x, dx += W^T g
                    let (rw, rx) = (node_range(w), node_range(x));
                    let cols = rx.len();
                    let xv = &vals[rx.clone()];
                    for (i, &gi) in g.iter().enumerate() {
                        if gi != 0.0 {
                            let wrow = rw.start + i * cols;
                            axpy(&mut lo[wrow..wrow + cols], gi, xv);
                            axpy(&mut lo[rx.clone()], gi, &vals[wrow..wrow + cols]);
                        }
                    }
                }
                Op::Relu(a) => {
                    let ra = node_range(a);
                    for i in 0..len {
                        if vals[ra.start + i] > 0.0 {
                            lo[ra.start + i] += g[i];
                        }
                    }
                }
                Op::Softplus(a) => {
                    let ra = node_range(a);
                    for i in 0..len {
                        lo[ra.start + i] += g[i] * sigmoid(vals[ra.start + i]);
                    }
                }
                Op::Sigmoid(a) => {
                    let ra = node_range(a);
                    for i in 0..len {
                        let s = vals[off + i];
                        lo[ra.start + i] += g[i] * s * (1.0 - s);
                    }
                }
                Op::Sum(a) => {
                    let ra = node_range(a);
                    let g0 = g[0];
                    for v in &mut lo[ra] {
                        *v += g0;
                    }
                }
                Op::SquaredNorm(a) => {
                    let ra = node_range(a);
                    let c = 2.0 * g[0];
                    for i in 0..ra.len() {
                        lo[ra.start + i] += c * vals[ra.start + i];
                    }
                }
                Op::Concat { args_start, n_args } => {
                    let mut cursor = 0usize;
                    for k in 0..n_args as usize {
                        let part = concat_args[args_start as usize + k];
                        let rp = node_range(part);
                        let pl = rp.len();
                        accumulate(lo, rp, &g[cursor..cursor + pl], 1.0);
                        cursor += pl;
                    }
                }
                Op::Broadcast(a) => {
                    let ra = node_range(a);
                    lo[ra.start] += g.iter().sum::<f64>();
                }
            }
        }
        Ok(())
    }

}

#[inline]
fn accumulate(dst: &mut [f64], range: std::ops::Range<usize>, g: &[f64], c: f64) {
    let d = &mut dst[range];
    for (o, &gi) in d.iter_mut().zip(g) {
        *o += c * gi;
    }
}

/// dst += s * x
#[inline]
fn axpy(dst: &mut [f64], s: f64, x: &[f64]) {
    for (o, &xi) in dst.iter_mut().zip(x) {
        *o += s * xi;
    }
}

/// Dot product with a fixed 8-lane accumulation scheme, so results are
/// reproducible and the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for j in 0..8 {
            acc[j] += xa[j] * xb[j];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── Parameter vectors ────────────────────────────────────────────────

/// Shape of one named slice in a [`ParamVector`]; bias vectors use cols = 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl SliceSpec {
    pub fn matrix(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        SliceSpec {
            name: name.into(),
            rows,
            cols,
        }
    }

    pub fn vector(name: impl Into<String>, len: usize) -> Self {
        SliceSpec {
            name: name.into(),
            rows: len,
            cols: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named-slice layout of a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    slices: Vec<SliceSpec>,
    offsets: Vec<usize>,
    total: usize,
}

impl ParamLayout {
    pub fn new(slices: Vec<SliceSpec>) -> Self {
        let mut offsets = Vec::with_capacity(slices.len());
        let mut total = 0;
        for s in &slices {
            offsets.push(total);
            total += s.len();
        }
        ParamLayout {
            slices,
            offsets,
            total,
        }
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn slices(&self) -> &[SliceSpec] {
        &self.slices
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.slices.iter().position(|s| s.name == name)
    }

    pub fn range(&self, idx: usize) -> std::ops::Range<usize> {
        self.offsets[idx]..self.offsets[idx] + self.slices[idx].len()
    }

    /// Name of the slice containing flat index `i` (for diagnostics).
    pub fn slice_containing(&self, i: usize) -> &str {
        for (k, s) in self.slices.iter().enumerate() {
            if self.range(k).contains(&i) {
                return &s.name;
            }
        }
        "<out of range>"
    }
}

/// All learnable weights, flattened with named slices.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: ParamLayout,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: ParamLayout) -> Self {
        let values = vec![0.0; layout.total_len()];
        ParamVector { layout, values }
    }

    pub fn from_values(layout: ParamLayout, values: Vec<f64>) -> Self {
        assert_eq!(
            values.len(),
            layout.total_len(),
            "parameter vector length {} does not match layout total {}",
            values.len(),
            layout.total_len()
        );
        ParamVector { layout, values }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, name: &str) -> &[f64] {
        let idx = self
            .layout
            .index_of(name)
            .unwrap_or_else(|| panic!("no parameter slice named {name}"));
        &self.values[self.layout.range(idx)]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Flat index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.values.iter().position(|v| !v.is_finite())
    }
}

/// Parameter slices registered as leaves on a tape, in layout order.
pub struct ParamLeaves {
    pub ids: Vec<ValueId>,
}

pub fn register_params(tape: &mut Tape, params: &ParamVector) -> ParamLeaves {
    let ids = (0..params.layout().slices().len())
        .map(|i| tape.leaf(&params.values()[params.layout().range(i)]))
        .collect();
    ParamLeaves { ids }
}

/// Gather leaf gradients into a vector with the same layout as the params.
pub fn collect_param_grad(tape: &Tape, leaves: &ParamLeaves, layout: &ParamLayout) -> ParamVector {
    let mut grad = ParamVector::zeros(layout.clone());
    for (i, id) in leaves.ids.iter().enumerate() {
        let range = layout.range(i);
        grad.values_mut()[range].copy_from_slice(tape.grad(*id));
    }
    grad
}

/// acc += scale * (leaf gradients), flattened in layout order.
pub fn accumulate_param_grad(
    tape: &Tape,
    leaves: &ParamLeaves,
    layout: &ParamLayout,
    scale: f64,
    acc: &mut [f64],
) {
    assert_eq!(acc.len(), layout.total_len());
    for (i, id) in leaves.ids.iter().enumerate() {
        let range = layout.range(i);
        axpy(&mut acc[range], scale, tape.grad(*id));
    }
}

/// Compare the tape's analytic gradient of `build` against central finite
/// differences. Returns max over parameters of
/// |analytic - central| / max(|analytic|, |central|, 1e-8).
pub fn finite_difference_check<F>(
    build: F,
    params: &ParamVector,
    step: f64,
) -> Result<f64, GradError>
where
    F: Fn(&mut Tape, &ParamLeaves) -> Result<ValueId, GradError>,
{
    assert!(step > 0.0, "finite difference step must be positive");

    let mut tape = Tape::new();
    let leaves = register_params(&mut tape, params);
    let loss = build(&mut tape, &leaves)?;
    tape.backward(loss)?;
    let analytic = collect_param_grad(&tape, &leaves, params.layout());

    let eval = |p: &ParamVector| -> Result<f64, GradError> {
        let mut t = Tape::new();
        let l = register_params(&mut t, p);
        let id = build(&mut t, &l)?;
        Ok(t.scalar_value(id))
    };

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + step;
        let fp = eval(&probe)?;
        probe.values_mut()[i] = orig - step;
        let fm = eval(&probe)?;
        probe.values_mut()[i] = orig;
        let central = (fp - fm) / (2.0 * step);
        let a = analytic.values()[i];
        let denom = a.abs().max(central.abs()).max(1e-8);
        worst = worst.max((a - central).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(label: &str, expected: f64, actual: f64, tol: f64) {
        assert!(
            (expected - actual).abs() <= tol,
            "{label}: expected {expected}, got {actual} (diff {})",
            (expected - actual).abs()
        );
    }

    #[test]
    fn softplus_at_zero_is_ln_two() {
        let mut t = Tape::new();
        let x = t.scalar(0.0);
        let y = t.softplus(x);
        assert_close("softplus(0)", std::f64::consts::LN_2, t.scalar_value(y), 1e-15);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut t = Tape::new();
        let x = t.scalar(0.0);
        let y = t.sigmoid(x);
        assert_close("sigmoid(0)", 0.5, t.scalar_value(y), 1e-15);
    }

    #[test]
    fn derivative_of_x_exp_x_at_one() {
        // d/dx [x exp(x)] = (1+x) exp(x) = 2e at x = 1; checked against a
        // central difference with step 1e-6.
        let mut t = Tape::new();
        let x = t.scalar(1.0);
        let e = t.exp(x);
        let y = t.mul(x, e);
        t.backward(y).unwrap();
        let analytic = t.grad(x)[0];
        assert_close("analytic", 2.0 * std::f64::consts::E, analytic, 1e-12);

        let f = |v: f64| v * v.exp();
        let h = 1e-6;
        let central = (f(1.0 + h) - f(1.0 - h)) / (2.0 * h);
        assert_close("vs central difference", central, analytic, 1e-4);
    }

    #[test]
    fn backward_of_squared_norm_doubles_inputs() {
        let layout = ParamLayout::new(vec![SliceSpec::vector("p", 3)]);
        let params = ParamVector::from_values(layout, vec![1.0, 2.0, 3.0]);
        let mut t = Tape::new();
        let leaves = register_params(&mut t, &params);
        let loss = t.squared_norm(leaves.ids[0]);
        t.backward(loss).unwrap();
        let grad = collect_param_grad(&t, &leaves, params.layout());
        assert_eq!(grad.values(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unused_slice_gets_zero_gradient() {
        let layout = ParamLayout::new(vec![
            SliceSpec::vector("used", 2),
            SliceSpec::vector("unused", 4),
        ]);
        let params = ParamVector::from_values(layout, vec![1.0, -2.0, 5.0, 5.0, 5.0, 5.0]);
        let mut t = Tape::new();
        let leaves = register_params(&mut t, &params);
        let loss = t.squared_norm(leaves.ids[0]);
        t.backward(loss).unwrap();
        let grad = collect_param_grad(&t, &leaves, params.layout());
        assert_eq!(grad.slice("used"), &[2.0, -4.0]);
        assert_eq!(grad.slice("unused"), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.constant(&[1.0, 2.0]);
        assert_eq!(t.backward(x), Err(GradError::NonScalarLoss(2)));
    }

    #[test]
    fn division_by_zero_is_a_domain_error() {
        let mut t = Tape::new();
        let a = t.scalar(1.0);
        let b = t.scalar(0.0);
        assert_eq!(t.div(a, b), Err(GradError::DivisionByZero));
    }

    #[test]
    fn log_of_non_positive_is_a_domain_error() {
        let mut t = Tape::new();
        let a = t.scalar(-0.5);
        assert_eq!(t.log(a), Err(GradError::LogNonPositive));
        let b = t.scalar(0.0);
        assert_eq!(t.log(b), Err(GradError::LogNonPositive));
    }

    #[test]
    fn gradients_are_linear_in_the_loss() {
        // grad(a f + b g) = a grad f + b grad g, elementwise within 1e-12.
        let layout = ParamLayout::new(vec![SliceSpec::vector("p", 4)]);
        let params = ParamVector::from_values(layout, vec![0.3, -1.2, 0.7, 2.0]);
        let (a, b) = (1.75, -0.4);

        let grad_of = |combine: &dyn Fn(&mut Tape, ValueId, ValueId) -> ValueId| {
            let mut t = Tape::new();
            let leaves = register_params(&mut t, &params);
            let p = leaves.ids[0];
            let f = t.squared_norm(p);
            let sp = t.softplus(p);
            let g = t.sum(sp);
            let loss = combine(&mut t, f, g);
            t.backward(loss).unwrap();
            collect_param_grad(&t, &leaves, params.layout())
        };

        let combined = grad_of(&|t, f, g| {
            let af = t.scale(f, a);
            let bg = t.scale(g, b);
            t.add(af, bg)
        });
        let f_only = grad_of(&|t, f, _| t.scale(f, 1.0));
        let g_only = grad_of(&|t, _, g| t.scale(g, 1.0));

        for i in 0..4 {
            let expect = a * f_only.values()[i] + b * g_only.values()[i];
            assert_close("linearity", expect, combined.values()[i], 1e-12);
        }
    }

    #[test]
    fn repeated_backward_is_deterministic() {
        let layout = ParamLayout::new(vec![SliceSpec::matrix("w", 3, 2)]);
        let params =
            ParamVector::from_values(layout, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]);
        let mut t = Tape::new();
        let leaves = register_params(&mut t, &params);
        let x = t.constant(&[1.3, -0.7]);
        let y = t.matvec(leaves.ids[0], x);
        let s = t.sigmoid(y);
        let loss = t.squared_norm(s);
        t.backward(loss).unwrap();
        let first = collect_param_grad(&t, &leaves, params.layout());
        t.backward(loss).unwrap();
        let second = collect_param_grad(&t, &leaves, params.layout());
        assert_eq!(first.values(), second.values());
    }

    /// Single-primitive graphs checked against central differences on random
    /// inputs kept away from kinks and singularities.
    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        type Builder = fn(&mut Tape, ValueId) -> ValueId;
        let cases: Vec<(&str, Builder, fn(&mut ChaCha8Rng) -> f64)> = vec![
            ("add", |t, p| { let c = t.constant(&[0.4, -0.2, 1.1]); let s = t.add(p, c); t.sum(s) },
             |r| r.random_range(-2.0..2.0)),
            ("sub", |t, p| { let c = t.constant(&[0.4, -0.2, 1.1]); let s = t.sub(p, c); t.sum(s) },
             |r| r.random_range(-2.0..2.0)),
            ("mul", |t, p| { let c = t.constant(&[0.4, -0.2, 1.1]); let s = t.mul(p, c); t.sum(s) },
             |r| r.random_range(-2.0..2.0)),
            ("div", |t, p| { let c = t.constant(&[0.4, 0.9, 1.1]); let s = t.div(p, c).unwrap(); t.sum(s) },
             |r| r.random_range(-2.0..2.0)),
            ("neg", |t, p| { let s = t.neg(p); t.sum(s) }, |r| r.random_range(-2.0..2.0)),
            ("exp", |t, p| { let s = t.exp(p); t.sum(s) }, |r| r.random_range(-2.0..2.0)),
            ("log", |t, p| { let s = t.log(p).unwrap(); t.sum(s) },
             |r| r.random_range(0.5..3.0)),
            ("sin", |t, p| { let s = t.sin(p); t.sum(s) }, |r| r.random_range(-2.0..2.0)),
            ("cos", |t, p| { let s = t.cos(p); t.sum(s) }, |r| r.random_range(-2.0..2.0)),
            ("scale", |t, p| { let s = t.scale(p, 8.0); t.sum(s) }, |r| r.random_range(-2.0..2.0)),
            ("relu", |t, p| { let s = t.relu(p); t.sum(s) },
             |r| { let v: f64 = r.random_range(0.1..2.0); if r.random_bool(0.5) { v } else { -v } }),
            ("softplus", |t, p| { let s = t.softplus(p); t.sum(s) }, |r| r.random_range(-2.0..2.0)),
            ("sigmoid", |t, p| { let s = t.sigmoid(p); t.sum(s) }, |r| r.random_range(-2.0..2.0)),
            ("sum", |t, p| t.sum(p), |r| r.random_range(-2.0..2.0)),
            ("squared_norm", |t, p| t.squared_norm(p), |r| r.random_range(-2.0..2.0)),
            ("matvec", |t, p| { let x = t.constant(&[0.3, -0.8, 0.5]); let y = t.matvec(p, x); t.sum(y) },
             |r| r.random_range(-2.0..2.0)),
            ("concat", |t, p| { let c = t.constant(&[1.0, 2.0]); let s = t.concat(&[p, c]); t.squared_norm(s) },
             |r| r.random_range(-2.0..2.0)),
        ];

        for (name, build, sample) in cases {
            for _ in 0..100 {
                let layout = ParamLayout::new(vec![SliceSpec::vector("p", 3)]);
                let vals: Vec<f64> = (0..3).map(|_| sample(&mut rng)).collect();
                let params = ParamVector::from_values(layout, vals);
                let err = finite_difference_check(
                    |t, l| Ok(build(t, l.ids[0])),
                    &params,
                    1e-6,
                )
                .unwrap();
                assert!(err < 1e-5, "{name}: fd mismatch {err}");
            }
        }
    }

    #[test]
    fn broadcast_gradient_sums_upstream() {
        let layout = ParamLayout::new(vec![SliceSpec::vector("p", 1)]);
        let params = ParamVector::from_values(layout, vec![0.7]);
        let err = finite_difference_check(
            |t, l| {
                let b = t.broadcast(l.ids[0], 5);
                let c = t.constant(&[1.0, 2.0, 3.0, 4.0, 5.0]);
                let m = t.mul(b, c);
                Ok(t.squared_norm(m))
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "broadcast fd mismatch {err}");
    }

    #[test]
    fn fd_check_on_quadratic_form_is_tight() {
        let layout = ParamLayout::new(vec![SliceSpec::vector("p", 5)]);
        let params =
            ParamVector::from_values(layout, vec![0.5, -1.0, 2.0, 0.25, -0.75]);
        let err = finite_difference_check(
            |t, l| Ok(t.squared_norm(l.ids[0])),
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "quadratic fd error {err}");
    }

    #[test]
    fn fd_check_on_constant_function_is_zero() {
        let layout = ParamLayout::new(vec![SliceSpec::vector("p", 3)]);
        let params = ParamVector::from_values(layout, vec![0.5, -1.0, 2.0]);
        let err = finite_difference_check(
            |t, _| {
                let c = t.scalar(42.0);
                Ok(t.scale(c, 1.0))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn fd_check_on_sigmoid_exp_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layout = ParamLayout::new(vec![SliceSpec::vector("p", 6)]);
        let vals: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let params = ParamVector::from_values(layout, vals);
        let err = finite_difference_check(
            |t, l| {
                let e = t.exp(l.ids[0]);
                let s = t.sigmoid(e);
                Ok(t.sum(s))
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "composite fd error {err}");
    }

    #[test]
    fn truncate_rewinds_per_graph_state() {
        let mut t = Tape::new();
        let p = t.constant(&[1.0, 2.0]);
        let mark = t.mark();
        for _ in 0..3 {
            t.truncate(mark);
            let x = t.constant(&[3.0, 4.0]);
            let m = t.mul(p, x);
            let loss = t.sum(m);
            t.backward(loss).unwrap();
            assert_eq!(t.grad(p), &[3.0, 4.0]);
        }
        assert_eq!(t.num_ops(), 4);
    }
}
