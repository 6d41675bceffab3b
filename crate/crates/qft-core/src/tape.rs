//! Reverse-mode autodiff over a flat tape.
//!
//! Nodes are appended in execution order, so creation order is already a
//! topological order and `backward` is a single reverse sweep. Values are
//! f32. The two recode ops (`requant`, `requant2`) do their multiply in f64
//! internally before rounding; this mirrors the integer pipeline exactly and
//! is what makes fake-quant simulation bit-exact against it.
//!
//! Lossy ops (round + clip) use the straight-through estimator: the backward
//! pass treats round as identity inside the clip range and zero outside.
//! A code that lands exactly on the clip boundary without being clipped
//! counts as in-range.

use crate::error::TensorError;
use crate::tensor::{round_half_away, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Structural description of a node. Saved backward state (clip masks,
/// argmax indices) is private to the tape; oracles re-derive their own.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Div(VarId, VarId),
    AddConst(VarId, f32),
    MulConst(VarId, f32),
    AddBcast { t: VarId, v: VarId, axis: usize },
    MulBcast { t: VarId, v: VarId, axis: usize },
    DivBcast { t: VarId, v: VarId, axis: usize },
    Matmul { a: VarId, b: VarId, transpose_b: bool },
    Conv2d { x: VarId, w: VarId, stride: usize, pad: usize },
    DepthwiseConv2d { x: VarId, w: VarId, stride: usize, pad: usize },
    Relu(VarId),
    Relu6(VarId),
    MaxPool { x: VarId, kernel: usize, stride: usize },
    AvgPoolGlobal(VarId),
    SumSpatial(VarId),
    Concat { inputs: Vec<VarId>, axis: usize },
    ReduceSum(VarId),
    L2Norm(VarId),
    LogSoftmax(VarId),
    Reciprocal(VarId),
    OuterProduct(VarId, VarId),
    RoundSteClip { x: VarId, qmin: f32, qmax: f32 },
    Requant { x: VarId, f: VarId, z: f32, qlo: f32, qhi: f32, relu: bool },
    Requant2 { x1: VarId, x2: VarId, g1: VarId, g2: VarId, z: f32, qlo: f32, qhi: f32, relu: bool },
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    Mask(Vec<bool>),
    ArgMax(Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    aux: Aux,
    trainable: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Tensor>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// VarId for the node at position `index` (creation order).
    pub fn id(&self, index: usize) -> VarId {
        assert!(index < self.nodes.len(), "node index out of range");
        VarId(index)
    }

    pub fn op(&self, id: VarId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn is_trainable(&self, id: VarId) -> bool {
        self.nodes[id.0].trainable
    }

    /// Gradient of the last `backward` target w.r.t. node `id`.
    /// Panics if `backward` has not run.
    pub fn grad(&self, id: VarId) -> &Tensor {
        assert!(!self.grads.is_empty(), "backward() has not been run");
        &self.grads[id.0]
    }

    fn push(&mut self, value: Tensor, op: Op, aux: Aux, trainable: bool) -> VarId {
        self.nodes.push(Node { value, op, aux, trainable });
        VarId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> VarId {
        self.push(value, Op::Leaf, Aux::None, trainable)
    }

    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.leaf(value, false)
    }

    // ── elementwise binary ops (equal shapes, or one scalar) ────────────────

    fn binary(
        &mut self,
        name: &'static str,
        a: VarId,
        b: VarId,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape == tb.shape {
            let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
            Ok(Tensor { shape: ta.shape.clone(), data })
        } else if tb.is_scalar() {
            let s = tb.data[0];
            Ok(Tensor { shape: ta.shape.clone(), data: ta.data.iter().map(|&x| f(x, s)).collect() })
        } else if ta.is_scalar() {
            let s = ta.data[0];
            Ok(Tensor { shape: tb.shape.clone(), data: tb.data.iter().map(|&y| f(s, y)).collect() })
        } else {
            Err(TensorError::OpShapeMismatch { op: name, lhs: ta.shape.clone(), rhs: tb.shape.clone() })
        }
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), Aux::None, false))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), Aux::None, false))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), Aux::None, false))
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let v = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b), Aux::None, false))
    }

    pub fn add_const(&mut self, a: VarId, c: f32) -> VarId {
        let t = &self.nodes[a.0].value;
        let v = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&x| x + c).collect() };
        self.push(v, Op::AddConst(a, c), Aux::None, false)
    }

    pub fn mul_const(&mut self, a: VarId, c: f32) -> VarId {
        let t = &self.nodes[a.0].value;
        let v = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&x| x * c).collect() };
        self.push(v, Op::MulConst(a, c), Aux::None, false)
    }

    // ── per-channel vector broadcast along an explicit axis ────────────────

    fn bcast_check(
        &self,
        name: &'static str,
        t: VarId,
        v: VarId,
        axis: usize,
    ) -> Result<(), TensorError> {
        let (tt, tv) = (&self.nodes[t.0].value, &self.nodes[v.0].value);
        let ok = tv.rank() == 1 && axis < tt.rank() && tv.numel() == tt.shape[axis];
        if ok {
            Ok(())
        } else {
            Err(TensorError::BadBroadcast {
                op: name,
                axis,
                shape: tt.shape.clone(),
                vec_len: tv.numel(),
            })
        }
    }

    fn bcast_map(&self, t: VarId, v: VarId, axis: usize, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (tt, tv) = (&self.nodes[t.0].value, &self.nodes[v.0].value);
        let (outer, ch, inner) = tt.split_at_axis(axis);
        let mut out = vec![0.0f32; tt.numel()];
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                let s = tv.data[c];
                for i in 0..inner {
                    out[base + i] = f(tt.data[base + i], s);
                }
            }
        }
        Tensor { shape: tt.shape.clone(), data: out }
    }

    pub fn add_bcast(&mut self, t: VarId, v: VarId, axis: usize) -> Result<VarId, TensorError> {
        self.bcast_check("add_bcast", t, v, axis)?;
        let out = self.bcast_map(t, v, axis, |x, s| x + s);
        Ok(self.push(out, Op::AddBcast { t, v, axis }, Aux::None, false))
    }

    pub fn mul_bcast(&mut self, t: VarId, v: VarId, axis: usize) -> Result<VarId, TensorError> {
        self.bcast_check("mul_bcast", t, v, axis)?;
        let out = self.bcast_map(t, v, axis, |x, s| x * s);
        Ok(self.push(out, Op::MulBcast { t, v, axis }, Aux::None, false))
    }

    pub fn div_bcast(&mut self, t: VarId, v: VarId, axis: usize) -> Result<VarId, TensorError> {
        self.bcast_check("div_bcast", t, v, axis)?;
        let out = self.bcast_map(t, v, axis, |x, s| x / s);
        Ok(self.push(out, Op::DivBcast { t, v, axis }, Aux::None, false))
    }

    // ── linear algebra ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId, transpose_b: bool) -> Result<VarId, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 {
            return Err(TensorError::BadRank { op: "matmul", expected: 2, shape: ta.shape.clone() });
        }
        if tb.rank() != 2 {
            return Err(TensorError::BadRank { op: "matmul", expected: 2, shape: tb.shape.clone() });
        }
        let (m, k) = (ta.shape[0], ta.shape[1]);
        let (bk, n) = if transpose_b { (tb.shape[1], tb.shape[0]) } else { (tb.shape[0], tb.shape[1]) };
        if k != bk {
            return Err(TensorError::OpShapeMismatch {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        // f64 accumulation: integer-coded operands stay exact through the MAC
        // as long as the final sum fits in the exact f32 integer range.
        let mut out = vec![0.0f64; m * n];
        if transpose_b {
            for i in 0..m {
                let arow = &ta.data[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &tb.data[j * k..(j + 1) * k];
                    let mut acc = 0.0f64;
                    for p in 0..k {
                        acc += arow[p] as f64 * brow[p] as f64;
                    }
                    out[i * n + j] = acc;
                }
            }
        } else {
            for i in 0..m {
                let arow = &ta.data[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = arow[p] as f64;
                    let brow = &tb.data[p * n..(p + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j] as f64;
                    }
                }
            }
        }
        let v = Tensor { shape: vec![m, n], data: out.iter().map(|&a| a as f32).collect() };
        Ok(self.push(v, Op::Matmul { a, b, transpose_b }, Aux::None, false))
    }

    pub fn outer_product(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 1 {
            return Err(TensorError::BadRank { op: "outer_product", expected: 1, shape: ta.shape.clone() });
        }
        if tb.rank() != 1 {
            return Err(TensorError::BadRank { op: "outer_product", expected: 1, shape: tb.shape.clone() });
        }
        let (m, n) = (ta.numel(), tb.numel());
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = ta.data[i] * tb.data[j];
            }
        }
        let v = Tensor { shape: vec![m, n], data: out };
        Ok(self.push(v, Op::OuterProduct(a, b), Aux::None, false))
    }

    // ── convolutions ────────────────────────────────────────────────────────

    pub fn conv2d(&mut self, x: VarId, w: VarId, stride: usize, pad: usize) -> Result<VarId, TensorError> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if tx.rank() != 4 {
            return Err(TensorError::BadRank { op: "conv2d", expected: 4, shape: tx.shape.clone() });
        }
        if tw.rank() != 4 {
            return Err(TensorError::BadRank { op: "conv2d", expected: 4, shape: tw.shape.clone() });
        }
        if !(stride == 1 || stride == 2) {
            return Err(TensorError::BadAttr { op: "conv2d", what: format!("stride {stride} not in {{1,2}}") });
        }
        if tx.shape[1] != tw.shape[1] {
            return Err(TensorError::OpShapeMismatch { op: "conv2d", lhs: tx.shape.clone(), rhs: tw.shape.clone() });
        }
        let v = conv2d_fwd(tx, tw, stride, pad)?;
        Ok(self.push(v, Op::Conv2d { x, w, stride, pad }, Aux::None, false))
    }

    pub fn depthwise_conv2d(&mut self, x: VarId, w: VarId, stride: usize, pad: usize) -> Result<VarId, TensorError> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if tx.rank() != 4 {
            return Err(TensorError::BadRank { op: "depthwise_conv2d", expected: 4, shape: tx.shape.clone() });
        }
        if tw.rank() != 3 {
            return Err(TensorError::BadRank { op: "depthwise_conv2d", expected: 3, shape: tw.shape.clone() });
        }
        if !(stride == 1 || stride == 2) {
            return Err(TensorError::BadAttr { op: "depthwise_conv2d", what: format!("stride {stride} not in {{1,2}}") });
        }
        if tx.shape[1] != tw.shape[0] {
            return Err(TensorError::OpShapeMismatch { op: "depthwise_conv2d", lhs: tx.shape.clone(), rhs: tw.shape.clone() });
        }
        let v = depthwise_fwd(tx, tw, stride, pad)?;
        Ok(self.push(v, Op::DepthwiseConv2d { x, w, stride, pad }, Aux::None, false))
    }

    // ── activations, pooling, shape ops ─────────────────────────────────────

    pub fn relu(&mut self, a: VarId) -> VarId {
        let t = &self.nodes[a.0].value;
        let v = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&x| x.max(0.0)).collect() };
        self.push(v, Op::Relu(a), Aux::None, false)
    }

    pub fn relu6(&mut self, a: VarId) -> VarId {
        let t = &self.nodes[a.0].value;
        let v = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&x| x.clamp(0.0, 6.0)).collect() };
        self.push(v, Op::Relu6(a), Aux::None, false)
    }

    pub fn maxpool(&mut self, x: VarId, kernel: usize, stride: usize) -> Result<VarId, TensorError> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 4 {
            return Err(TensorError::BadRank { op: "maxpool", expected: 4, shape: t.shape.clone() });
        }
        let (n, c, h, w) = (t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
        if kernel == 0 || stride == 0 || h < kernel || w < kernel {
            return Err(TensorError::BadAttr { op: "maxpool", what: format!("kernel {kernel} stride {stride} on {h}x{w}") });
        }
        let ho = (h - kernel) / stride + 1;
        let wo = (w - kernel) / stride + 1;
        let mut out = vec![0.0f32; n * c * ho * wo];
        let mut arg = vec![0usize; out.len()];
        for i in 0..n * c {
            let base = i * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut bi = 0usize;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            let v = t.data[idx];
                            // strict greater keeps the first maximum on ties
                            if v > best {
                                best = v;
                                bi = idx;
                            }
                        }
                    }
                    let o = (i * ho + oy) * wo + ox;
                    out[o] = best;
                    arg[o] = bi;
                }
            }
        }
        let v = Tensor { shape: vec![n, c, ho, wo], data: out };
        Ok(self.push(v, Op::MaxPool { x, kernel, stride }, Aux::ArgMax(arg), false))
    }

    pub fn avgpool_global(&mut self, x: VarId) -> Result<VarId, TensorError> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 4 {
            return Err(TensorError::BadRank { op: "avgpool_global", expected: 4, shape: t.shape.clone() });
        }
        let (n, c, h, w) = (t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
        let hw = (h * w) as f32;
        let mut out = vec![0.0f32; n * c];
        for i in 0..n * c {
            let mut acc = 0.0f32;
            for j in 0..h * w {
                acc += t.data[i * h * w + j];
            }
            out[i] = acc / hw;
        }
        let v = Tensor { shape: vec![n, c], data: out };
        Ok(self.push(v, Op::AvgPoolGlobal(x), Aux::None, false))
    }

    pub fn sum_spatial(&mut self, x: VarId) -> Result<VarId, TensorError> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 4 {
            return Err(TensorError::BadRank { op: "sum_spatial", expected: 4, shape: t.shape.clone() });
        }
        let (n, c, h, w) = (t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
        let mut out = vec![0.0f32; n * c];
        for i in 0..n * c {
            let mut acc = 0.0f32;
            for j in 0..h * w {
                acc += t.data[i * h * w + j];
            }
            out[i] = acc;
        }
        let v = Tensor { shape: vec![n, c], data: out };
        Ok(self.push(v, Op::SumSpatial(x), Aux::None, false))
    }

    pub fn concat(&mut self, inputs: &[VarId], axis: usize) -> Result<VarId, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::BadAttr { op: "concat", what: "no inputs".into() });
        }
        let first = &self.nodes[inputs[0].0].value;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::BadAttr { op: "concat", what: format!("axis {axis} for rank {rank}") });
        }
        let mut cat_dim = 0usize;
        for &id in inputs {
            let t = &self.nodes[id.0].value;
            if t.rank() != rank {
                return Err(TensorError::OpShapeMismatch { op: "concat", lhs: first.shape.clone(), rhs: t.shape.clone() });
            }
            for d in 0..rank {
                if d != axis && t.shape[d] != first.shape[d] {
                    return Err(TensorError::OpShapeMismatch { op: "concat", lhs: first.shape.clone(), rhs: t.shape.clone() });
                }
            }
            cat_dim += t.shape[axis];
        }
        let mut shape = first.shape.clone();
        shape[axis] = cat_dim;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0f32; outer * cat_dim * inner];
        for o in 0..outer {
            let mut off = 0usize;
            for &id in inputs {
                let t = &self.nodes[id.0].value;
                let ci = t.shape[axis];
                let src = &t.data[o * ci * inner..(o + 1) * ci * inner];
                let dst = &mut out[(o * cat_dim + off) * inner..(o * cat_dim + off + ci) * inner];
                dst.copy_from_slice(src);
                off += ci;
            }
        }
        let v = Tensor { shape, data: out };
        Ok(self.push(v, Op::Concat { inputs: inputs.to_vec(), axis }, Aux::None, false))
    }

    // ── reductions and row ops ──────────────────────────────────────────────

    pub fn reduce_sum(&mut self, a: VarId) -> VarId {
        let t = &self.nodes[a.0].value;
        let s: f32 = t.data.iter().sum();
        self.push(Tensor::scalar(s), Op::ReduceSum(a), Aux::None, false)
    }

    pub fn l2_norm(&mut self, a: VarId) -> VarId {
        let t = &self.nodes[a.0].value;
        let s: f32 = t.data.iter().map(|&x| x * x).sum::<f32>().sqrt();
        self.push(Tensor::scalar(s), Op::L2Norm(a), Aux::None, false)
    }

    pub fn log_softmax(&mut self, a: VarId) -> Result<VarId, TensorError> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 2 {
            return Err(TensorError::BadRank { op: "log_softmax", expected: 2, shape: t.shape.clone() });
        }
        let (n, k) = (t.shape[0], t.shape[1]);
        let mut out = vec![0.0f32; n * k];
        for i in 0..n {
            let row = &t.data[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f32>().ln();
            for j in 0..k {
                out[i * k + j] = row[j] - lse;
            }
        }
        let v = Tensor { shape: vec![n, k], data: out };
        Ok(self.push(v, Op::LogSoftmax(a), Aux::None, false))
    }

    pub fn reciprocal(&mut self, a: VarId) -> VarId {
        let t = &self.nodes[a.0].value;
        let v = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&x| 1.0 / x).collect() };
        self.push(v, Op::Reciprocal(a), Aux::None, false)
    }

    // ── lossy ops ───────────────────────────────────────────────────────────

    /// `clip(round(x), qmin, qmax)` with half-away-from-zero rounding.
    /// Backward is straight-through inside the clip range, zero outside;
    /// exact boundary hits count as in-range.
    pub fn round_ste_clip(&mut self, x: VarId, qmin: f32, qmax: f32) -> Result<VarId, TensorError> {
        if !(qmin < qmax) || qmin.fract() != 0.0 || qmax.fract() != 0.0 {
            return Err(TensorError::BadQuantBounds { qmin, qmax });
        }
        let t = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(t.numel());
        let mut mask = Vec::with_capacity(t.numel());
        for &v in &t.data {
            let r = round_half_away(v as f64) as f32;
            mask.push(r >= qmin && r <= qmax);
            out.push(r.clamp(qmin, qmax));
        }
        let v = Tensor { shape: t.shape.clone(), data: out };
        Ok(self.push(v, Op::RoundSteClip { x, qmin, qmax }, Aux::Mask(mask), false))
    }

    /// Recode an accumulator-domain tensor to output codes:
    /// `clip(round(f64(f[c]) * f64(x)) + z, qlo, qhi)`, optional relu on `x`
    /// before the multiply. `f` is a scalar or a per-channel vector on axis 1.
    /// The multiply happens in f64; this is the conformance boundary shared
    /// with the integer pipeline.
    pub fn requant(
        &mut self,
        x: VarId,
        f: VarId,
        z: f32,
        qlo: f32,
        qhi: f32,
        relu: bool,
    ) -> Result<VarId, TensorError> {
        if !(qlo < qhi) || qlo.fract() != 0.0 || qhi.fract() != 0.0 || z.fract() != 0.0 {
            return Err(TensorError::BadQuantBounds { qmin: qlo, qmax: qhi });
        }
        let (tx, tf) = (&self.nodes[x.0].value, &self.nodes[f.0].value);
        if tx.rank() < 2 {
            return Err(TensorError::BadRank { op: "requant", expected: 2, shape: tx.shape.clone() });
        }
        let ch = tx.shape[1];
        if !(tf.is_scalar() || (tf.rank() == 1 && tf.numel() == ch)) {
            return Err(TensorError::BadBroadcast { op: "requant", axis: 1, shape: tx.shape.clone(), vec_len: tf.numel() });
        }
        let (outer, _, inner) = tx.split_at_axis(1);
        let mut out = vec![0.0f32; tx.numel()];
        let mut mask = vec![false; tx.numel()];
        for o in 0..outer {
            for c in 0..ch {
                let fv = if tf.is_scalar() { tf.data[0] } else { tf.data[c] } as f64;
                let base = (o * ch + c) * inner;
                for i in 0..inner {
                    let xv = tx.data[base + i];
                    let xe = if relu { xv.max(0.0) } else { xv };
                    let r = round_half_away(fv * xe as f64) as f32;
                    let code = r + z;
                    mask[base + i] = code >= qlo && code <= qhi && (!relu || xv > 0.0);
                    out[base + i] = code.clamp(qlo, qhi);
                }
            }
        }
        let v = Tensor { shape: tx.shape.clone(), data: out };
        Ok(self.push(v, Op::Requant { x, f, z, qlo, qhi, relu }, Aux::Mask(mask), false))
    }

    /// Two-input recode used by elementwise-add layers:
    /// `clip(round(g1[c]*x1 + g2[c]*x2) + z, qlo, qhi)` with the weighted sum
    /// in f64, optional relu on the sum before rounding.
    #[allow(clippy::too_many_arguments)]
    pub fn requant2(
        &mut self,
        x1: VarId,
        x2: VarId,
        g1: VarId,
        g2: VarId,
        z: f32,
        qlo: f32,
        qhi: f32,
        relu: bool,
    ) -> Result<VarId, TensorError> {
        if !(qlo < qhi) || qlo.fract() != 0.0 || qhi.fract() != 0.0 || z.fract() != 0.0 {
            return Err(TensorError::BadQuantBounds { qmin: qlo, qmax: qhi });
        }
        let (t1, t2) = (&self.nodes[x1.0].value, &self.nodes[x2.0].value);
        if t1.shape != t2.shape {
            return Err(TensorError::OpShapeMismatch { op: "requant2", lhs: t1.shape.clone(), rhs: t2.shape.clone() });
        }
        if t1.rank() < 2 {
            return Err(TensorError::BadRank { op: "requant2", expected: 2, shape: t1.shape.clone() });
        }
        let ch = t1.shape[1];
        for gid in [g1, g2] {
            let tg = &self.nodes[gid.0].value;
            if !(tg.is_scalar() || (tg.rank() == 1 && tg.numel() == ch)) {
                return Err(TensorError::BadBroadcast { op: "requant2", axis: 1, shape: t1.shape.clone(), vec_len: tg.numel() });
            }
        }
        let (outer, _, inner) = t1.split_at_axis(1);
        let (tg1, tg2) = (&self.nodes[g1.0].value, &self.nodes[g2.0].value);
        let mut out = vec![0.0f32; t1.numel()];
        let mut mask = vec![false; t1.numel()];
        for o in 0..outer {
            for c in 0..ch {
                let f1 = if tg1.is_scalar() { tg1.data[0] } else { tg1.data[c] } as f64;
                let f2 = if tg2.is_scalar() { tg2.data[0] } else { tg2.data[c] } as f64;
                let base = (o * ch + c) * inner;
                for i in 0..inner {
                    let v = f1 * t1.data[base + i] as f64 + f2 * t2.data[base + i] as f64;
                    let ve = if relu { v.max(0.0) } else { v };
                    let code = round_half_away(ve) as f32 + z;
                    mask[base + i] = code >= qlo && code <= qhi && (!relu || v > 0.0);
                    out[base + i] = code.clamp(qlo, qhi);
                }
            }
        }
        let v = Tensor { shape: t1.shape.clone(), data: out };
        Ok(self.push(v, Op::Requant2 { x1, x2, g1, g2, z, qlo, qhi, relu }, Aux::Mask(mask), false))
    }

    // ── backward ────────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of every node at or below
    /// `loss` become available through `grad`. Running twice on the same tape
    /// produces bit-identical gradients.
    pub fn backward(&mut self, loss: VarId) -> Result<(), TensorError> {
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss { shape: lt.shape.clone() });
        }
        let mut grads: Vec<Tensor> = self.nodes.iter().map(|n| Tensor::zeros(&n.value.shape)).collect();
        grads[loss.0].data[0] = 1.0;

        for id in (0..=loss.0).rev() {
            if grads[id].data.iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::replace(&mut grads[id], Tensor::zeros(&[0]));
            self.accumulate_parents(id, &g, &mut grads);
            grads[id] = g;
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate_parents(&self, id: usize, g: &Tensor, grads: &mut [Tensor]) {
        // adds `g` (possibly scalar-expanded) into grads[p]
        fn add_into(grads: &mut [Tensor], p: VarId, src: &[f32]) {
            let dst = &mut grads[p.index()].data;
            if dst.len() == src.len() {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            } else if dst.len() == 1 {
                // f64 fold: scalar leaves gather huge cancelling sums
                let s: f64 = src.iter().map(|&x| x as f64).sum();
                dst[0] = (dst[0] as f64 + s) as f32;
            } else {
                unreachable!("gradient shape mismatch");
            }
        }

        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(grads, *a, &g.data);
                add_into(grads, *b, &g.data);
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, &g.data);
                let neg: Vec<f32> = g.data.iter().map(|&x| -x).collect();
                add_into(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[a.index()].value, &self.nodes[b.index()].value);
                let da = broadcast_combine(&g.data, tb, ta.numel(), |gv, bv| gv * bv);
                let db = broadcast_combine(&g.data, ta, tb.numel(), |gv, av| gv * av);
                add_into(grads, *a, &da);
                add_into(grads, *b, &db);
            }
            Op::Div(a, b) => {
                let (ta, tb) = (&self.nodes[a.index()].value, &self.nodes[b.index()].value);
                let da = broadcast_combine(&g.data, tb, ta.numel(), |gv, bv| gv / bv);
                // d/db (a/b) = -a/b^2
                let n = g.data.len();
                let mut db = vec![0.0f32; n];
                for i in 0..n {
                    let av = ta.data[if ta.numel() == 1 { 0 } else { i }];
                    let bv = tb.data[if tb.numel() == 1 { 0 } else { i }];
                    db[i] = -g.data[i] * av / (bv * bv);
                }
                add_into(grads, *a, &da);
                add_into(grads, *b, &db);
            }
            Op::AddConst(a, _) => add_into(grads, *a, &g.data),
            Op::MulConst(a, c) => {
                let da: Vec<f32> = g.data.iter().map(|&x| x * c).collect();
                add_into(grads, *a, &da);
            }
            Op::AddBcast { t, v, axis } => {
                add_into(grads, *t, &g.data);
                let dv = reduce_to_axis(g, &self.nodes[t.index()].value, *axis, |gv, _| gv);
                add_into(grads, *v, &dv);
            }
            Op::MulBcast { t, v, axis } => {
                let tt = &self.nodes[t.index()].value;
                let tv = &self.nodes[v.index()].value;
                let dt = bcast_backward_tensor(g, tv, tt, *axis, |gv, sv| gv * sv);
                add_into(grads, *t, &dt);
                let dv = reduce_to_axis(g, tt, *axis, |gv, xv| gv * xv);
                add_into(grads, *v, &dv);
            }
            Op::DivBcast { t, v, axis } => {
                let tt = &self.nodes[t.index()].value;
                let tv = &self.nodes[v.index()].value;
                let dt = bcast_backward_tensor(g, tv, tt, *axis, |gv, sv| gv / sv);
                add_into(grads, *t, &dt);
                // d/dv (x / v) = -x / v^2, reduced over non-axis dims
                let (outer, ch, inner) = tt.split_at_axis(*axis);
                let mut dv = vec![0.0f64; ch];
                for o in 0..outer {
                    for c in 0..ch {
                        let s = tv.data[c] as f64;
                        let base = (o * ch + c) * inner;
                        let mut acc = 0.0f64;
                        for i in 0..inner {
                            acc += g.data[base + i] as f64 * tt.data[base + i] as f64;
                        }
                        dv[c] += -acc / (s * s);
                    }
                }
                let dv: Vec<f32> = dv.iter().map(|&x| x as f32).collect();
                add_into(grads, *v, &dv);
            }
            Op::Matmul { a, b, transpose_b } => {
                let (ta, tb) = (&self.nodes[a.index()].value, &self.nodes[b.index()].value);
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = if *transpose_b { tb.shape[0] } else { tb.shape[1] };
                let mut da = vec![0.0f64; m * k];
                let mut db = vec![0.0f64; tb.numel()];
                if *transpose_b {
                    // y = a b^T : da = g b ; db = g^T a
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g.data[i * n + j] as f64;
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gv * tb.data[j * k + p] as f64;
                                db[j * k + p] += gv * ta.data[i * k + p] as f64;
                            }
                        }
                    }
                } else {
                    // y = a b : da = g b^T ; db = a^T g
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g.data[i * n + j] as f64;
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gv * tb.data[p * n + j] as f64;
                                db[p * n + j] += gv * ta.data[i * k + p] as f64;
                            }
                        }
                    }
                }
                let da: Vec<f32> = da.iter().map(|&x| x as f32).collect();
                let db: Vec<f32> = db.iter().map(|&x| x as f32).collect();
                add_into(grads, *a, &da);
                add_into(grads, *b, &db);
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (tx, tw) = (&self.nodes[x.index()].value, &self.nodes[w.index()].value);
                let (dx, dw) = conv2d_bwd(tx, tw, g, *stride, *pad);
                add_into(grads, *x, &dx);
                add_into(grads, *w, &dw);
            }
            Op::DepthwiseConv2d { x, w, stride, pad } => {
                let (tx, tw) = (&self.nodes[x.index()].value, &self.nodes[w.index()].value);
                let (dx, dw) = depthwise_bwd(tx, tw, g, *stride, *pad);
                add_into(grads, *x, &dx);
                add_into(grads, *w, &dw);
            }
            Op::Relu(a) => {
                let ta = &self.nodes[a.index()].value;
                let da: Vec<f32> = g.data.iter().zip(&ta.data).map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 }).collect();
                add_into(grads, *a, &da);
            }
            Op::Relu6(a) => {
                let ta = &self.nodes[a.index()].value;
                let da: Vec<f32> = g
                    .data
                    .iter()
                    .zip(&ta.data)
                    .map(|(&gv, &x)| if x > 0.0 && x < 6.0 { gv } else { 0.0 })
                    .collect();
                add_into(grads, *a, &da);
            }
            Op::MaxPool { x, .. } => {
                let Aux::ArgMax(arg) = &node.aux else { unreachable!() };
                let mut dx = vec![0.0f32; self.nodes[x.index()].value.numel()];
                for (o, &src) in arg.iter().enumerate() {
                    dx[src] += g.data[o];
                }
                add_into(grads, *x, &dx);
            }
            Op::AvgPoolGlobal(a) => {
                let ta = &self.nodes[a.index()].value;
                let (h, w) = (ta.shape[2], ta.shape[3]);
                let hw = (h * w) as f32;
                let mut dx = vec![0.0f32; ta.numel()];
                for i in 0..g.data.len() {
                    let gv = g.data[i] / hw;
                    for j in 0..h * w {
                        dx[i * h * w + j] = gv;
                    }
                }
                add_into(grads, *a, &dx);
            }
            Op::SumSpatial(a) => {
                let ta = &self.nodes[a.index()].value;
                let (h, w) = (ta.shape[2], ta.shape[3]);
                let mut dx = vec![0.0f32; ta.numel()];
                for i in 0..g.data.len() {
                    for j in 0..h * w {
                        dx[i * h * w + j] = g.data[i];
                    }
                }
                add_into(grads, *a, &dx);
            }
            Op::Concat { inputs, axis } => {
                let shape = &node.value.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let cat_dim = shape[*axis];
                let mut off = 0usize;
                for &id in inputs {
                    let ci = self.nodes[id.index()].value.shape[*axis];
                    let mut d = vec![0.0f32; outer * ci * inner];
                    for o in 0..outer {
                        let src = &g.data[(o * cat_dim + off) * inner..(o * cat_dim + off + ci) * inner];
                        d[o * ci * inner..(o + 1) * ci * inner].copy_from_slice(src);
                    }
                    add_into(grads, id, &d);
                    off += ci;
                }
            }
            Op::ReduceSum(a) => {
                let n = self.nodes[a.index()].value.numel();
                let da = vec![g.data[0]; n];
                add_into(grads, *a, &da);
            }
            Op::L2Norm(a) => {
                let ta = &self.nodes[a.index()].value;
                let norm = node.value.data[0];
                let da: Vec<f32> = if norm > 0.0 {
                    ta.data.iter().map(|&x| g.data[0] * x / norm).collect()
                } else {
                    vec![0.0; ta.numel()]
                };
                add_into(grads, *a, &da);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let (n, k) = (y.shape[0], y.shape[1]);
                let mut da = vec![0.0f32; n * k];
                for i in 0..n {
                    let gsum: f32 = g.data[i * k..(i + 1) * k].iter().sum();
                    for j in 0..k {
                        let idx = i * k + j;
                        da[idx] = g.data[idx] - y.data[idx].exp() * gsum;
                    }
                }
                add_into(grads, *a, &da);
            }
            Op::Reciprocal(a) => {
                let y = &node.value;
                let da: Vec<f32> = g.data.iter().zip(&y.data).map(|(&gv, &yv)| -gv * yv * yv).collect();
                add_into(grads, *a, &da);
            }
            Op::OuterProduct(a, b) => {
                let (ta, tb) = (&self.nodes[a.index()].value, &self.nodes[b.index()].value);
                let (m, n) = (ta.numel(), tb.numel());
                let mut da = vec![0.0f32; m];
                let mut db = vec![0.0f32; n];
                for i in 0..m {
                    for j in 0..n {
                        let gv = g.data[i * n + j];
                        da[i] += gv * tb.data[j];
                        db[j] += gv * ta.data[i];
                    }
                }
                add_into(grads, *a, &da);
                add_into(grads, *b, &db);
            }
            Op::RoundSteClip { x, .. } => {
                let Aux::Mask(mask) = &node.aux else { unreachable!() };
                let da: Vec<f32> = g.data.iter().zip(mask).map(|(&gv, &m)| if m { gv } else { 0.0 }).collect();
                add_into(grads, *x, &da);
            }
            Op::Requant { x, f, relu, .. } => {
                let Aux::Mask(mask) = &node.aux else { unreachable!() };
                let tx = &self.nodes[x.index()].value;
                let tf = &self.nodes[f.index()].value;
                let ch = tx.shape[1];
                let (outer, _, inner) = tx.split_at_axis(1);
                let mut dx = vec![0.0f32; tx.numel()];
                let mut df = vec![0.0f64; tf.numel()];
                for o in 0..outer {
                    for c in 0..ch {
                        let fi = if tf.is_scalar() { 0 } else { c };
                        let fv = tf.data[fi];
                        let base = (o * ch + c) * inner;
                        for i in 0..inner {
                            let idx = base + i;
                            if !mask[idx] {
                                continue;
                            }
                            let gv = g.data[idx];
                            let xv = tx.data[idx];
                            let xe = if *relu { xv.max(0.0) } else { xv };
                            dx[idx] = gv * fv;
                            df[fi] += gv as f64 * xe as f64;
                        }
                    }
                }
                let df: Vec<f32> = df.iter().map(|&x| x as f32).collect();
                add_into(grads, *x, &dx);
                add_into(grads, *f, &df);
            }
            Op::Requant2 { x1, x2, g1, g2, .. } => {
                let Aux::Mask(mask) = &node.aux else { unreachable!() };
                let t1 = &self.nodes[x1.index()].value;
                let t2 = &self.nodes[x2.index()].value;
                let (tg1, tg2) = (&self.nodes[g1.index()].value, &self.nodes[g2.index()].value);
                let ch = t1.shape[1];
                let (outer, _, inner) = t1.split_at_axis(1);
                let mut dx1 = vec![0.0f32; t1.numel()];
                let mut dx2 = vec![0.0f32; t2.numel()];
                let mut dg1 = vec![0.0f64; tg1.numel()];
                let mut dg2 = vec![0.0f64; tg2.numel()];
                for o in 0..outer {
                    for c in 0..ch {
                        let i1 = if tg1.is_scalar() { 0 } else { c };
                        let i2 = if tg2.is_scalar() { 0 } else { c };
                        let (f1, f2) = (tg1.data[i1], tg2.data[i2]);
                        let base = (o * ch + c) * inner;
                        for i in 0..inner {
                            let idx = base + i;
                            if !mask[idx] {
                                continue;
                            }
                            let gv = g.data[idx];
                            dx1[idx] = gv * f1;
                            dx2[idx] = gv * f2;
                            dg1[i1] += gv as f64 * t1.data[idx] as f64;
                            dg2[i2] += gv as f64 * t2.data[idx] as f64;
                        }
                    }
                }
                let dg1: Vec<f32> = dg1.iter().map(|&x| x as f32).collect();
                let dg2: Vec<f32> = dg2.iter().map(|&x| x as f32).collect();
                add_into(grads, *x1, &dx1);
                add_into(grads, *x2, &dx2);
                add_into(grads, *g1, &dg1);
                add_into(grads, *g2, &dg2);
            }
        }
    }
}

/// Combine upstream grad with the other operand for Mul/Div, handling the
/// scalar-broadcast case; result sized for the target operand.
fn broadcast_combine(g: &[f32], other: &Tensor, target_len: usize, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    let n = g.len();
    let mut out = vec![0.0f32; n.max(target_len).min(n)];
    for i in 0..n {
        let ov = other.data[if other.numel() == 1 { 0 } else { i }];
        out[i] = f(g[i], ov);
    }
    out
}

/// Backward of a bcast op into the big tensor side.
fn bcast_backward_tensor(
    g: &Tensor,
    v: &Tensor,
    t: &Tensor,
    axis: usize,
    f: impl Fn(f32, f32) -> f32,
) -> Vec<f32> {
    let (outer, ch, inner) = t.split_at_axis(axis);
    let mut out = vec![0.0f32; t.numel()];
    for o in 0..outer {
        for c in 0..ch {
            let s = v.data[c];
            let base = (o * ch + c) * inner;
            for i in 0..inner {
                out[base + i] = f(g.data[base + i], s);
            }
        }
    }
    out
}

/// Reduce `g` (combined elementwise with `t`) over all axes except `axis`.
/// f64 accumulation: these sums cancel heavily for scale-like parameters.
fn reduce_to_axis(g: &Tensor, t: &Tensor, axis: usize, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    let (outer, ch, inner) = t.split_at_axis(axis);
    let mut out = vec![0.0f64; ch];
    for o in 0..outer {
        for c in 0..ch {
            let base = (o * ch + c) * inner;
            let mut acc = 0.0f64;
            for i in 0..inner {
                acc += f(g.data[base + i], t.data[base + i]) as f64;
            }
            out[c] += acc;
        }
    }
    out.iter().map(|&x| x as f32).collect()
}

// ── convolution kernels ─────────────────────────────────────────────────────

fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize, TensorError> {
    if input + 2 * pad < kernel {
        return Err(TensorError::BadAttr {
            op: "conv2d",
            what: format!("kernel {kernel} larger than padded input {}", input + 2 * pad),
        });
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

/// Valid output-column range so that `ox*stride + kx - pad` stays in `[0, w)`.
#[inline]
fn ox_range(wo: usize, w: usize, stride: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = if kx < pad { (pad - kx).div_ceil(stride) } else { 0 };
    let hi_num = w + pad;
    let hi = if hi_num > kx { ((hi_num - 1 - kx) / stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

fn conv2d_fwd(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor, TensorError> {
    let (nb, cin, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (co, _, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    let ho = conv_out_dim(h, kh, stride, pad)?;
    let wo = conv_out_dim(wd, kw, stride, pad)?;
    // f64 accumulation: integer-coded operands stay exact through the MAC.
    let mut out = vec![0.0f64; nb * co * ho * wo];
    for n in 0..nb {
        for oc in 0..co {
            for oy in 0..ho {
                let orow = &mut out[((n * co + oc) * ho + oy) * wo..((n * co + oc) * ho + oy + 1) * wo];
                for ic in 0..cin {
                    for ky in 0..kh {
                        let iy = oy * stride + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let iy = iy - pad;
                        let xrow = &x.data[((n * cin + ic) * h + iy) * wd..((n * cin + ic) * h + iy + 1) * wd];
                        let wbase = ((oc * cin + ic) * kh + ky) * kw;
                        for kx in 0..kw {
                            let wv = w.data[wbase + kx] as f64;
                            let (lo, hi) = ox_range(wo, wd, stride, kx, pad);
                            for ox in lo..hi {
                                orow[ox] += wv * xrow[ox * stride + kx - pad] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    let data = out.iter().map(|&a| a as f32).collect();
    Ok(Tensor { shape: vec![nb, co, ho, wo], data })
}

fn conv2d_bwd(x: &Tensor, w: &Tensor, g: &Tensor, stride: usize, pad: usize) -> (Vec<f32>, Vec<f32>) {
    let (nb, cin, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (co, _, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    let (ho, wo) = (g.shape[2], g.shape[3]);
    // f64 accumulation, same rationale as the forward MAC.
    let mut dx = vec![0.0f64; x.numel()];
    let mut dw = vec![0.0f64; w.numel()];
    for n in 0..nb {
        for oc in 0..co {
            for oy in 0..ho {
                let grow = &g.data[((n * co + oc) * ho + oy) * wo..((n * co + oc) * ho + oy + 1) * wo];
                for ic in 0..cin {
                    for ky in 0..kh {
                        let iy = oy * stride + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let iy = iy - pad;
                        let xoff = ((n * cin + ic) * h + iy) * wd;
                        let wbase = ((oc * cin + ic) * kh + ky) * kw;
                        for kx in 0..kw {
                            let wv = w.data[wbase + kx] as f64;
                            let mut wacc = 0.0f64;
                            let (lo, hi) = ox_range(wo, wd, stride, kx, pad);
                            for ox in lo..hi {
                                let gv = grow[ox] as f64;
                                let xi = xoff + ox * stride + kx - pad;
                                wacc += gv * x.data[xi] as f64;
                                dx[xi] += gv * wv;
                            }
                            dw[wbase + kx] += wacc;
                        }
                    }
                }
            }
        }
    }
    (dx.iter().map(|&a| a as f32).collect(), dw.iter().map(|&a| a as f32).collect())
}

fn depthwise_fwd(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor, TensorError> {
    let (nb, ch, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (kh, kw) = (w.shape[1], w.shape[2]);
    let ho = conv_out_dim(h, kh, stride, pad)?;
    let wo = conv_out_dim(wd, kw, stride, pad)?;
    // f64 accumulation, same rationale as conv2d_fwd.
    let mut out = vec![0.0f64; nb * ch * ho * wo];
    for n in 0..nb {
        for c in 0..ch {
            for oy in 0..ho {
                let orow = &mut out[((n * ch + c) * ho + oy) * wo..((n * ch + c) * ho + oy + 1) * wo];
                for ky in 0..kh {
                    let iy = oy * stride + ky;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    let xrow = &x.data[((n * ch + c) * h + iy) * wd..((n * ch + c) * h + iy + 1) * wd];
                    for kx in 0..kw {
                        let wv = w.data[(c * kh + ky) * kw + kx] as f64;
                        let (lo, hi) = ox_range(wo, wd, stride, kx, pad);
                        for ox in lo..hi {
                            orow[ox] += wv * xrow[ox * stride + kx - pad] as f64;
                        }
                    }
                }
            }
        }
    }
    let data = out.iter().map(|&a| a as f32).collect();
    Ok(Tensor { shape: vec![nb, ch, ho, wo], data })
}

fn depthwise_bwd(x: &Tensor, w: &Tensor, g: &Tensor, stride: usize, pad: usize) -> (Vec<f32>, Vec<f32>) {
    let (nb, ch, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (kh, kw) = (w.shape[1], w.shape[2]);
    let (ho, wo) = (g.shape[2], g.shape[3]);
    // f64 accumulation, same rationale as the forward MAC.
    let mut dx = vec![0.0f64; x.numel()];
    let mut dw = vec![0.0f64; w.numel()];
    for n in 0..nb {
        for c in 0..ch {
            for oy in 0..ho {
                let grow = &g.data[((n * ch + c) * ho + oy) * wo..((n * ch + c) * ho + oy + 1) * wo];
                for ky in 0..kh {
                    let iy = oy * stride + ky;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    let xoff = ((n * ch + c) * h + iy) * wd;
                    for kx in 0..kw {
                        let wv = w.data[(c * kh + ky) * kw + kx] as f64;
                        let mut wacc = 0.0f64;
                        let (lo, hi) = ox_range(wo, wd, stride, kx, pad);
                        for ox in lo..hi {
                            let gv = grow[ox] as f64;
                            let xi = xoff + ox * stride + kx - pad;
                            wacc += gv * x.data[xi] as f64;
                            dx[xi] += gv * wv;
                        }
                        dw[(c * kh + ky) * kw + kx] += wacc;
                    }
                }
            }
        }
    }
    (dx.iter().map(|&a| a as f32).collect(), dw.iter().map(|&a| a as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_mul_scalar_broadcast() {
        let mut tp = Tape::new();
        let a = tp.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let s = tp.leaf(Tensor::scalar(2.0), true);
        let y = tp.mul(a, s).unwrap();
        assert_eq!(tp.value(y).data, vec![2.0, 4.0, 6.0]);
        let l = tp.reduce_sum(y);
        tp.backward(l).unwrap();
        assert_eq!(tp.grad(a).data, vec![2.0, 2.0, 2.0]);
        assert_eq!(tp.grad(s).data, vec![6.0]);
    }

    #[test]
    fn round_ste_clip_values_and_mask() {
        let mut tp = Tape::new();
        let x = tp.leaf(t(&[5], &[0.4, 0.5, -0.5, 9.3, -9.3]), true);
        let q = tp.round_ste_clip(x, -7.0, 7.0).unwrap();
        assert_eq!(tp.value(q).data, vec![0.0, 1.0, -1.0, 7.0, -7.0]);
        let l = tp.reduce_sum(q);
        tp.backward(l).unwrap();
        // clipped elements get zero gradient
        assert_eq!(tp.grad(x).data, vec![1.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn boundary_code_counts_as_in_range() {
        let mut tp = Tape::new();
        let x = tp.leaf(t(&[2], &[7.2, -7.2]), true);
        let q = tp.round_ste_clip(x, -7.0, 7.0).unwrap();
        assert_eq!(tp.value(q).data, vec![7.0, -7.0]);
        let l = tp.reduce_sum(q);
        tp.backward(l).unwrap();
        assert_eq!(tp.grad(x).data, vec![1.0, 1.0]);
    }

    #[test]
    fn matmul_both_orientations() {
        let mut tp = Tape::new();
        let a = tp.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), false);
        let b = tp.leaf(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]), false);
        let y = tp.matmul(a, b, false).unwrap();
        assert_eq!(tp.value(y).data, vec![4.0, 5.0, 10.0, 11.0]);
        let bt = tp.leaf(t(&[2, 3], &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]), false);
        let y2 = tp.matmul(a, bt, true).unwrap();
        assert_eq!(tp.value(y2).data, vec![4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn conv2d_known_answer() {
        // 1x1x3x3 input, single 2x2 kernel of ones, stride 1, no pad:
        // windows sum 4 neighbours.
        let mut tp = Tape::new();
        let x = tp.leaf(t(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]), false);
        let w = tp.leaf(t(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]), false);
        let y = tp.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tp.value(y).shape, vec![1, 1, 2, 2]);
        assert_eq!(tp.value(y).data, vec![12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn maxpool_first_tie_wins_and_backward_scatters() {
        let mut tp = Tape::new();
        let x = tp.leaf(t(&[1, 1, 2, 2], &[5.0, 5.0, 1.0, 0.0]), true);
        let y = tp.maxpool(x, 2, 2).unwrap();
        assert_eq!(tp.value(y).data, vec![5.0]);
        let l = tp.reduce_sum(y);
        tp.backward(l).unwrap();
        assert_eq!(tp.grad(x).data, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn requant_matches_manual_recode() {
        let mut tp = Tape::new();
        let acc = tp.leaf(t(&[1, 2, 1, 1], &[100.0, -3.0]), true);
        let f = tp.leaf(t(&[2], &[0.05, 0.05]), true);
        let y = tp.requant(acc, f, 3.0, 0.0, 255.0, false).unwrap();
        // 100*0.05 = 5 -> round 5 -> +3 = 8 ; -3*0.05 = -0.15 -> round 0 -> 3
        assert_eq!(tp.value(y).data, vec![8.0, 3.0]);
        let l = tp.reduce_sum(y);
        tp.backward(l).unwrap();
        assert_eq!(tp.grad(acc).data, vec![0.05, 0.05]);
        assert_eq!(tp.grad(f).data, vec![100.0, -3.0]);
    }

    #[test]
    fn backward_twice_is_bit_identical() {
        let mut tp = Tape::new();
        let x = tp.leaf(t(&[4], &[0.3, -1.2, 2.7, 0.9]), true);
        let s = tp.leaf(Tensor::scalar(0.37), true);
        let d = tp.div(x, s).unwrap();
        let q = tp.round_ste_clip(d, -7.0, 7.0).unwrap();
        let back = tp.mul(q, s).unwrap();
        let e = tp.sub(back, x).unwrap();
        let e2 = tp.mul(e, e).unwrap();
        let l = tp.reduce_sum(e2);
        tp.backward(l).unwrap();
        let g1 = tp.grad(s).data.clone();
        tp.backward(l).unwrap();
        assert_eq!(g1, tp.grad(s).data);
    }
}
