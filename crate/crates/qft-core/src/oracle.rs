//! Reference gradient oracle, compiled only with the `testing` feature.
//!
//! This is a second, independent evaluator for tape graphs. It reads only the
//! structural description (`Tape::op`) and re-implements every kernel in f64.
//! At construction it runs the base forward and freezes every discrete
//! decision: round residues, clip sides, relu sides, argmax winners. The
//! frozen graph is then piecewise multilinear in the leaves, so a central
//! finite difference of it equals the straight-through gradient that
//! `Tape::backward` is defined to produce. Never share kernels between this
//! module and `tape`; the point is that they disagree if either has a bug.

use crate::tape::{Op, Tape, VarId};

/// Per-node frozen state for lossy ops.
struct Frozen {
    /// element passes gradient (not clipped / not relu-blocked)
    pass: Vec<bool>,
    /// base output, used verbatim for blocked elements
    base_out: Vec<f64>,
    /// base_out - linear_part(base inputs), added for passing elements
    offset: Vec<f64>,
}

enum Aux {
    None,
    Frozen(Frozen),
    ArgMax(Vec<usize>),
}

pub struct Surrogate {
    ops: Vec<Op>,
    shapes: Vec<Vec<usize>>,
    base: Vec<Vec<f64>>,
    aux: Vec<Aux>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Surrogate {
    /// Run the f64 base forward over the tape structure and freeze all
    /// discrete decisions at the current leaf values.
    pub fn freeze(tape: &Tape) -> Surrogate {
        let n = tape.len();
        let mut ops = Vec::with_capacity(n);
        let mut shapes = Vec::with_capacity(n);
        for i in 0..n {
            let id = tape.id(i);
            ops.push(tape.op(id).clone());
            shapes.push(tape.value(id).shape.clone());
        }
        let mut s = Surrogate { ops, shapes, base: Vec::with_capacity(n), aux: Vec::with_capacity(n) };
        for i in 0..n {
            let (value, aux) = s.eval_node(i, &s.base, true, Some(tape));
            s.base.push(value);
            s.aux.push(aux);
        }
        s
    }

    /// Loss value at node `target` with leaf `leaf` perturbed by `delta` at
    /// flat index `coord`. All other leaves stay at their base values.
    pub fn eval_perturbed(&self, target: usize, leaf: usize, coord: usize, delta: f64) -> f64 {
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(target + 1);
        for i in 0..=target {
            let v = if matches!(self.ops[i], Op::Leaf) {
                let mut v = self.base[i].clone();
                if i == leaf {
                    v[coord] += delta;
                }
                v
            } else {
                self.eval_node(i, &values, false, None).0
            };
            values.push(v);
        }
        assert_eq!(values[target].len(), 1, "finite-difference target must be scalar");
        values[target][0]
    }

    /// Central finite difference of scalar node `target` w.r.t. coordinate
    /// `coord` of leaf node `leaf`.
    pub fn fd(&self, target: usize, leaf: usize, coord: usize, h: f64) -> f64 {
        let p = self.eval_perturbed(target, leaf, coord, h);
        let m = self.eval_perturbed(target, leaf, coord, -h);
        (p - m) / (2.0 * h)
    }

    /// One forward step for node `i` given values of all earlier nodes.
    /// In freeze mode (`record` true) lossy ops compute their true output and
    /// record decisions; otherwise they apply the frozen transform.
    fn eval_node(&self, i: usize, values: &[Vec<f64>], record: bool, tape: Option<&Tape>) -> (Vec<f64>, Aux) {
        use Op::*;
        let val = |id: VarId| -> &Vec<f64> { &values[id.index()] };
        let shp = |id: VarId| -> &Vec<usize> { &self.shapes[id.index()] };
        match &self.ops[i] {
            Leaf => {
                let t = tape.expect("leaf values come from the tape in freeze mode");
                (t.value(t.id(i)).data.iter().map(|&x| x as f64).collect(), Aux::None)
            }
            Add(a, b) => (ew(val(*a), val(*b), |x, y| x + y), Aux::None),
            Sub(a, b) => (ew(val(*a), val(*b), |x, y| x - y), Aux::None),
            Mul(a, b) => (ew(val(*a), val(*b), |x, y| x * y), Aux::None),
            Div(a, b) => (ew(val(*a), val(*b), |x, y| x / y), Aux::None),
            AddConst(a, c) => (val(*a).iter().map(|&x| x + *c as f64).collect(), Aux::None),
            MulConst(a, c) => (val(*a).iter().map(|&x| x * *c as f64).collect(), Aux::None),
            AddBcast { t, v, axis } => (bcast(val(*t), shp(*t), val(*v), *axis, |x, s| x + s), Aux::None),
            MulBcast { t, v, axis } => (bcast(val(*t), shp(*t), val(*v), *axis, |x, s| x * s), Aux::None),
            DivBcast { t, v, axis } => (bcast(val(*t), shp(*t), val(*v), *axis, |x, s| x / s), Aux::None),
            Matmul { a, b, transpose_b } => {
                (matmul64(val(*a), shp(*a), val(*b), shp(*b), *transpose_b), Aux::None)
            }
            Conv2d { x, w, stride, pad } => {
                (conv64(val(*x), shp(*x), val(*w), shp(*w), *stride, *pad, false), Aux::None)
            }
            DepthwiseConv2d { x, w, stride, pad } => {
                (conv64(val(*x), shp(*x), val(*w), shp(*w), *stride, *pad, true), Aux::None)
            }
            Relu(a) => {
                if record {
                    let x = val(*a);
                    let pass: Vec<bool> = x.iter().map(|&v| v > 0.0).collect();
                    let out: Vec<f64> = x.iter().map(|&v| v.max(0.0)).collect();
                    let frozen = Frozen { pass, base_out: out.clone(), offset: vec![0.0; x.len()] };
                    (out, Aux::Frozen(frozen))
                } else {
                    (self.apply_frozen(i, val(*a)), Aux::None)
                }
            }
            Relu6(a) => {
                if record {
                    let x = val(*a);
                    let pass: Vec<bool> = x.iter().map(|&v| v > 0.0 && v < 6.0).collect();
                    let out: Vec<f64> = x.iter().map(|&v| v.clamp(0.0, 6.0)).collect();
                    let frozen = Frozen { pass, base_out: out.clone(), offset: vec![0.0; x.len()] };
                    (out, Aux::Frozen(frozen))
                } else {
                    (self.apply_frozen(i, val(*a)), Aux::None)
                }
            }
            MaxPool { x, kernel, stride } => {
                if record {
                    let (out, arg) = maxpool64(val(*x), shp(*x), *kernel, *stride);
                    (out, Aux::ArgMax(arg))
                } else {
                    let Aux::ArgMax(arg) = &self.aux[i] else { unreachable!() };
                    (arg.iter().map(|&j| val(*x)[j]).collect(), Aux::None)
                }
            }
            AvgPoolGlobal(a) => {
                let s = shp(*a);
                let hw = (s[2] * s[3]) as f64;
                let sums = pool_sum(val(*a), s);
                (sums.into_iter().map(|v| v / hw).collect(), Aux::None)
            }
            SumSpatial(a) => (pool_sum(val(*a), shp(*a)), Aux::None),
            Concat { inputs, axis } => {
                let parts: Vec<(&Vec<f64>, &Vec<usize>)> = inputs.iter().map(|&id| (val(id), shp(id))).collect();
                (concat64(&parts, *axis), Aux::None)
            }
            ReduceSum(a) => (vec![val(*a).iter().sum()], Aux::None),
            L2Norm(a) => (vec![val(*a).iter().map(|&x| x * x).sum::<f64>().sqrt()], Aux::None),
            LogSoftmax(a) => (log_softmax64(val(*a), shp(*a)), Aux::None),
            Reciprocal(a) => (val(*a).iter().map(|&x| 1.0 / x).collect(), Aux::None),
            OuterProduct(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let mut out = Vec::with_capacity(x.len() * y.len());
                for &xv in x {
                    for &yv in y {
                        out.push(xv * yv);
                    }
                }
                (out, Aux::None)
            }
            RoundSteClip { x, qmin, qmax } => {
                if record {
                    let xv = val(*x);
                    let (lo, hi) = (*qmin as f64, *qmax as f64);
                    let mut pass = Vec::with_capacity(xv.len());
                    let mut out = Vec::with_capacity(xv.len());
                    let mut offset = Vec::with_capacity(xv.len());
                    for &v in xv {
                        let r = round_away(v);
                        pass.push(r >= lo && r <= hi);
                        let o = r.clamp(lo, hi);
                        out.push(o);
                        offset.push(o - v);
                    }
                    (out.clone(), Aux::Frozen(Frozen { pass, base_out: out, offset }))
                } else {
                    (self.apply_frozen(i, val(*x)), Aux::None)
                }
            }
            Requant { x, f, z, qlo, qhi, relu } => {
                let xs = shp(*x);
                let (outer, ch, inner) = split_axis(xs, 1);
                let fv = val(*f);
                let lin = |xd: &[f64]| -> Vec<f64> {
                    let mut out = vec![0.0f64; xd.len()];
                    for o in 0..outer {
                        for c in 0..ch {
                            let fc = if fv.len() == 1 { fv[0] } else { fv[c] };
                            let base = (o * ch + c) * inner;
                            for k in 0..inner {
                                let xe = if *relu { xd[base + k].max(0.0) } else { xd[base + k] };
                                out[base + k] = fc * xe;
                            }
                        }
                    }
                    out
                };
                if record {
                    let xd = val(*x);
                    let prod = lin(xd);
                    let (lo, hi, zz) = (*qlo as f64, *qhi as f64, *z as f64);
                    let mut pass = Vec::with_capacity(xd.len());
                    let mut out = Vec::with_capacity(xd.len());
                    let mut offset = Vec::with_capacity(xd.len());
                    for (k, &p) in prod.iter().enumerate() {
                        let code = round_away(p) + zz;
                        let ok = code >= lo && code <= hi && (!*relu || xd[k] > 0.0);
                        let o = code.clamp(lo, hi);
                        pass.push(ok);
                        out.push(o);
                        offset.push(o - p);
                    }
                    (out.clone(), Aux::Frozen(Frozen { pass, base_out: out, offset }))
                } else {
                    (self.apply_frozen(i, &lin(val(*x))), Aux::None)
                }
            }
            Requant2 { x1, x2, g1, g2, z, qlo, qhi, relu } => {
                let xs = shp(*x1);
                let (outer, ch, inner) = split_axis(xs, 1);
                let (gv1, gv2) = (val(*g1), val(*g2));
                let lin = |a: &[f64], b: &[f64]| -> Vec<f64> {
                    let mut out = vec![0.0f64; a.len()];
                    for o in 0..outer {
                        for c in 0..ch {
                            let f1 = if gv1.len() == 1 { gv1[0] } else { gv1[c] };
                            let f2 = if gv2.len() == 1 { gv2[0] } else { gv2[c] };
                            let base = (o * ch + c) * inner;
                            for k in 0..inner {
                                out[base + k] = f1 * a[base + k] + f2 * b[base + k];
                            }
                        }
                    }
                    out
                };
                if record {
                    let sum = lin(val(*x1), val(*x2));
                    let (lo, hi, zz) = (*qlo as f64, *qhi as f64, *z as f64);
                    let mut pass = Vec::with_capacity(sum.len());
                    let mut out = Vec::with_capacity(sum.len());
                    let mut offset = Vec::with_capacity(sum.len());
                    for &v in &sum {
                        let ve = if *relu { v.max(0.0) } else { v };
                        let code = round_away(ve) + zz;
                        let ok = code >= lo && code <= hi && (!*relu || v > 0.0);
                        let o = code.clamp(lo, hi);
                        pass.push(ok);
                        out.push(o);
                        offset.push(o - v);
                    }
                    (out.clone(), Aux::Frozen(Frozen { pass, base_out: out, offset }))
                } else {
                    (self.apply_frozen(i, &lin(val(*x1), val(*x2))), Aux::None)
                }
            }
        }
    }

    fn apply_frozen(&self, i: usize, linear: &[f64]) -> Vec<f64> {
        let Aux::Frozen(fz) = &self.aux[i] else { unreachable!() };
        linear
            .iter()
            .enumerate()
            .map(|(k, &v)| if fz.pass[k] { v + fz.offset[k] } else { fz.base_out[k] })
            .collect()
    }
}

fn round_away(x: f64) -> f64 {
    if x >= 0.0 {
        (x + 0.5).floor()
    } else {
        (x - 0.5).ceil()
    }
}

fn ew(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if a.len() == b.len() {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    } else if b.len() == 1 {
        a.iter().map(|&x| f(x, b[0])).collect()
    } else {
        assert_eq!(a.len(), 1);
        b.iter().map(|&y| f(a[0], y)).collect()
    }
}

fn bcast(t: &[f64], shape: &[usize], v: &[f64], axis: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let (outer, ch, inner) = split_axis(shape, axis);
    let mut out = vec![0.0f64; t.len()];
    for o in 0..outer {
        for c in 0..ch {
            let base = (o * ch + c) * inner;
            for k in 0..inner {
                out[base + k] = f(t[base + k], v[c]);
            }
        }
    }
    out
}

fn matmul64(a: &[f64], sa: &[usize], b: &[f64], sb: &[usize], transpose_b: bool) -> Vec<f64> {
    let (m, k) = (sa[0], sa[1]);
    let n = if transpose_b { sb[0] } else { sb[1] };
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for p in 0..k {
                let bv = if transpose_b { b[j * k + p] } else { b[p * n + j] };
                acc += a[i * k + p] * bv;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn conv64(x: &[f64], sx: &[usize], w: &[f64], sw: &[usize], stride: usize, pad: usize, depthwise: bool) -> Vec<f64> {
    let (nb, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
    let (co, kh, kw) = if depthwise { (sw[0], sw[1], sw[2]) } else { (sw[0], sw[2], sw[3]) };
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f64; nb * co * ho * wo];
    for n in 0..nb {
        for oc in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f64;
                    let ics: Vec<usize> = if depthwise { vec![oc] } else { (0..cin).collect() };
                    for (wi, &ic) in ics.iter().enumerate() {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((n * cin + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = if depthwise {
                                    w[(oc * kh + ky) * kw + kx]
                                } else {
                                    w[((oc * cin + wi) * kh + ky) * kw + kx]
                                };
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * co + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn maxpool64(x: &[f64], s: &[usize], kernel: usize, stride: usize) -> (Vec<f64>, Vec<usize>) {
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ho = (h - kernel) / stride + 1;
    let wo = (w - kernel) / stride + 1;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for i in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0usize;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = i * h * w + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > best {
                            best = x[idx];
                            bi = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(bi);
            }
        }
    }
    (out, arg)
}

fn pool_sum(x: &[f64], s: &[usize]) -> Vec<f64> {
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n * c {
        out.push(x[i * h * w..(i + 1) * h * w].iter().sum());
    }
    out
}

fn concat64(parts: &[(&Vec<f64>, &Vec<usize>)], axis: usize) -> Vec<f64> {
    let outer: usize = parts[0].1[..axis].iter().product();
    let inner: usize = parts[0].1[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|(d, _)| d.len()).sum();
    let mut out = Vec::with_capacity(total);
    for o in 0..outer {
        for (data, shape) in parts {
            let ci = shape[axis];
            out.extend_from_slice(&data[o * ci * inner..(o + 1) * ci * inner]);
        }
    }
    out
}

fn log_softmax64(x: &[f64], s: &[usize]) -> Vec<f64> {
    let (n, k) = (s[0], s[1]);
    let mut out = vec![0.0f64; n * k];
    for i in 0..n {
        let row = &x[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for j in 0..k {
            out[i * k + j] = row[j] - lse;
        }
    }
    out
}

/// Relative closeness used by gradient checks:
/// `|a-b| <= tol * max(|a|,|b|) + 1e-9`.
pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()) + 1e-9
}
