//! Scale solvers.
//!
//! `ppq` fits one scale to a vector by alternating nearest-code assignment
//! with the least-squares scale update s = <x,q>/<q,q>. Both half-steps are
//! optimal given the other, so the quantization error is non-increasing, and
//! finishing on the scale update leaves the residual orthogonal to the codes.
//! The alternation is a local descent: the error-vs-scale curve is piecewise
//! quadratic and almost every code cell holds a stationary point, so a single
//! run parks close to wherever it started. To reach the global basin we
//! descend from a ladder of starting scales spanning the useful clipping
//! range and keep the converged point with the lowest true error.
//!
//! `apq` fits a rank-one scale grid S_i * T_j over a matrix (or a matrix with
//! trailing spatial extent) by the same alternation applied to columns and
//! rows in turn, pre-dividing by the other side's scales. The column axis
//! carries the raw-maxima init, so callers put the structured (per-channel)
//! axis on columns. A scalar start ladder on S covers the shared clipping
//! depth the same way ppq's ladder does.
//!
//! Inner products accumulate in f64.

use std::collections::BTreeMap;

use crate::error::{GraphError, SolverError};
use crate::graph::exec::run_fp_collect;
use crate::graph::{Graph, LayerKind, Topology};
use crate::tensor::{round_half_away, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantSpec {
    pub bits: u8,
    pub signed: bool,
}

impl QuantSpec {
    pub fn signed(bits: u8) -> QuantSpec {
        QuantSpec { bits, signed: true }
    }

    pub fn unsigned(bits: u8) -> QuantSpec {
        QuantSpec { bits, signed: false }
    }

    /// Symmetric signed range +-(2^(b-1)-1); unsigned [0, 2^b-1].
    pub fn qmin(self) -> f32 {
        if self.signed {
            -(((1i64 << (self.bits - 1)) - 1) as f32)
        } else {
            0.0
        }
    }

    pub fn qmax(self) -> f32 {
        if self.signed {
            ((1i64 << (self.bits - 1)) - 1) as f32
        } else {
            ((1i64 << self.bits) - 1) as f32
        }
    }
}

/// Nearest code for one value at scale `s`.
#[inline]
pub fn encode_one(x: f32, s: f32, spec: QuantSpec) -> f32 {
    (round_half_away((x / s) as f64) as f32).clamp(spec.qmin(), spec.qmax())
}

/// Dequantized values s*clip(round(x/s)).
pub fn fakequant(x: &[f32], s: f32, spec: QuantSpec) -> Vec<f32> {
    x.iter().map(|&v| encode_one(v, s, spec) * s).collect()
}

/// Mean squared error of fakequant at scale `s`.
pub fn fakequant_mse(x: &[f32], s: f32, spec: QuantSpec) -> f64 {
    let mut acc = 0.0f64;
    for &v in x {
        let d = (encode_one(v, s, spec) * s - v) as f64;
        acc += d * d;
    }
    acc / x.len() as f64
}

#[derive(Debug, Clone)]
pub struct PpqResult {
    pub scale: f32,
    pub iters_run: usize,
    pub mse: f64,
}

pub const PPQ_DEFAULT_ITERS: usize = 10;
pub const PPQ_DEFAULT_TOL: f64 = 1e-7;
/// Starting scales per solve. The ladder spans [s0/8, 1.5*s0] around the
/// naive init s0 = max|x|/qmax, log-spaced; s0 itself is always included.
pub const PPQ_STARTS: usize = 256;

/// One run of the projection loop from a given scale. Alternates code
/// assignment with the least-squares scale update; stops early when the
/// scale moves by less than `tol` relatively. Always ends on a scale update,
/// leaving the residual orthogonal to the codes. An all-zero code vector
/// keeps the previous scale and stops.
fn ppq_descend(x: &[f32], spec: QuantSpec, mut s: f32, max_iters: usize, tol: f64) -> (f32, usize) {
    let mut iters_run = 0;
    for _ in 0..max_iters {
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for &v in x {
            let q = encode_one(v, s, spec) as f64;
            num += v as f64 * q;
            den += q * q;
        }
        iters_run += 1;
        if den == 0.0 {
            break;
        }
        let next = (num / den) as f32;
        let moved = (next as f64 - s as f64).abs();
        s = next;
        if moved <= tol * s.abs() as f64 {
            break;
        }
    }
    (s, iters_run)
}

/// Projection-refined scale for one vector: the best converged point of the
/// projection loop over the start ladder, by true reconstruction error. The
/// winning point gets a converged polish so the orthogonality fixed point
/// holds at the returned scale. All-zero input has no scale and is an error.
pub fn ppq(x: &[f32], spec: QuantSpec, max_iters: usize, tol: f64) -> Result<PpqResult, SolverError> {
    if x.is_empty() {
        return Err(SolverError::Empty);
    }
    if max_iters == 0 {
        return Err(SolverError::BadIterations);
    }
    let amax = x.iter().map(|v| v.abs()).fold(0.0f32, f32::max);
    if amax == 0.0 {
        return Err(SolverError::AllZero);
    }
    let s0 = amax / spec.qmax();
    let mut best: Option<(f32, usize, f64)> = None;
    for k in 0..PPQ_STARTS {
        let start = if k == 0 {
            s0
        } else {
            let f = (k - 1) as f64 / (PPQ_STARTS - 2).max(1) as f64;
            let lo = (s0 as f64 / 8.0).ln();
            let hi = (s0 as f64 * 1.5).ln();
            (lo + (hi - lo) * f).exp() as f32
        };
        let (s, iters) = ppq_descend(x, spec, start, max_iters, tol);
        let mse = fakequant_mse(x, s, spec);
        if best.map_or(true, |(_, _, m)| mse < m) {
            best = Some((s, iters, mse));
        }
    }
    let (s, iters, _) = best.unwrap();
    // the per-start budget may exhaust mid-descent; the loop is monotone in
    // true error, so finishing it only improves the winner
    let (s, extra) = ppq_descend(x, spec, s, 50 * max_iters, tol);
    Ok(PpqResult { scale: s, iters_run: iters + extra, mse: fakequant_mse(x, s, spec) })
}

#[derive(Debug, Clone)]
pub struct ApqResult {
    pub row_scales: Vec<f32>,
    pub col_scales: Vec<f32>,
    pub iters_run: usize,
    pub mse: f64,
    /// reconstruction error after each full alternation of the winning run
    pub trace: Vec<f64>,
}

/// Number of scalar starts for the dual fit; the gauge scalar is swept on S
/// over the same [1/8, 1.5] clipping band as ppq's ladder, with 1 included.
pub const APQ_STARTS: usize = 16;

struct ApqView<'a> {
    data: &'a [f32],
    rows: usize,
    cols: usize,
    sp: usize,
    row_spec: QuantSpec,
    col_spec: QuantSpec,
}

impl ApqView<'_> {
    #[inline]
    fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[(i * self.cols + j) * self.sp + k]
    }

    #[inline]
    fn code(&self, v: f32, si: f32, tj: f32) -> f64 {
        let q = round_half_away((v / (si * tj)) as f64);
        let lo = self.row_spec.qmin().min(self.col_spec.qmin()) as f64;
        let hi = self.row_spec.qmax().min(self.col_spec.qmax()) as f64;
        q.clamp(lo, hi)
    }

    fn mse(&self, s: &[f32], t: &[f32]) -> f64 {
        let mut sse = 0.0f64;
        for i in 0..self.rows {
            for j in 0..self.cols {
                for k in 0..self.sp {
                    let v = self.at(i, j, k);
                    let d = self.code(v, s[i], t[j]) * (s[i] as f64) * (t[j] as f64) - v as f64;
                    sse += d * d;
                }
            }
        }
        sse / (self.rows * self.cols * self.sp) as f64
    }

    /// One full alternation: columns given S first, codes refreshed, then
    /// rows given T. Each half-step is least squares on the pre-divided data.
    fn sweep(&self, s: &mut [f32], t: &mut [f32]) -> f64 {
        let mut max_rel_move = 0.0f64;
        for j in 0..self.cols {
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for i in 0..self.rows {
                for k in 0..self.sp {
                    let q = self.code(self.at(i, j, k), s[i], t[j]);
                    num += (self.at(i, j, k) / s[i]) as f64 * q;
                    den += q * q;
                }
            }
            if den > 0.0 {
                let next = (num / den) as f32;
                max_rel_move = max_rel_move.max(((next - t[j]) as f64 / t[j] as f64).abs());
                t[j] = next;
            }
        }
        for i in 0..self.rows {
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for j in 0..self.cols {
                for k in 0..self.sp {
                    let q = self.code(self.at(i, j, k), s[i], t[j]);
                    num += (self.at(i, j, k) / t[j]) as f64 * q;
                    den += q * q;
                }
            }
            if den > 0.0 {
                let next = (num / den) as f32;
                max_rel_move = max_rel_move.max(((next - s[i]) as f64 / s[i] as f64).abs());
                s[i] = next;
            }
        }
        max_rel_move
    }
}

/// Alternating dual-scale fit over `x` shaped [rows, cols] or
/// [rows, cols, spatial]. Row scales quantize at `row_spec`, columns at
/// `col_spec`; codes live on the product grid S_i*T_j.
///
/// Init: T_j from the raw column maxima at col_spec's ceiling, S_i from the
/// T-normalized row maxima. Each alternation re-solves columns given S, then
/// rows given T, least-squares on the pre-divided data. Column scales see
/// the raw data first, so the axis with real per-channel structure belongs
/// on columns. The whole descent is repeated over a scalar ladder on S and
/// the best result by true error wins; `trace` is the winner's per-sweep
/// error curve.
pub fn apq(x: &Tensor, row_spec: QuantSpec, col_spec: QuantSpec, max_iters: usize) -> Result<ApqResult, SolverError> {
    if !(x.rank() == 2 || x.rank() == 3) {
        return Err(SolverError::BadMatrix(x.shape.clone()));
    }
    if max_iters == 0 {
        return Err(SolverError::BadIterations);
    }
    let view = ApqView {
        data: &x.data,
        rows: x.shape[0],
        cols: x.shape[1],
        sp: if x.rank() == 3 { x.shape[2] } else { 1 },
        row_spec,
        col_spec,
    };
    let (rows, cols, sp) = (view.rows, view.cols, view.sp);

    // degenerate slices have no scale
    for j in 0..cols {
        if (0..rows).all(|i| (0..sp).all(|k| view.at(i, j, k) == 0.0)) {
            return Err(SolverError::DegenerateSlice(j));
        }
    }
    for i in 0..rows {
        if (0..cols).all(|j| (0..sp).all(|k| view.at(i, j, k) == 0.0)) {
            return Err(SolverError::DegenerateSlice(i));
        }
    }

    let mut t0 = vec![0.0f32; cols];
    for j in 0..cols {
        let mut m = 0.0f32;
        for i in 0..rows {
            for k in 0..sp {
                m = m.max(view.at(i, j, k).abs());
            }
        }
        t0[j] = m / col_spec.qmax();
    }
    let mut s0 = vec![0.0f32; rows];
    for i in 0..rows {
        let mut m = 0.0f32;
        for j in 0..cols {
            for k in 0..sp {
                m = m.max((view.at(i, j, k) / t0[j]).abs());
            }
        }
        s0[i] = m / row_spec.qmax();
    }

    let mut best: Option<ApqResult> = None;
    for cand in 0..APQ_STARTS {
        let alpha = if cand == 0 {
            1.0f64
        } else {
            let f = (cand - 1) as f64 / (APQ_STARTS - 2).max(1) as f64;
            let lo = (1.0f64 / 8.0).ln();
            let hi = 1.5f64.ln();
            (lo + (hi - lo) * f).exp()
        };
        let mut s: Vec<f32> = s0.iter().map(|&v| (v as f64 * alpha) as f32).collect();
        let mut t = t0.clone();
        let mut trace = Vec::with_capacity(max_iters);
        let mut iters_run = 0;
        for _ in 0..max_iters {
            let moved = view.sweep(&mut s, &mut t);
            trace.push(view.mse(&s, &t));
            iters_run += 1;
            if moved <= PPQ_DEFAULT_TOL {
                break;
            }
        }
        let mse = *trace.last().unwrap();
        if best.as_ref().map_or(true, |b| mse < b.mse) {
            best = Some(ApqResult { row_scales: s, col_scales: t, iters_run, mse, trace });
        }
    }
    Ok(best.unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Layerwise,
    Channelwise,
    DualChannel,
}

impl Granularity {
    pub fn name(self) -> &'static str {
        match self {
            Granularity::Layerwise => "layerwise",
            Granularity::Channelwise => "channelwise",
            Granularity::DualChannel => "dual_channel",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MmseRow {
    pub layer: String,
    pub granularity: Granularity,
    pub mse: f64,
    /// spread of per-output-channel weight maxima, max/min
    pub range_ratio: f64,
}

/// Weight quantization error of every weighted layer at the three
/// granularities. Depthwise weights have a single channel axis, so their
/// dual-channel row equals the channelwise one.
pub fn mmse_report(g: &Graph, spec: QuantSpec) -> Result<Vec<MmseRow>, SolverError> {
    let mut rows = Vec::new();
    for l in &g.layers {
        if !l.kind.is_weighted() {
            continue;
        }
        let w = l.weight.as_ref().unwrap();
        let oc = w.shape[0];
        let per = w.numel() / oc;

        let mut ch_max = vec![0.0f32; oc];
        for c in 0..oc {
            ch_max[c] = w.data[c * per..(c + 1) * per].iter().map(|v| v.abs()).fold(0.0, f32::max);
        }
        let hi = ch_max.iter().cloned().fold(0.0f32, f32::max) as f64;
        let lo = ch_max.iter().cloned().fold(f32::INFINITY, f32::min).max(1e-30) as f64;
        let range_ratio = hi / lo;

        let lw = ppq(&w.data, spec, PPQ_DEFAULT_ITERS, PPQ_DEFAULT_TOL)?;
        rows.push(MmseRow { layer: l.name.clone(), granularity: Granularity::Layerwise, mse: lw.mse, range_ratio });

        let mut sse = 0.0f64;
        for c in 0..oc {
            let slice = &w.data[c * per..(c + 1) * per];
            let r = ppq(slice, spec, PPQ_DEFAULT_ITERS, PPQ_DEFAULT_TOL)?;
            sse += r.mse * per as f64;
        }
        let ch_mse = sse / w.numel() as f64;
        rows.push(MmseRow { layer: l.name.clone(), granularity: Granularity::Channelwise, mse: ch_mse, range_ratio });

        // the dual fit wants the output-channel axis on columns, where the
        // raw-maxima init lives; weights are stored output-major, so build
        // the [in, out, spatial] view explicitly
        let dual_mse = match l.kind {
            LayerKind::Conv2d { .. } | LayerKind::Dense => {
                let ic = w.shape[1];
                let spat = w.numel() / (oc * ic);
                let mut data = vec![0.0f32; w.numel()];
                for o in 0..oc {
                    for i in 0..ic {
                        for k in 0..spat {
                            data[(i * oc + o) * spat + k] = w.data[(o * ic + i) * spat + k];
                        }
                    }
                }
                let flipped = Tensor { shape: vec![ic, oc, spat], data };
                apq(&flipped, spec, spec, PPQ_DEFAULT_ITERS)?.mse
            }
            LayerKind::DepthwiseConv2d { .. } => ch_mse,
            _ => unreachable!(),
        };
        rows.push(MmseRow { layer: l.name.clone(), granularity: Granularity::DualChannel, mse: dual_mse, range_ratio });
    }
    Ok(rows)
}

/// Observed activation range of one layer output (or the network input).
#[derive(Debug, Clone, Copy)]
pub struct ActRange {
    pub min: f32,
    pub max: f32,
}

/// Key used for the network input's range in calibration maps.
pub const INPUT_RANGE_KEY: &str = "<input>";

/// Min/max of every layer's output (and of the input itself) over a set of
/// calibration batches.
pub fn calibrate_activations(
    g: &Graph,
    topo: &Topology,
    batches: &[Tensor],
) -> Result<BTreeMap<String, ActRange>, GraphError> {
    let mut out: BTreeMap<String, ActRange> = BTreeMap::new();
    let mut fold = |name: &str, data: &[f32]| {
        let e = out.entry(name.to_string()).or_insert(ActRange { min: f32::INFINITY, max: f32::NEG_INFINITY });
        for &v in data {
            e.min = e.min.min(v);
            e.max = e.max.max(v);
        }
    };
    for b in batches {
        fold(INPUT_RANGE_KEY, &b.data);
        let acts = run_fp_collect(g, topo, b)?;
        for (name, t) in &acts {
            fold(name, &t.data);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_ranges() {
        let w4 = QuantSpec::signed(4);
        assert_eq!((w4.qmin(), w4.qmax()), (-7.0, 7.0));
        let a8 = QuantSpec::unsigned(8);
        assert_eq!((a8.qmin(), a8.qmax()), (0.0, 255.0));
        let acc = QuantSpec::signed(8);
        assert_eq!((acc.qmin(), acc.qmax()), (-127.0, 127.0));
    }

    #[test]
    fn ppq_rejects_bad_input() {
        let spec = QuantSpec::signed(4);
        assert!(matches!(ppq(&[], spec, 10, 1e-7), Err(SolverError::Empty)));
        assert!(matches!(ppq(&[0.0, 0.0], spec, 10, 1e-7), Err(SolverError::AllZero)));
        assert!(matches!(ppq(&[1.0], spec, 0, 1e-7), Err(SolverError::BadIterations)));
    }

    #[test]
    fn ppq_exact_grid_recovers_scale() {
        // values already on a code grid: scale 0.25, codes within +-7
        let x: Vec<f32> = vec![0.25, -0.5, 1.75, -1.75, 0.75, 1.0, -0.25, 0.5];
        let r = ppq(&x, QuantSpec::signed(4), 10, 1e-7).unwrap();
        assert!((r.scale - 0.25).abs() < 1e-6, "scale {}", r.scale);
        assert!(r.mse < 1e-12);
    }

    #[test]
    fn ppq_residual_is_orthogonal_to_codes() {
        let x: Vec<f32> = (0..64).map(|i| ((i * 37 % 97) as f32 - 48.0) * 0.013).collect();
        let spec = QuantSpec::signed(4);
        let r = ppq(&x, spec, 10, 1e-12).unwrap();
        let mut dot = 0.0f64;
        let mut qn = 0.0f64;
        for &v in &x {
            let q = encode_one(v, r.scale, spec) as f64;
            dot += (v as f64 - r.scale as f64 * q) * q;
            qn += q * q;
        }
        assert!(dot.abs() <= 1e-6 * qn.max(1.0), "residual-code dot {dot}");
    }

    #[test]
    fn apq_shapes_and_degenerate_checks() {
        let spec = QuantSpec::signed(4);
        let bad = Tensor::from_vec(&[4], vec![1.0; 4]).unwrap();
        assert!(matches!(apq(&bad, spec, spec, 5), Err(SolverError::BadMatrix(_))));
        let z = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 2.0, 0.0]).unwrap();
        assert!(matches!(apq(&z, spec, spec, 5), Err(SolverError::DegenerateSlice(1))));
    }
}
