//! Integer deployment: export per-layer integer artifacts and run the pure
//! online pipeline over raw activation codes. The recode multiplier is applied
//! in f64, the same boundary the fake-quant recode ops use, so the integer
//! path reproduces simulated codes bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dof::{
    execute_plan, record_student, Act, DofSet, FamilyMask, OfflinePlan, OnlineConsts, INPUT_GROUP,
};
use crate::error::DeployError;
use crate::graph::{Graph, LayerKind};
use crate::tape::Tape;
use crate::tensor::{round_half_away, Tensor};

pub const MAGIC: u32 = u32::from_le_bytes(*b"QDEP");
pub const FORMAT_VERSION: u32 = 1;

/// Integer code tensor. Codes are stored as i32; the declared bit width of
/// each edge bounds the actual values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i32>,
}

impl CodeTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// One executable node. `preds` index into `DeployExport::nodes`; an empty
/// list reads the encoded network input.
#[derive(Debug, Clone)]
pub struct DeployNode {
    pub name: String,
    pub preds: Vec<usize>,
    /// output shape without the batch dimension
    pub out_shape: Vec<usize>,
    pub op: DeployOp,
}

#[derive(Debug, Clone)]
pub enum DeployOp {
    Conv {
        stride: usize,
        pad: usize,
        wq: CodeTensor,
        b_hat: Vec<i64>,
        f_hat: Vec<f32>,
        z_in: i32,
        z_out: i32,
        relu: bool,
    },
    DepthwiseConv {
        stride: usize,
        pad: usize,
        wq: CodeTensor,
        b_hat: Vec<i64>,
        f_hat: Vec<f32>,
        z_in: i32,
        z_out: i32,
        relu: bool,
    },
    Dense {
        wq: CodeTensor,
        b_hat: Vec<i64>,
        f_hat: Vec<f32>,
        z_in: i32,
        z_out: i32,
        relu: bool,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        m: Vec<f32>,
        z_in: i32,
        z_out: i32,
        relu: bool,
    },
    EwAdd {
        g1: Vec<f32>,
        g2: Vec<f32>,
        z1: i32,
        z2: i32,
        z_out: i32,
        relu: bool,
    },
    Concat,
    /// activation fused into the producer's recode; emits the producer codes
    Passthrough,
}

impl DeployOp {
    fn tag(&self) -> u8 {
        match self {
            DeployOp::Conv { .. } => 0,
            DeployOp::DepthwiseConv { .. } => 1,
            DeployOp::Dense { .. } => 2,
            DeployOp::MaxPool { .. } => 3,
            DeployOp::AvgPool { .. } => 4,
            DeployOp::EwAdd { .. } => 5,
            DeployOp::Concat => 6,
            DeployOp::Passthrough => 7,
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            DeployOp::Conv { .. } => "conv",
            DeployOp::DepthwiseConv { .. } => "depthwise_conv",
            DeployOp::Dense { .. } => "dense",
            DeployOp::MaxPool { .. } => "maxpool",
            DeployOp::AvgPool { .. } => "avgpool",
            DeployOp::EwAdd { .. } => "ew_add",
            DeployOp::Concat => "concat",
            DeployOp::Passthrough => "passthrough",
        }
    }

    fn param_count(&self) -> usize {
        match self {
            DeployOp::Conv { wq, b_hat, f_hat, .. }
            | DeployOp::DepthwiseConv { wq, b_hat, f_hat, .. }
            | DeployOp::Dense { wq, b_hat, f_hat, .. } => wq.numel() + b_hat.len() + f_hat.len(),
            DeployOp::AvgPool { m, .. } => m.len(),
            DeployOp::EwAdd { g1, g2, .. } => g1.len() + g2.len(),
            _ => 0,
        }
    }
}

/// Everything the online pipeline needs: encode constants for the input edge
/// and one node per layer, stored in execution order.
#[derive(Debug, Clone)]
pub struct DeployExport {
    pub act_bits: u8,
    pub accumulator_bits: u8,
    /// per-channel scale of the input edge; codes = round(x/s) + z
    pub input_scale: Vec<f32>,
    pub input_z: i32,
    /// input shape without the batch dimension
    pub input_shape: Vec<usize>,
    pub nodes: Vec<DeployNode>,
    /// index of the network output in `nodes`
    pub output_node: usize,
}

impl DeployExport {
    pub fn act_qmax(&self) -> i32 {
        ((1i64 << self.act_bits) - 1) as i32
    }

    fn acc_limit(&self) -> i64 {
        1i64 << (self.accumulator_bits - 1)
    }
}

// ── export ───────────────────────────────────────────────────────────────────

/// Cast the executed plan into integer deployment artifacts. Pure function of
/// the inputs: exporting twice yields identical bytes.
pub fn export(graph: &Graph, plan: &OfflinePlan, dof: &DofSet) -> Result<DeployExport, DeployError> {
    if !dof.hw.activation_quant_enabled {
        return Err(DeployError::ActivationQuantDisabled);
    }
    if dof.hw.activations_signed {
        return Err(DeployError::SignedActivations);
    }
    let ex = execute_plan(graph, plan, dof)?;
    let topo = &plan.topo;
    let acc_limit = 1i64 << (dof.hw.accumulator_bits - 1);

    let mut weighted_by_layer = BTreeMap::new();
    for (lc, d) in ex.weighted.iter().zip(&dof.layers) {
        weighted_by_layer.insert(lc.layer, (lc, d.weight_spec.bits));
    }
    let mut pos_of = vec![usize::MAX; graph.layers.len()];
    for (pos, &gi) in topo.order.iter().enumerate() {
        pos_of[gi] = pos;
    }

    let mut nodes = Vec::with_capacity(topo.order.len());
    for &gi in &topo.order {
        let layer = &graph.layers[gi];
        let preds: Vec<usize> = topo.preds[gi].iter().map(|&p| pos_of[p]).collect();
        let op = if let Some(&(lc, w_bits)) = weighted_by_layer.get(&gi) {
            let wq = cast_weight_codes(&lc.wq, &lc.name, w_bits)?;
            for (c, &f) in lc.f_hat.data.iter().enumerate() {
                if !(f.is_finite() && f > 0.0) {
                    return Err(DeployError::Malformed(format!(
                        "recode multiplier {f} for channel {c} of layer {:?} is not positive",
                        lc.name
                    )));
                }
            }
            for &bh in &lc.b_hat {
                if bh.abs() >= acc_limit {
                    return Err(DeployError::Overflow {
                        layer: lc.name.clone(),
                        value: bh,
                        bits_minus_one: (dof.hw.accumulator_bits - 1) as u32,
                    });
                }
            }
            let b_hat = lc.b_hat.clone();
            let f_hat = lc.f_hat.data.clone();
            let relu = lc.act != Act::None;
            match layer.kind {
                LayerKind::Conv2d { stride, pad } => DeployOp::Conv {
                    stride,
                    pad,
                    wq,
                    b_hat,
                    f_hat,
                    z_in: lc.z_in,
                    z_out: lc.z_out,
                    relu,
                },
                LayerKind::DepthwiseConv2d { stride, pad } => DeployOp::DepthwiseConv {
                    stride,
                    pad,
                    wq,
                    b_hat,
                    f_hat,
                    z_in: lc.z_in,
                    z_out: lc.z_out,
                    relu,
                },
                LayerKind::Dense => DeployOp::Dense {
                    wq,
                    b_hat,
                    f_hat,
                    z_in: lc.z_in,
                    z_out: lc.z_out,
                    relu,
                },
                _ => {
                    return Err(DeployError::Malformed(format!(
                        "layer {:?} carries weights but is not a weighted kind",
                        lc.name
                    )))
                }
            }
        } else if let Some(oc) = ex.online.get(&gi) {
            match oc {
                OnlineConsts::AvgPool { m, z_in, z_out, act } => DeployOp::AvgPool {
                    m: m.data.clone(),
                    z_in: *z_in,
                    z_out: *z_out,
                    relu: *act != Act::None,
                },
                OnlineConsts::EwAdd { g1, g2, z1, z2, z_out, act } => DeployOp::EwAdd {
                    g1: g1.data.clone(),
                    g2: g2.data.clone(),
                    z1: *z1,
                    z2: *z2,
                    z_out: *z_out,
                    relu: *act != Act::None,
                },
            }
        } else {
            match layer.kind {
                LayerKind::MaxPool { kernel, stride } => DeployOp::MaxPool { kernel, stride },
                LayerKind::Concat => DeployOp::Concat,
                // fused activations and anything else without constants
                _ => DeployOp::Passthrough,
            }
        };
        nodes.push(DeployNode {
            name: layer.name.clone(),
            preds,
            out_shape: topo.shapes[gi].clone(),
            op,
        });
    }

    Ok(DeployExport {
        act_bits: dof.hw.activation_bits,
        accumulator_bits: dof.hw.accumulator_bits,
        input_scale: dof.groups[INPUT_GROUP].s_a.data.clone(),
        input_z: dof.groups[INPUT_GROUP].z,
        input_shape: graph.input_shape.clone(),
        nodes,
        output_node: pos_of[topo.output],
    })
}

fn cast_weight_codes(wq: &Tensor, name: &str, bits: u8) -> Result<CodeTensor, DeployError> {
    let bound = ((1i64 << (bits - 1)) - 1) as f32;
    let mut data = Vec::with_capacity(wq.numel());
    for &v in &wq.data {
        if v.fract() != 0.0 || !v.is_finite() || v.abs() > bound {
            return Err(DeployError::Malformed(format!(
                "weight code {v} outside the {bits}-bit range in layer {name:?}"
            )));
        }
        data.push(v as i32);
    }
    Ok(CodeTensor { shape: wq.shape.clone(), data })
}

// ── encode / execute ─────────────────────────────────────────────────────────

/// Quantize a batched real input to codes: `clip(round(x/s) + z)`, the same
/// arithmetic the simulated input recode performs (f32 reciprocal widened to
/// f64 for the multiply).
pub fn encode_codes(ex: &DeployExport, input: &Tensor) -> Result<CodeTensor, DeployError> {
    if input.rank() < 2 || input.shape[1..] != ex.input_shape[..] {
        return Err(DeployError::Malformed(format!(
            "input shape {:?} does not match expected [N]+{:?}",
            input.shape, ex.input_shape
        )));
    }
    let ch = input.shape[1];
    if ex.input_scale.len() != ch {
        return Err(DeployError::Malformed(format!(
            "input scale has {} channels, input has {ch}",
            ex.input_scale.len()
        )));
    }
    let inner: usize = input.shape[2..].iter().product();
    let qmax = ex.act_qmax() as i64;
    let z = ex.input_z as i64;
    let mut data = Vec::with_capacity(input.numel());
    for o in 0..input.shape[0] {
        for c in 0..ch {
            let f = (1.0f32 / ex.input_scale[c]) as f64;
            let base = (o * ch + c) * inner;
            for i in 0..inner {
                let r = round_half_away(f * input.data[base + i] as f64) as i64;
                data.push((r + z).clamp(0, qmax) as i32);
            }
        }
    }
    Ok(CodeTensor { shape: input.shape.clone(), data })
}

/// Run the integer pipeline and return the output codes.
pub fn run_int(ex: &DeployExport, input: &CodeTensor) -> Result<CodeTensor, DeployError> {
    let mut outs = run_int_collect(ex, input)?;
    Ok(outs.swap_remove(ex.output_node))
}

/// Run the integer pipeline and return every node's codes in execution order.
pub fn run_int_collect(ex: &DeployExport, input: &CodeTensor) -> Result<Vec<CodeTensor>, DeployError> {
    if input.shape.len() < 2 || input.shape[1..] != ex.input_shape[..] {
        return Err(DeployError::Malformed(format!(
            "input shape {:?} does not match expected [N]+{:?}",
            input.shape, ex.input_shape
        )));
    }
    let qmax = ex.act_qmax();
    for &c in &input.data {
        if c < 0 || c > qmax {
            return Err(DeployError::InputRange { layer: "<input>".into() });
        }
    }
    let limit = ex.acc_limit();
    let mut outs: Vec<CodeTensor> = Vec::with_capacity(ex.nodes.len());
    for node in &ex.nodes {
        let arg = |k: usize| -> &CodeTensor {
            match node.preds.get(k) {
                Some(&p) => &outs[p],
                None => input,
            }
        };
        let out = match &node.op {
            DeployOp::Conv { stride, pad, wq, b_hat, f_hat, z_in, z_out, relu } => conv_int(
                arg(0),
                wq,
                *stride,
                *pad,
                b_hat,
                f_hat,
                *z_in,
                *z_out,
                *relu,
                qmax,
                limit,
                ex.accumulator_bits,
                &node.name,
            )?,
            DeployOp::DepthwiseConv { stride, pad, wq, b_hat, f_hat, z_in, z_out, relu } => {
                depthwise_int(
                    arg(0),
                    wq,
                    *stride,
                    *pad,
                    b_hat,
                    f_hat,
                    *z_in,
                    *z_out,
                    *relu,
                    qmax,
                    limit,
                    ex.accumulator_bits,
                    &node.name,
                )?
            }
            DeployOp::Dense { wq, b_hat, f_hat, z_in, z_out, relu } => dense_int(
                arg(0),
                wq,
                b_hat,
                f_hat,
                *z_in,
                *z_out,
                *relu,
                qmax,
                limit,
                ex.accumulator_bits,
                &node.name,
            )?,
            DeployOp::MaxPool { kernel, stride } => maxpool_int(arg(0), *kernel, *stride),
            DeployOp::AvgPool { m, z_in, z_out, relu } => avgpool_int(
                arg(0),
                m,
                *z_in,
                *z_out,
                *relu,
                qmax,
                limit,
                ex.accumulator_bits,
                &node.name,
            )?,
            DeployOp::EwAdd { g1, g2, z1, z2, z_out, relu } => {
                ewadd_int(arg(0), arg(1), g1, g2, *z1, *z2, *z_out, *relu, qmax)
            }
            DeployOp::Concat => {
                let ins: Vec<&CodeTensor> = (0..node.preds.len().max(1)).map(arg).collect();
                concat_int(&ins)
            }
            DeployOp::Passthrough => arg(0).clone(),
        };
        outs.push(out);
    }
    Ok(outs)
}

/// `clip(round(f64(f) * f64(acc)) + z)`, the shared conformance boundary.
#[inline]
fn recode(acc: i64, f: f32, z: i32, qmax: i32, relu: bool) -> i32 {
    let a = if relu && acc < 0 { 0 } else { acc };
    let r = round_half_away(f as f64 * a as f64) as i64;
    (r + z as i64).clamp(0, qmax as i64) as i32
}

#[inline]
fn bump(acc: &mut i64, add: i64, limit: i64, bits: u8, layer: &str) -> Result<(), DeployError> {
    *acc += add;
    if acc.abs() >= limit {
        return Err(DeployError::Overflow {
            layer: layer.into(),
            value: *acc,
            bits_minus_one: (bits - 1) as u32,
        });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn conv_int(
    x: &CodeTensor,
    w: &CodeTensor,
    stride: usize,
    pad: usize,
    b_hat: &[i64],
    f_hat: &[f32],
    z_in: i32,
    z_out: i32,
    relu: bool,
    qmax: i32,
    limit: i64,
    acc_bits: u8,
    layer: &str,
) -> Result<CodeTensor, DeployError> {
    let (nb, cin, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (co, _, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::with_capacity(nb * co * ho * wo);
    for n in 0..nb {
        for oc in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    // raw-code MAC; positions off the edge hold the input zero point
                    let mut acc = 0i64;
                    for ic in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                let code = if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < wd {
                                    x.data[((n * cin + ic) * h + iy as usize) * wd + ix as usize]
                                } else {
                                    z_in
                                };
                                let wv = w.data[((oc * cin + ic) * kh + ky) * kw + kx];
                                bump(&mut acc, wv as i64 * code as i64, limit, acc_bits, layer)?;
                            }
                        }
                    }
                    bump(&mut acc, b_hat[oc], limit, acc_bits, layer)?;
                    out.push(recode(acc, f_hat[oc % f_hat.len()], z_out, qmax, relu));
                }
            }
        }
    }
    Ok(CodeTensor { shape: vec![nb, co, ho, wo], data: out })
}

#[allow(clippy::too_many_arguments)]
fn depthwise_int(
    x: &CodeTensor,
    w: &CodeTensor,
    stride: usize,
    pad: usize,
    b_hat: &[i64],
    f_hat: &[f32],
    z_in: i32,
    z_out: i32,
    relu: bool,
    qmax: i32,
    limit: i64,
    acc_bits: u8,
    layer: &str,
) -> Result<CodeTensor, DeployError> {
    let (nb, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (kh, kw) = (w.shape[1], w.shape[2]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::with_capacity(nb * c * ho * wo);
    for n in 0..nb {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0i64;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            let code = if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < wd {
                                x.data[((n * c + ch) * h + iy as usize) * wd + ix as usize]
                            } else {
                                z_in
                            };
                            let wv = w.data[(ch * kh + ky) * kw + kx];
                            bump(&mut acc, wv as i64 * code as i64, limit, acc_bits, layer)?;
                        }
                    }
                    bump(&mut acc, b_hat[ch], limit, acc_bits, layer)?;
                    out.push(recode(acc, f_hat[ch % f_hat.len()], z_out, qmax, relu));
                }
            }
        }
    }
    Ok(CodeTensor { shape: vec![nb, c, ho, wo], data: out })
}

#[allow(clippy::too_many_arguments)]
fn dense_int(
    x: &CodeTensor,
    w: &CodeTensor,
    b_hat: &[i64],
    f_hat: &[f32],
    _z_in: i32,
    z_out: i32,
    relu: bool,
    qmax: i32,
    limit: i64,
    acc_bits: u8,
    layer: &str,
) -> Result<CodeTensor, DeployError> {
    let (nb, cin) = (x.shape[0], x.shape[1]);
    let co = w.shape[0];
    let mut out = Vec::with_capacity(nb * co);
    for n in 0..nb {
        for oc in 0..co {
            let mut acc = 0i64;
            for ic in 0..cin {
                let code = x.data[n * cin + ic];
                let wv = w.data[oc * cin + ic];
                bump(&mut acc, wv as i64 * code as i64, limit, acc_bits, layer)?;
            }
            bump(&mut acc, b_hat[oc], limit, acc_bits, layer)?;
            out.push(recode(acc, f_hat[oc % f_hat.len()], z_out, qmax, relu));
        }
    }
    Ok(CodeTensor { shape: vec![nb, co], data: out })
}

fn maxpool_int(x: &CodeTensor, kernel: usize, stride: usize) -> CodeTensor {
    let (nb, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let ho = (h - kernel) / stride + 1;
    let wo = (wd - kernel) / stride + 1;
    let mut out = Vec::with_capacity(nb * c * ho * wo);
    for i in 0..nb * c {
        let base = i * h * wd;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = i32::MIN;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let v = x.data[base + (oy * stride + ky) * wd + ox * stride + kx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    CodeTensor { shape: vec![nb, c, ho, wo], data: out }
}

#[allow(clippy::too_many_arguments)]
fn avgpool_int(
    x: &CodeTensor,
    m: &[f32],
    z_in: i32,
    z_out: i32,
    relu: bool,
    qmax: i32,
    limit: i64,
    acc_bits: u8,
    layer: &str,
) -> Result<CodeTensor, DeployError> {
    let (nb, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut out = Vec::with_capacity(nb * c);
    for n in 0..nb {
        for ch in 0..c {
            let mut acc = 0i64;
            for j in 0..h * wd {
                let code = x.data[(n * c + ch) * h * wd + j];
                bump(&mut acc, (code - z_in) as i64, limit, acc_bits, layer)?;
            }
            out.push(recode(acc, m[ch % m.len()], z_out, qmax, relu));
        }
    }
    Ok(CodeTensor { shape: vec![nb, c], data: out })
}

#[allow(clippy::too_many_arguments)]
fn ewadd_int(
    x1: &CodeTensor,
    x2: &CodeTensor,
    g1: &[f32],
    g2: &[f32],
    z1: i32,
    z2: i32,
    z_out: i32,
    relu: bool,
    qmax: i32,
) -> CodeTensor {
    let ch = x1.shape[1];
    let inner: usize = x1.shape[2..].iter().product();
    let mut out = Vec::with_capacity(x1.numel());
    for o in 0..x1.shape[0] {
        for c in 0..ch {
            let f1 = g1[c % g1.len()] as f64;
            let f2 = g2[c % g2.len()] as f64;
            let base = (o * ch + c) * inner;
            for i in 0..inner {
                let v = f1 * (x1.data[base + i] - z1) as f64 + f2 * (x2.data[base + i] - z2) as f64;
                let ve = if relu { v.max(0.0) } else { v };
                let code = round_half_away(ve) as i64 + z_out as i64;
                out.push(code.clamp(0, qmax as i64) as i32);
            }
        }
    }
    CodeTensor { shape: x1.shape.clone(), data: out }
}

fn concat_int(ins: &[&CodeTensor]) -> CodeTensor {
    let outer = ins[0].shape[0];
    let inner: usize = ins[0].shape[2..].iter().product();
    let ch: usize = ins.iter().map(|t| t.shape[1]).sum();
    let mut shape = ins[0].shape.clone();
    shape[1] = ch;
    let mut out = Vec::with_capacity(outer * ch * inner);
    for o in 0..outer {
        for t in ins {
            let c = t.shape[1];
            out.extend_from_slice(&t.data[o * c * inner..(o + 1) * c * inner]);
        }
    }
    CodeTensor { shape, data: out }
}

// ── conformance ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConformanceRow {
    pub name: String,
    /// max |simulated code - integer code| across all inputs and elements
    pub max_diff: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub inputs: usize,
    pub rows: Vec<ConformanceRow>,
    pub pass: bool,
}

impl ConformanceReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Run the fake-quant student and the integer pipeline on identical inputs
/// and report the per-layer maximum code discrepancy. Passes iff every row
/// is exactly zero.
pub fn check_exact(
    graph: &Graph,
    plan: &OfflinePlan,
    dof: &DofSet,
    inputs: &[Tensor],
) -> Result<ConformanceReport, DeployError> {
    let ex = export(graph, plan, dof)?;
    if inputs.is_empty() {
        return Ok(ConformanceReport { inputs: 0, rows: Vec::new(), pass: true });
    }
    let mut max_in = 0i64;
    let mut max_layer = vec![0i64; ex.nodes.len()];
    for img in inputs {
        let mut tape = Tape::new();
        let nodes = plan.record(graph, dof, &mut tape, &FamilyMask::none())?;
        let st = record_student(graph, plan, dof, &nodes, &mut tape, img)?;
        let codes = encode_codes(&ex, img)?;
        let sim_in = tape.value(st.input_codes.expect("activation quant is enabled"));
        max_in = max_in.max(max_code_diff(&sim_in.data, &codes.data));
        let outs = run_int_collect(&ex, &codes)?;
        for (pos, &gi) in plan.topo.order.iter().enumerate() {
            let sim = tape.value(st.outputs[gi]);
            max_layer[pos] = max_layer[pos].max(max_code_diff(&sim.data, &outs[pos].data));
        }
    }
    let mut rows = vec![ConformanceRow { name: "<input>".into(), max_diff: max_in }];
    for (pos, node) in ex.nodes.iter().enumerate() {
        rows.push(ConformanceRow { name: node.name.clone(), max_diff: max_layer[pos] });
    }
    let pass = rows.iter().all(|r| r.max_diff == 0);
    Ok(ConformanceReport { inputs: inputs.len(), rows, pass })
}

fn max_code_diff(sim: &[f32], int: &[i32]) -> i64 {
    debug_assert_eq!(sim.len(), int.len());
    let mut m = 0i64;
    for (&s, &q) in sim.iter().zip(int) {
        // simulated codes are integral f32 well below 2^24; the cast is exact
        let d = (s as i64 - q as i64).abs();
        if d > m {
            m = d;
        }
    }
    m
}

// ── binary format ────────────────────────────────────────────────────────────
//
// magic u32, version u32, act_bits u8, accumulator_bits u8, reserved u16,
// input_z i32, input_scale vec<f32>, input_shape vec<u32>, output_node u32,
// node count u32, then per node: name, preds vec<u32>, out_shape vec<u32>,
// op tag u8, op payload. All integers little endian.

pub fn export_bytes(ex: &DeployExport) -> Vec<u8> {
    let mut b = Vec::new();
    put_u32(&mut b, MAGIC);
    put_u32(&mut b, FORMAT_VERSION);
    b.push(ex.act_bits);
    b.push(ex.accumulator_bits);
    b.extend_from_slice(&0u16.to_le_bytes());
    put_i32(&mut b, ex.input_z);
    put_f32s(&mut b, &ex.input_scale);
    put_dims(&mut b, &ex.input_shape);
    put_u32(&mut b, ex.output_node as u32);
    put_u32(&mut b, ex.nodes.len() as u32);
    for node in &ex.nodes {
        put_str(&mut b, &node.name);
        put_dims(&mut b, &node.preds);
        put_dims(&mut b, &node.out_shape);
        b.push(node.op.tag());
        match &node.op {
            DeployOp::Conv { stride, pad, wq, b_hat, f_hat, z_in, z_out, relu }
            | DeployOp::DepthwiseConv { stride, pad, wq, b_hat, f_hat, z_in, z_out, relu } => {
                put_u32(&mut b, *stride as u32);
                put_u32(&mut b, *pad as u32);
                put_codes(&mut b, wq);
                put_i64s(&mut b, b_hat);
                put_f32s(&mut b, f_hat);
                put_i32(&mut b, *z_in);
                put_i32(&mut b, *z_out);
                b.push(*relu as u8);
            }
            DeployOp::Dense { wq, b_hat, f_hat, z_in, z_out, relu } => {
                put_codes(&mut b, wq);
                put_i64s(&mut b, b_hat);
                put_f32s(&mut b, f_hat);
                put_i32(&mut b, *z_in);
                put_i32(&mut b, *z_out);
                b.push(*relu as u8);
            }
            DeployOp::MaxPool { kernel, stride } => {
                put_u32(&mut b, *kernel as u32);
                put_u32(&mut b, *stride as u32);
            }
            DeployOp::AvgPool { m, z_in, z_out, relu } => {
                put_f32s(&mut b, m);
                put_i32(&mut b, *z_in);
                put_i32(&mut b, *z_out);
                b.push(*relu as u8);
            }
            DeployOp::EwAdd { g1, g2, z1, z2, z_out, relu } => {
                put_f32s(&mut b, g1);
                put_f32s(&mut b, g2);
                put_i32(&mut b, *z1);
                put_i32(&mut b, *z2);
                put_i32(&mut b, *z_out);
                b.push(*relu as u8);
            }
            DeployOp::Concat | DeployOp::Passthrough => {}
        }
    }
    b
}

pub fn parse_export(bytes: &[u8]) -> Result<DeployExport, DeployError> {
    let mut c = Cur { b: bytes, p: 0 };
    let magic = c.u32()?;
    if magic != MAGIC {
        return Err(DeployError::Malformed(format!("bad magic 0x{magic:08x}")));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(DeployError::Version(version));
    }
    let act_bits = c.u8()?;
    let accumulator_bits = c.u8()?;
    c.u16()?;
    let input_z = c.i32()?;
    let input_scale = c.f32s()?;
    let input_shape = c.dims()?;
    let output_node = c.u32()? as usize;
    let count = c.u32()? as usize;
    if count > 1 << 20 {
        return Err(DeployError::Malformed(format!("unreasonable node count {count}")));
    }
    let mut nodes = Vec::with_capacity(count);
    for _ in 0..count {
        let name = c.str()?;
        let preds = c.dims()?;
        let out_shape = c.dims()?;
        let tag = c.u8()?;
        let op = match tag {
            0 | 1 => {
                let stride = c.u32()? as usize;
                let pad = c.u32()? as usize;
                let wq = c.codes()?;
                let b_hat = c.i64s()?;
                let f_hat = c.f32s()?;
                let z_in = c.i32()?;
                let z_out = c.i32()?;
                let relu = c.u8()? != 0;
                if tag == 0 {
                    DeployOp::Conv { stride, pad, wq, b_hat, f_hat, z_in, z_out, relu }
                } else {
                    DeployOp::DepthwiseConv { stride, pad, wq, b_hat, f_hat, z_in, z_out, relu }
                }
            }
            2 => {
                let wq = c.codes()?;
                let b_hat = c.i64s()?;
                let f_hat = c.f32s()?;
                let z_in = c.i32()?;
                let z_out = c.i32()?;
                let relu = c.u8()? != 0;
                DeployOp::Dense { wq, b_hat, f_hat, z_in, z_out, relu }
            }
            3 => DeployOp::MaxPool { kernel: c.u32()? as usize, stride: c.u32()? as usize },
            4 => {
                let m = c.f32s()?;
                let z_in = c.i32()?;
                let z_out = c.i32()?;
                let relu = c.u8()? != 0;
                DeployOp::AvgPool { m, z_in, z_out, relu }
            }
            5 => {
                let g1 = c.f32s()?;
                let g2 = c.f32s()?;
                let z1 = c.i32()?;
                let z2 = c.i32()?;
                let z_out = c.i32()?;
                let relu = c.u8()? != 0;
                DeployOp::EwAdd { g1, g2, z1, z2, z_out, relu }
            }
            6 => DeployOp::Concat,
            7 => DeployOp::Passthrough,
            t => return Err(DeployError::Malformed(format!("unknown op tag {t}"))),
        };
        nodes.push(DeployNode { name, preds, out_shape, op });
    }
    if c.p != bytes.len() {
        return Err(DeployError::Malformed(format!("{} trailing bytes", bytes.len() - c.p)));
    }
    if output_node >= nodes.len() {
        return Err(DeployError::Malformed(format!("output node {output_node} out of range")));
    }
    for (i, node) in nodes.iter().enumerate() {
        for &p in &node.preds {
            if p >= i {
                return Err(DeployError::Malformed(format!(
                    "node {:?} reads node {p} before it is computed",
                    node.name
                )));
            }
        }
    }
    Ok(DeployExport {
        act_bits,
        accumulator_bits,
        input_scale,
        input_z,
        input_shape,
        nodes,
        output_node,
    })
}

#[derive(Serialize)]
struct ManifestNode<'a> {
    name: &'a str,
    op: &'static str,
    out_shape: &'a [usize],
    params: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    format: &'static str,
    version: u32,
    act_bits: u8,
    accumulator_bits: u8,
    input_shape: &'a [usize],
    input_z: i32,
    nodes: Vec<ManifestNode<'a>>,
}

pub fn manifest_json(ex: &DeployExport) -> String {
    let m = Manifest {
        format: "qdep",
        version: FORMAT_VERSION,
        act_bits: ex.act_bits,
        accumulator_bits: ex.accumulator_bits,
        input_shape: &ex.input_shape,
        input_z: ex.input_z,
        nodes: ex
            .nodes
            .iter()
            .map(|n| ManifestNode {
                name: &n.name,
                op: n.op.kind_name(),
                out_shape: &n.out_shape,
                params: n.op.param_count(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&m).expect("manifest serializes")
}

pub fn write_export(ex: &DeployExport, bin: &Path, manifest: &Path) -> Result<(), DeployError> {
    fs::write(bin, export_bytes(ex))?;
    fs::write(manifest, manifest_json(ex))?;
    Ok(())
}

pub fn read_export(bin: &Path) -> Result<DeployExport, DeployError> {
    parse_export(&fs::read(bin)?)
}

// ── byte helpers ─────────────────────────────────────────────────────────────

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_i32(b: &mut Vec<u8>, v: i32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    put_u32(b, s.len() as u32);
    b.extend_from_slice(s.as_bytes());
}

fn put_dims(b: &mut Vec<u8>, dims: &[usize]) {
    put_u32(b, dims.len() as u32);
    for &d in dims {
        put_u32(b, d as u32);
    }
}

fn put_f32s(b: &mut Vec<u8>, v: &[f32]) {
    put_u32(b, v.len() as u32);
    for &x in v {
        b.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_i64s(b: &mut Vec<u8>, v: &[i64]) {
    put_u32(b, v.len() as u32);
    for &x in v {
        b.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_codes(b: &mut Vec<u8>, t: &CodeTensor) {
    put_dims(b, &t.shape);
    put_u32(b, t.data.len() as u32);
    for &x in &t.data {
        put_i32(b, x);
    }
}

struct Cur<'a> {
    b: &'a [u8],
    p: usize,
}

impl<'a> Cur<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DeployError> {
        if self.p + n > self.b.len() {
            return Err(DeployError::Malformed("unexpected end of data".into()));
        }
        let s = &self.b[self.p..self.p + n];
        self.p += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DeployError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DeployError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DeployError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32, DeployError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, DeployError> {
        let n = self.u32()? as usize;
        // a length can never exceed the bytes that remain
        if n > self.b.len() - self.p {
            return Err(DeployError::Malformed(format!("length {n} exceeds remaining data")));
        }
        Ok(n)
    }

    fn str(&mut self) -> Result<String, DeployError> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| DeployError::Malformed("name is not valid utf-8".into()))
    }

    fn dims(&mut self) -> Result<Vec<usize>, DeployError> {
        let n = self.len()?;
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(self.u32()? as usize);
        }
        Ok(v)
    }

    fn f32s(&mut self) -> Result<Vec<f32>, DeployError> {
        let n = self.len()?;
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(f32::from_le_bytes(self.take(4)?.try_into().unwrap()));
        }
        Ok(v)
    }

    fn i64s(&mut self) -> Result<Vec<i64>, DeployError> {
        let n = self.len()?;
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(i64::from_le_bytes(self.take(8)?.try_into().unwrap()));
        }
        Ok(v)
    }

    fn codes(&mut self) -> Result<CodeTensor, DeployError> {
        let shape = self.dims()?;
        let n = self.len()?;
        if shape.iter().product::<usize>() != n {
            return Err(DeployError::Malformed(format!(
                "code tensor shape {shape:?} does not hold {n} values"
            )));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.i32()?);
        }
        Ok(CodeTensor { shape, data })
    }
}
