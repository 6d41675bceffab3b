//! Float-precision execution of a validated graph on the autodiff tape.
//! This is the reference forward used by calibration, by the distillation
//! teacher, and by accuracy evaluation. Unfolded batchnorm runs as a
//! per-channel affine with coefficients combined in f64.

use std::collections::BTreeMap;

use crate::error::GraphError;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

use super::{Graph, LayerKind, Topology};

/// Build the FP forward for `input` (batch leading) on a fresh tape.
/// Returns the tape and each layer's output node.
pub fn build_fp_tape(g: &Graph, topo: &Topology, input: &Tensor) -> Result<(Tape, Vec<VarId>), GraphError> {
    let mut expect = vec![input.shape[0]];
    expect.extend_from_slice(&g.input_shape);
    if input.shape != expect {
        return Err(GraphError::ShapeMismatch {
            layer: "<input>".into(),
            what: format!("batch shape {:?} expected {:?}", input.shape, expect),
        });
    }
    let mut tape = Tape::new();
    let x0 = tape.constant(input.clone());
    let mut outs: Vec<Option<VarId>> = vec![None; g.layers.len()];
    for &i in &topo.order {
        let l = &g.layers[i];
        let ins: Vec<VarId> = if topo.preds[i].is_empty() {
            vec![x0]
        } else {
            topo.preds[i].iter().map(|&p| outs[p].unwrap()).collect()
        };
        let mut y = match l.kind {
            LayerKind::Conv2d { stride, pad } => {
                let w = tape.constant(l.weight.clone().unwrap());
                tape.conv2d(ins[0], w, stride, pad)?
            }
            LayerKind::DepthwiseConv2d { stride, pad } => {
                let w = tape.constant(l.weight.clone().unwrap());
                tape.depthwise_conv2d(ins[0], w, stride, pad)?
            }
            LayerKind::Dense => {
                let w = tape.constant(l.weight.clone().unwrap());
                tape.matmul(ins[0], w, true)?
            }
            LayerKind::Relu => tape.relu(ins[0]),
            LayerKind::Relu6 => tape.relu6(ins[0]),
            LayerKind::MaxPool { kernel, stride } => tape.maxpool(ins[0], kernel, stride)?,
            LayerKind::AvgPoolGlobal => tape.avgpool_global(ins[0])?,
            LayerKind::EwAdd => tape.add(ins[0], ins[1])?,
            LayerKind::Concat => tape.concat(&ins, 1)?,
        };
        if let Some(b) = &l.bias {
            let bv = tape.constant(b.clone());
            y = tape.add_bcast(y, bv, 1)?;
        }
        if let Some(bn) = &l.bn {
            let oc = bn.gamma.numel();
            let mut a = vec![0.0f32; oc];
            let mut b = vec![0.0f32; oc];
            for c in 0..oc {
                let af = bn.gamma.data[c] as f64 / (bn.var.data[c] as f64 + bn.eps as f64).sqrt();
                a[c] = af as f32;
                b[c] = (bn.beta.data[c] as f64 - bn.mean.data[c] as f64 * af) as f32;
            }
            let av = tape.constant(Tensor { shape: vec![oc], data: a });
            let bv = tape.constant(Tensor { shape: vec![oc], data: b });
            y = tape.mul_bcast(y, av, 1)?;
            y = tape.add_bcast(y, bv, 1)?;
        }
        outs[i] = Some(y);
    }
    Ok((tape, outs.into_iter().map(Option::unwrap).collect()))
}

/// Output-layer activations for a batch.
pub fn run_fp(g: &Graph, topo: &Topology, input: &Tensor) -> Result<Tensor, GraphError> {
    let (tape, outs) = build_fp_tape(g, topo, input)?;
    Ok(tape.value(outs[topo.output]).clone())
}

/// Activations of every layer for a batch, keyed by layer name.
pub fn run_fp_collect(g: &Graph, topo: &Topology, input: &Tensor) -> Result<BTreeMap<String, Tensor>, GraphError> {
    let (tape, outs) = build_fp_tape(g, topo, input)?;
    Ok(g.layers
        .iter()
        .enumerate()
        .map(|(i, l)| (l.name.clone(), tape.value(outs[i]).clone()))
        .collect())
}

/// Row-wise argmax of a [N,K] score tensor.
pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    let (n, k) = (scores.shape[0], scores.shape[1]);
    (0..n)
        .map(|i| {
            let row = &scores.data[i * k..(i + 1) * k];
            let mut best = 0usize;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
