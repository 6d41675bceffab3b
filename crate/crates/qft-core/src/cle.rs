//! Cross-layer equalization adapted to low-bit weights. Per interface
//! (weighted producer, its consumers) the heuristic derives one positive
//! factor per producer output channel from MMSE scale ratios and installs it
//! either as a vector activation scale (the trainable form) or as a weight
//! preconditioning (the legacy form used for equivalence checks).
//!
//! Factors are snapped to powers of two. Scaling by a power of two is exact
//! in f32, which makes the two installation forms produce bit-identical
//! deployment constants instead of merely close ones.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dof::{DofSet, LayerPlan};
use crate::error::CleError;
use crate::graph::{Graph, LayerKind, Topology};
use crate::solvers::{ppq, QuantSpec, PPQ_DEFAULT_ITERS, PPQ_DEFAULT_TOL};

/// One equalizable interface. `factors` has one entry per output channel of
/// `producer`; the group behind the producer's output absorbs them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleInterface {
    pub producer: String,
    /// DofSet group index whose scale the factors divide
    pub group: usize,
    /// strictly positive powers of two, one per producer output channel
    pub factors: Vec<f32>,
    /// bit-width weighting actually used (mean over consumers)
    pub beta: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleFactors {
    pub interfaces: Vec<CleInterface>,
    /// optional scalar recalibration of installed activation scales
    pub alpha_a: f32,
    /// optional scalar recalibration of the weight form
    pub alpha_w: f32,
    /// interfaces skipped and degenerate channels, for the audit trail
    pub warnings: Vec<String>,
}

impl CleFactors {
    pub fn interface(&self, producer: &str) -> Option<&CleInterface> {
        self.interfaces.iter().find(|i| i.producer == producer)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("factors serialize")
    }

    pub fn from_json(text: &str) -> Result<CleFactors, CleError> {
        serde_json::from_str(text).map_err(|e| CleError::Parse(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConsumerKind {
    Weighted,
    EwAdd,
}

#[derive(Debug, Clone, Copy)]
struct Consumer {
    layer: usize,
    /// channel offset of the producer's slice inside the consumer's input
    offset: usize,
    kind: ConsumerKind,
}

/// Follow codes-preserving layers from `producer`'s output down to the
/// layers that actually absorb a channel rescaling. Err carries the layer
/// that makes the interface non-equalizable.
fn walk_consumers(
    graph: &Graph,
    topo: &Topology,
    producer: usize,
) -> Result<Vec<Consumer>, String> {
    let mut out = Vec::new();
    let mut stack: Vec<(usize, usize)> = vec![(producer, 0)];
    while let Some((cur, offset)) = stack.pop() {
        for &s in &topo.succs[cur] {
            match graph.layers[s].kind {
                LayerKind::Relu | LayerKind::MaxPool { .. } => stack.push((s, offset)),
                LayerKind::Relu6 => {
                    return Err(format!("{}: relu6 is not positively homogeneous", graph.layers[s].name));
                }
                LayerKind::AvgPoolGlobal => {
                    return Err(format!("{}: average pooling recodes into its own scale", graph.layers[s].name));
                }
                LayerKind::Concat => {
                    let pos = topo.preds[s].iter().position(|&p| p == cur).unwrap();
                    let before: usize =
                        topo.preds[s][..pos].iter().map(|&p| topo.shapes[p][0]).sum();
                    stack.push((s, offset + before));
                }
                LayerKind::Conv2d { .. } | LayerKind::DepthwiseConv2d { .. } | LayerKind::Dense => {
                    out.push(Consumer { layer: s, offset, kind: ConsumerKind::Weighted });
                }
                LayerKind::EwAdd => {
                    out.push(Consumer { layer: s, offset, kind: ConsumerKind::EwAdd });
                }
            }
        }
    }
    // deterministic order for factor averaging and application
    out.sort_by_key(|c| (c.layer, c.offset));
    Ok(out)
}

/// Per-tensor and per-slice MMSE scales of a weight tensor along `axis`
/// (0 = output slices, 1 = input slices; depthwise uses its channel axis).
/// All-zero slices report scale 0 and are resolved by the caller.
fn slice_scales(w: &crate::Tensor, axis: usize, spec: QuantSpec) -> Result<(f64, Vec<f64>), CleError> {
    let tensor = ppq(&w.data, spec, PPQ_DEFAULT_ITERS, PPQ_DEFAULT_TOL)?.scale as f64;
    let n = w.shape[axis];
    let (outer, ch, inner) = w.split_at_axis(axis);
    debug_assert_eq!(ch, n);
    let mut slices = Vec::with_capacity(n);
    let mut buf = Vec::new();
    for c in 0..n {
        buf.clear();
        for o in 0..outer {
            let base = (o * ch + c) * inner;
            buf.extend_from_slice(&w.data[base..base + inner]);
        }
        if buf.iter().all(|&v| v == 0.0) {
            slices.push(0.0);
        } else {
            slices.push(ppq(&buf, spec, PPQ_DEFAULT_ITERS, PPQ_DEFAULT_TOL)?.scale as f64);
        }
    }
    Ok((tensor, slices))
}

/// Consumer weight axis that indexes input channels.
fn input_axis(kind: LayerKind) -> usize {
    match kind {
        LayerKind::DepthwiseConv2d { .. } => 0,
        _ => 1,
    }
}

fn default_beta(producer_bits: u8, consumer_bits: u8) -> f32 {
    // weight the lower-bitwidth side more
    match producer_bits.cmp(&consumer_bits) {
        std::cmp::Ordering::Less => 0.5,
        std::cmp::Ordering::Equal => 0.0,
        std::cmp::Ordering::Greater => -0.5,
    }
}

/// Compute equalization factors for every interface whose producer is a
/// weighted layer and whose consumers are weighted or element-wise adds,
/// reachable through relu / maxpool / concat only.
///
/// Per channel m: 2·ln C_m = (1+β)·ln(ŝ_prod/Ŝ_row_m) + mean over consumers
/// of (1−β_c)·ln(Ŝ_col_m/ŝ_cons). Ew-add consumers carry β=1, so only the
/// producer term remains for them. The result is snapped to a power of two.
///
/// `beta_overrides` maps a producer layer name to a β used for all its
/// consumers.
pub fn cle_factors_4b(
    graph: &Graph,
    dof: &DofSet,
    beta_overrides: &BTreeMap<String, f32>,
) -> Result<CleFactors, CleError> {
    let topo = graph.validate().map_err(crate::error::DofError::from)?;
    let mut interfaces = Vec::new();
    let mut warnings = Vec::new();

    for d in &dof.layers {
        let li = d.layer;
        let consumers = match walk_consumers(graph, &topo, li) {
            Ok(c) => c,
            Err(reason) => {
                warnings.push(format!("{}: skipped ({reason})", d.name));
                continue;
            }
        };
        if consumers.is_empty() {
            continue;
        }
        let group = dof.domain[li][0];
        if !dof.groups[group].trainable {
            warnings.push(format!("{}: skipped (frozen output group)", d.name));
            continue;
        }

        let oc = dof.groups[group].channels;
        let (prod_tensor, prod_rows) = slice_scales(&d.weight, 0, d.weight_spec)?;

        // consumer-side slice scales, one vector per weighted consumer
        struct Side {
            beta: f32,
            cols: Option<(f64, Vec<f64>)>, // (tensor scale, per-column), offset applied
        }
        let mut sides = Vec::with_capacity(consumers.len());
        for c in &consumers {
            let beta = match c.kind {
                ConsumerKind::EwAdd => 1.0,
                ConsumerKind::Weighted => {
                    let cd = dof
                        .dof_index_of(c.layer)
                        .expect("weighted consumer has a DoF entry");
                    *beta_overrides
                        .get(&d.name)
                        .unwrap_or(&default_beta(d.weight_spec.bits, dof.layers[cd].weight_spec.bits))
                }
            };
            let cols = match c.kind {
                ConsumerKind::EwAdd => None,
                ConsumerKind::Weighted => {
                    let cd = dof.dof_index_of(c.layer).unwrap();
                    let cw = &dof.layers[cd].weight;
                    let axis = input_axis(graph.layers[c.layer].kind);
                    let (t, all) = slice_scales(cw, axis, dof.layers[cd].weight_spec)?;
                    let cols: Vec<f64> = all[c.offset..c.offset + oc].to_vec();
                    Some((t, cols))
                }
            };
            sides.push(Side { beta, cols });
        }
        let beta_mean = sides.iter().map(|s| s.beta as f64).sum::<f64>() / sides.len() as f64;

        let mut factors = Vec::with_capacity(oc);
        for m in 0..oc {
            if prod_rows[m] == 0.0 {
                warnings.push(format!("{}: channel {m} is all-zero, factor 1", d.name));
                factors.push(1.0);
                continue;
            }
            let mut second = 0.0f64;
            let mut degenerate = false;
            for s in &sides {
                if let Some((t, cols)) = &s.cols {
                    if cols[m] == 0.0 {
                        degenerate = true;
                        break;
                    }
                    second += (1.0 - s.beta as f64) * (cols[m] / t).ln();
                }
            }
            if degenerate {
                warnings.push(format!("{}: consumer slice {m} is all-zero, factor 1", d.name));
                factors.push(1.0);
                continue;
            }
            second /= sides.len() as f64;
            let first = (1.0 + beta_mean) * (prod_tensor / prod_rows[m]).ln();
            let log_c = 0.5 * (first + second);
            // snap to the nearest power of two so f32 scalings stay exact
            let exp = (log_c / std::f64::consts::LN_2).round() as i32;
            factors.push(2.0f32.powi(exp));
        }
        interfaces.push(CleInterface { producer: d.name.clone(), group, factors, beta: beta_mean as f32 });
    }

    Ok(CleFactors { interfaces, alpha_a: 1.0, alpha_w: 1.0, warnings })
}

/// Install the factors as vector activation scales: each interface group's
/// per-channel scale becomes α_a·s_a/C. Everything downstream (weight grids,
/// requant multipliers) follows through the offline plan; the DoF stays
/// fully trainable.
pub fn apply_cle_as_scales(dof: &DofSet, factors: &CleFactors) -> Result<DofSet, CleError> {
    let mut out = dof.clone();
    for itf in &factors.interfaces {
        let di = out
            .dof_index_by_name(&itf.producer)
            .ok_or_else(|| CleError::UnknownInterface(itf.producer.clone()))?;
        let LayerPlan::Weighted { out_group, .. } = out.plans[out.layers[di].layer] else {
            return Err(CleError::UnknownInterface(itf.producer.clone()));
        };
        if out_group != itf.group {
            return Err(CleError::UnknownInterface(format!(
                "{}: group {} does not match the layer's output group {out_group}",
                itf.producer, itf.group
            )));
        }
        let g = &mut out.groups[itf.group];
        if !g.trainable {
            return Err(CleError::NotEqualizable {
                producer: itf.producer.clone(),
                consumer: g.name.clone(),
                what: "non-homogeneous interface".into(),
            });
        }
        if itf.factors.len() != g.channels {
            return Err(CleError::BadFactorLength {
                interface: itf.producer.clone(),
                got: itf.factors.len(),
                expected: g.channels,
            });
        }
        for (m, &c) in itf.factors.iter().enumerate() {
            if !(c > 0.0) || !c.is_finite() {
                return Err(CleError::BadFactor { interface: itf.producer.clone(), channel: m, value: c });
            }
            g.s_a.data[m] = factors.alpha_a * g.s_a.data[m] / c;
        }
    }
    Ok(out)
}

/// Legacy preconditioning form: producer rows and bias scaled by C, consumer
/// input columns divided by C. Requires every consumer to be a weighted layer
/// behind a positively homogeneous path; the FP function is invariant.
pub fn apply_cle_to_weights(graph: &Graph, factors: &CleFactors) -> Result<Graph, CleError> {
    let topo = graph.validate().map_err(crate::error::DofError::from)?;
    let mut out = graph.clone();
    for itf in &factors.interfaces {
        let pi = graph
            .layer_index(&itf.producer)
            .map_err(|_| CleError::UnknownInterface(itf.producer.clone()))?;
        let consumers = walk_consumers(graph, &topo, pi).map_err(|reason| CleError::NotEqualizable {
            producer: itf.producer.clone(),
            consumer: String::new(),
            what: reason,
        })?;
        if let Some(c) = consumers.iter().find(|c| c.kind == ConsumerKind::EwAdd) {
            return Err(CleError::NotEqualizable {
                producer: itf.producer.clone(),
                consumer: graph.layers[c.layer].name.clone(),
                what: "element-wise add cannot absorb a weight rescaling".into(),
            });
        }
        let oc = graph.layers[pi].out_channels();
        if itf.factors.len() != oc {
            return Err(CleError::BadFactorLength {
                interface: itf.producer.clone(),
                got: itf.factors.len(),
                expected: oc,
            });
        }
        for (m, &c) in itf.factors.iter().enumerate() {
            if !(c > 0.0) || !c.is_finite() {
                return Err(CleError::BadFactor { interface: itf.producer.clone(), channel: m, value: c });
            }
        }

        {
            let l = &mut out.layers[pi];
            let w = l.weight.as_mut().unwrap();
            let per = w.numel() / oc;
            for m in 0..oc {
                let c = itf.factors[m] * factors.alpha_w;
                for k in 0..per {
                    w.data[m * per + k] *= c;
                }
            }
            if let Some(b) = l.bias.as_mut() {
                for m in 0..oc {
                    b.data[m] *= itf.factors[m] * factors.alpha_w;
                }
            }
        }
        for cons in &consumers {
            let l = &mut out.layers[cons.layer];
            let kind = l.kind;
            let w = l.weight.as_mut().unwrap();
            let axis = input_axis(kind);
            let (outer, ch, inner) = w.split_at_axis(axis);
            for m in 0..oc {
                let c = itf.factors[m] * factors.alpha_w;
                let col = cons.offset + m;
                debug_assert!(col < ch);
                for o in 0..outer {
                    let base = (o * ch + col) * inner;
                    for i in 0..inner {
                        w.data[base + i] /= c;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-weighted-layer MMSE of scalar fake quantization, for before/after
/// comparisons. Keyed in graph declaration order.
pub fn mmse_report(graph: &Graph, spec: QuantSpec) -> Result<Vec<(String, f64)>, CleError> {
    let mut out = Vec::new();
    for l in &graph.layers {
        if let Some(w) = &l.weight {
            let r = ppq(&w.data, spec, PPQ_DEFAULT_ITERS, PPQ_DEFAULT_TOL)?;
            out.push((l.name.clone(), r.mse));
        }
    }
    Ok(out)
}
