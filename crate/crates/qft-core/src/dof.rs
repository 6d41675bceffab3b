//! Degree-of-freedom compiler.
//!
//! `analyze_dof` walks a folded graph and finds the independent quantization
//! variables: weights, biases, one rescale factor per weighted layer, and one
//! shared activation-scale vector per "group" (a set of coded edges that must
//! agree on their scale, named after the layer whose output defines it).
//! `OfflinePlan::record` then writes the derivation of every deployment
//! constant onto an autodiff tape, so a loss on the simulated network
//! differentiates into all of them with no hand-written update rules, and
//! `record_student` appends the coded forward pass itself.
//!
//! Scale algebra per weighted layer, with input codes at scale `S_in` and
//! output codes at scale `S_out`:
//!
//!   left[m]  = 1 / S_in[m]              (input-channel axis)
//!   right[n] = S_out[n] * F[n]          (output-channel axis)
//!   Wq       = clip(round(W / (left x right)))
//!   acc      = sum_m Wq * (codes_in - Z_in) + round(b / right)
//!   codes    = clip(round(F * acc) + Z_out)
//!
//! so the online recode multiplier is the rescale DoF `F` itself and the
//! accumulator scale equals `right`. The `- Z_in` centering is algebraically
//! the bias residue `-Z_in * sum(Wq)`; exports fold it into the integer bias
//! so deployment can accumulate raw codes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::DofError;
use crate::graph::{Graph, LayerKind, Topology};
use crate::solvers::{
    calibrate_activations, ppq, ActRange, QuantSpec, INPUT_RANGE_KEY, PPQ_DEFAULT_ITERS,
    PPQ_DEFAULT_TOL,
};
use crate::tape::{Tape, VarId};
use crate::tensor::{round_half_away, Tensor};

/// Smallest value a trainable scale may take; optimizer steps clamp here.
pub const SCALE_FLOOR: f32 = 1e-8;

/// Clip bound of the quantized-bias grid (2^30, exactly representable).
pub const BIAS_CLIP: f32 = 1_073_741_824.0;

/// Snapshot format version.
pub const SNAPSHOT_FORMAT: u32 = 1;

/// Group index of the network input edge.
pub const INPUT_GROUP: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleRank {
    Layerwise,
    Channelwise,
}

/// Deployment target description. Bit widths cover the sub-byte range the
/// recode path supports; the accumulator must leave 8 bits of headroom over
/// `weight_bits + activation_bits` for the reduction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HwConfig {
    pub rescale_rank: RescaleRank,
    pub weight_bits: u8,
    pub activation_bits: u8,
    pub activations_signed: bool,
    pub accumulator_bits: u8,
    /// false = weight-only mode: weights snap to their grid but activations,
    /// biases and accumulators stay in full precision.
    pub activation_quant_enabled: bool,
}

impl Default for HwConfig {
    fn default() -> Self {
        HwConfig {
            rescale_rank: RescaleRank::Layerwise,
            weight_bits: 4,
            activation_bits: 8,
            activations_signed: false,
            accumulator_bits: 32,
            activation_quant_enabled: true,
        }
    }
}

impl HwConfig {
    pub fn validate(&self) -> Result<(), DofError> {
        for b in [self.weight_bits, self.activation_bits] {
            if !(2..=8).contains(&b) {
                return Err(DofError::BadBits(b));
            }
        }
        if self.accumulator_bits > 48 {
            return Err(DofError::BadBits(self.accumulator_bits));
        }
        if self.accumulator_bits < self.weight_bits + self.activation_bits + 8 {
            return Err(DofError::AccumulatorTooNarrow {
                acc: self.accumulator_bits,
                w: self.weight_bits,
                a: self.activation_bits,
            });
        }
        Ok(())
    }

    pub fn act_spec(&self) -> QuantSpec {
        if self.activations_signed {
            QuantSpec::signed(self.activation_bits)
        } else {
            QuantSpec::unsigned(self.activation_bits)
        }
    }

    pub fn weight_spec(&self) -> QuantSpec {
        QuantSpec::signed(self.weight_bits)
    }
}

/// Activation fused into a recode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    None,
    Relu,
    Relu6,
}

/// One coded-edge group: every edge in it shares this scale vector and zero
/// point. `name` is the layer whose floating-point output calibrates it.
#[derive(Debug, Clone)]
pub struct GroupState {
    pub name: String,
    pub channels: usize,
    pub s_a: Tensor,
    pub z: i32,
    pub trainable: bool,
}

/// Trainable state of one weighted layer.
#[derive(Debug, Clone)]
pub struct LayerDof {
    /// graph layer index
    pub layer: usize,
    pub name: String,
    pub weight: Tensor,
    /// zeros when the layer has no bias
    pub bias: Tensor,
    /// length 1 (layerwise) or out_channels (channelwise)
    pub f_hat: Tensor,
    pub weight_spec: QuantSpec,
}

/// Lowering recipe per graph layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerPlan {
    Weighted { dof: usize, out_group: usize, act: Act },
    /// relu/relu6 absorbed into its producer's recode
    FusedInto { producer: usize },
    /// order-preserving on codes, no recode
    MaxPool,
    AvgPool { out_group: usize, act: Act },
    EwAdd { out_group: usize, act: Act },
    /// channel concatenation of already-coded inputs; no recode
    Concat,
}

#[derive(Debug, Clone)]
pub struct DofSet {
    pub hw: HwConfig,
    /// weighted layers in topological order
    pub layers: Vec<LayerDof>,
    /// groups\[0\] is the input edge (never trainable)
    pub groups: Vec<GroupState>,
    /// per graph layer
    pub plans: Vec<LayerPlan>,
    /// group parts of each layer's coded output, per graph layer
    pub domain: Vec<Vec<usize>>,
    /// (concat layer, group a, group b): zero points that must agree
    pub z_links: Vec<(String, usize, usize)>,
    pub notes: Vec<String>,
}

fn src_parts(domain: &[Vec<usize>], preds: &[usize]) -> Vec<usize> {
    match preds.first() {
        Some(&p) => domain[p].clone(),
        None => vec![INPUT_GROUP],
    }
}

impl DofSet {
    pub fn dof_index_of(&self, graph_layer: usize) -> Option<usize> {
        self.layers.iter().position(|d| d.layer == graph_layer)
    }

    pub fn dof_index_by_name(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|d| d.name == name)
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    /// Group parts feeding `layer`'s first input.
    pub fn in_parts(&self, topo: &Topology, layer: usize) -> Vec<usize> {
        src_parts(&self.domain, &topo.preds[layer])
    }

    /// Shared zero point of a (possibly multi-part) domain. Parts are forced
    /// to agree at init time, so the first part is authoritative.
    pub fn parts_z(&self, parts: &[usize]) -> i32 {
        self.groups[parts[0]].z
    }

    pub fn trainable_group_count(&self) -> usize {
        self.groups.iter().filter(|g| g.trainable).count()
    }
}

pub fn analyze_dof(graph: &Graph, hw: &HwConfig) -> Result<DofSet, DofError> {
    analyze_dof_with(graph, hw, &BTreeSet::new())
}

/// `wide_weight_layers` name layers whose weights stay at 8 bits (mixed
/// precision); everything else uses `hw.weight_bits`.
pub fn analyze_dof_with(
    graph: &Graph,
    hw: &HwConfig,
    wide_weight_layers: &BTreeSet<String>,
) -> Result<DofSet, DofError> {
    hw.validate()?;
    let topo = graph.validate()?;
    let n = graph.layers.len();
    for l in &graph.layers {
        if l.bn.is_some() {
            return Err(DofError::Unsupported {
                layer: l.name.clone(),
                what: "batchnorm must be folded before quantization".into(),
            });
        }
    }

    // Activations can only ride on the recode of the layer that feeds them,
    // and only when they are its sole consumer; anything else would need a
    // second recode per edge, which the target does not have.
    let mut fold_into: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        if !matches!(graph.layers[i].kind, LayerKind::Relu | LayerKind::Relu6) {
            continue;
        }
        let Some(&p) = topo.preds[i].first() else {
            return Err(DofError::Unsupported {
                layer: graph.layers[i].name.clone(),
                what: "activation reads the network input directly".into(),
            });
        };
        let pk = graph.layers[p].kind;
        let recodes = pk.is_weighted() || matches!(pk, LayerKind::EwAdd | LayerKind::AvgPoolGlobal);
        if !recodes || topo.succs[p].len() != 1 {
            return Err(DofError::Unsupported {
                layer: graph.layers[i].name.clone(),
                what: "activation must be the sole consumer of a compute layer".into(),
            });
        }
        fold_into[i] = Some(p);
    }

    let in_ch = graph.input_shape[0];
    let mut groups = vec![GroupState {
        name: INPUT_RANGE_KEY.to_string(),
        channels: in_ch,
        s_a: Tensor::filled(&[in_ch], 1.0),
        z: 0,
        trainable: false,
    }];
    let mut layers: Vec<LayerDof> = Vec::new();
    let mut plans: Vec<Option<LayerPlan>> = vec![None; n];
    let mut domain: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut z_links: Vec<(String, usize, usize)> = Vec::new();
    let mut notes: Vec<String> = Vec::new();

    for &i in &topo.order {
        let l = &graph.layers[i];
        let fused = topo.succs[i].first().copied().filter(|&s| fold_into[s] == Some(i));
        let act = match fused.map(|s| graph.layers[s].kind) {
            Some(LayerKind::Relu) => Act::Relu,
            Some(LayerKind::Relu6) => Act::Relu6,
            _ => Act::None,
        };
        let group_name = match fused {
            Some(s) => graph.layers[s].name.clone(),
            None => l.name.clone(),
        };
        match l.kind {
            LayerKind::Conv2d { .. } | LayerKind::DepthwiseConv2d { .. } | LayerKind::Dense => {
                let oc = l.out_channels();
                let gi = groups.len();
                // relu6 pins the group range to [0, 6]; its scale must stay
                // where calibration put it or the cap stops being a cap.
                groups.push(GroupState {
                    name: group_name,
                    channels: oc,
                    s_a: Tensor::filled(&[oc], 1.0),
                    z: 0,
                    trainable: act != Act::Relu6,
                });
                let bits = if wide_weight_layers.contains(&l.name) { 8 } else { hw.weight_bits };
                let weight = match &l.weight {
                    Some(w) => w.clone(),
                    None => {
                        return Err(DofError::Unsupported {
                            layer: l.name.clone(),
                            what: "weighted layer has no kernel".into(),
                        })
                    }
                };
                let bias = l.bias.clone().unwrap_or_else(|| Tensor::zeros(&[oc]));
                let fan_in = weight.numel() / oc;
                let worst =
                    fan_in as f64 * QuantSpec::signed(bits).qmax() as f64 * hw.act_spec().qmax() as f64;
                if worst >= (1u64 << 24) as f64 {
                    notes.push(format!(
                        "layer {:?}: worst-case accumulator {:.0} exceeds the exact f32 integer range; \
                         conformance checking is the authority on real overflows",
                        l.name, worst
                    ));
                }
                let f_len = match hw.rescale_rank {
                    RescaleRank::Layerwise => 1,
                    RescaleRank::Channelwise => oc,
                };
                layers.push(LayerDof {
                    layer: i,
                    name: l.name.clone(),
                    weight,
                    bias,
                    f_hat: Tensor::filled(&[f_len], 1.0),
                    weight_spec: QuantSpec::signed(bits),
                });
                plans[i] = Some(LayerPlan::Weighted { dof: layers.len() - 1, out_group: gi, act });
                domain[i] = vec![gi];
                if let Some(s) = fused {
                    plans[s] = Some(LayerPlan::FusedInto { producer: i });
                    domain[s] = vec![gi];
                }
            }
            LayerKind::Relu | LayerKind::Relu6 => {
                debug_assert!(plans[i].is_some(), "activation fused when its producer was visited");
            }
            LayerKind::MaxPool { .. } => {
                domain[i] = src_parts(&domain, &topo.preds[i]);
                plans[i] = Some(LayerPlan::MaxPool);
            }
            LayerKind::AvgPoolGlobal => {
                let ch = topo.shapes[i][0];
                let gi = groups.len();
                groups.push(GroupState {
                    name: group_name,
                    channels: ch,
                    s_a: Tensor::filled(&[ch], 1.0),
                    z: 0,
                    trainable: act != Act::Relu6,
                });
                plans[i] = Some(LayerPlan::AvgPool { out_group: gi, act });
                domain[i] = vec![gi];
                if let Some(s) = fused {
                    plans[s] = Some(LayerPlan::FusedInto { producer: i });
                    domain[s] = vec![gi];
                }
            }
            LayerKind::EwAdd => {
                let ch = topo.shapes[i][0];
                let gi = groups.len();
                groups.push(GroupState {
                    name: group_name,
                    channels: ch,
                    s_a: Tensor::filled(&[ch], 1.0),
                    z: 0,
                    trainable: act != Act::Relu6,
                });
                plans[i] = Some(LayerPlan::EwAdd { out_group: gi, act });
                domain[i] = vec![gi];
                if let Some(s) = fused {
                    plans[s] = Some(LayerPlan::FusedInto { producer: i });
                    domain[s] = vec![gi];
                }
            }
            LayerKind::Concat => {
                let mut parts = Vec::new();
                for &p in &topo.preds[i] {
                    parts.extend(domain[p].iter().copied());
                }
                for k in 1..parts.len() {
                    if parts[k] != parts[0] {
                        z_links.push((l.name.clone(), parts[0], parts[k]));
                    }
                }
                domain[i] = parts;
                plans[i] = Some(LayerPlan::Concat);
            }
        }
    }

    if hw.rescale_rank == RescaleRank::Channelwise {
        let mut consumers: BTreeMap<usize, usize> = BTreeMap::new();
        for d in &layers {
            for g in src_parts(&domain, &topo.preds[d.layer]) {
                *consumers.entry(g).or_insert(0) += 1;
            }
        }
        for (&g, &cnt) in &consumers {
            if cnt > 1 {
                notes.push(format!(
                    "group {:?} feeds {} weighted consumers; per-channel rescales share one \
                     activation scale across that fan-out",
                    groups[g].name, cnt
                ));
            }
        }
    }

    let plans = plans
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            p.ok_or_else(|| DofError::Unsupported {
                layer: graph.layers[i].name.clone(),
                what: "no lowering".into(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(DofSet { hw: *hw, layers, groups, plans, domain, z_links, notes })
}

// ── scale algebra as standalone values ──────────────────────────────────────

/// Factorized weight scale of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DualScale {
    /// per input channel, `1 / S_in`
    pub left: Vec<f32>,
    /// per output channel, `S_out * F`; also the accumulator scale
    pub right: Vec<f32>,
}

pub fn derive_scales(s_a_in: &[f32], s_a_out: &[f32], f_hat: &[f32]) -> Result<DualScale, DofError> {
    if f_hat.len() != 1 && f_hat.len() != s_a_out.len() {
        return Err(crate::error::TensorError::OpShapeMismatch {
            op: "derive_scales",
            lhs: vec![s_a_out.len()],
            rhs: vec![f_hat.len()],
        }
        .into());
    }
    let mut left = Vec::with_capacity(s_a_in.len());
    for &s in s_a_in {
        if !(s > 0.0) {
            return Err(DofError::NonPositiveScale(format!("input activation scale {s}")));
        }
        left.push(1.0 / s);
    }
    let mut right = Vec::with_capacity(s_a_out.len());
    for (c, &s) in s_a_out.iter().enumerate() {
        if !(s > 0.0) {
            return Err(DofError::NonPositiveScale(format!("output activation scale {s}")));
        }
        let f = if f_hat.len() == 1 { f_hat[0] } else { f_hat[c] };
        if !(f > 0.0) {
            return Err(DofError::NonPositiveScale(format!("rescale factor {f}")));
        }
        right.push(s * f);
    }
    Ok(DualScale { left, right })
}

/// Inverse of `derive_scales`: recovers `(S_in, F)` given the output scale.
pub fn invert_scales(dual: &DualScale, s_a_out: &[f32]) -> Result<(Vec<f32>, Vec<f32>), DofError> {
    if dual.right.len() != s_a_out.len() {
        return Err(crate::error::TensorError::OpShapeMismatch {
            op: "invert_scales",
            lhs: vec![dual.right.len()],
            rhs: vec![s_a_out.len()],
        }
        .into());
    }
    let mut s_in = Vec::with_capacity(dual.left.len());
    for &l in &dual.left {
        if !(l > 0.0) {
            return Err(DofError::NonPositiveScale(format!("left scale {l}")));
        }
        s_in.push(1.0 / l);
    }
    let mut f = Vec::with_capacity(dual.right.len());
    for (&r, &s) in dual.right.iter().zip(s_a_out) {
        if !(r > 0.0) || !(s > 0.0) {
            return Err(DofError::NonPositiveScale(format!("right scale {r} / output scale {s}")));
        }
        f.push(r / s);
    }
    Ok((s_in, f))
}

/// Integer bias with the zero-point residue folded in:
/// `b_hat[n] = round(b[n] / S_acc[n]) - Z_in * sum(Wq[n, ..])`.
/// After it, the decoded pre-activation has zero offset exactly.
pub fn quantize_bias_residue(
    layer: &str,
    bias: &[f32],
    s_acc: &[f32],
    z_in: i32,
    w_codes: &Tensor,
    acc_bits: u8,
) -> Result<Vec<i64>, DofError> {
    let oc = w_codes.shape[0];
    if bias.len() != oc || s_acc.len() != oc {
        return Err(crate::error::TensorError::OpShapeMismatch {
            op: "quantize_bias_residue",
            lhs: vec![bias.len(), s_acc.len()],
            rhs: vec![oc],
        }
        .into());
    }
    let per = w_codes.numel() / oc;
    let limit = 1i64 << (acc_bits - 1);
    let mut out = Vec::with_capacity(oc);
    for c in 0..oc {
        if !(s_acc[c] > 0.0) {
            return Err(DofError::NonPositiveScale(format!("accumulator scale {}", s_acc[c])));
        }
        let q = round_half_away((bias[c] / s_acc[c]) as f64) as i64;
        let mut code_sum = 0i64;
        for &w in &w_codes.data[c * per..(c + 1) * per] {
            if w.fract() != 0.0 {
                return Err(crate::error::TensorError::BadAttr {
                    op: "quantize_bias_residue",
                    what: format!("weight code {w} is not integral"),
                }
                .into());
            }
            code_sum += w as i64;
        }
        let bh = q - z_in as i64 * code_sum;
        if bh.abs() >= limit {
            return Err(DofError::BiasOverflow { layer: layer.to_string(), value: bh });
        }
        out.push(bh);
    }
    Ok(out)
}

/// Host-side input encoder. Arithmetic mirrors the tape recode exactly:
/// the reciprocal is taken in f32, the multiply in f64, rounding half away
/// from zero, then the zero point, then the clip.
pub fn encode_codes(x: &Tensor, s_a: &Tensor, z: i32, spec: QuantSpec) -> Result<Vec<i32>, DofError> {
    if x.rank() < 2 {
        return Err(crate::error::TensorError::BadRank {
            op: "encode_codes",
            expected: 2,
            shape: x.shape.clone(),
        }
        .into());
    }
    let ch = x.shape[1];
    if s_a.numel() != ch {
        return Err(crate::error::TensorError::BadBroadcast {
            op: "encode_codes",
            axis: 1,
            shape: x.shape.clone(),
            vec_len: s_a.numel(),
        }
        .into());
    }
    let (outer, _, inner) = x.split_at_axis(1);
    let (qlo, qhi) = (spec.qmin(), spec.qmax());
    let mut out = Vec::with_capacity(x.numel());
    for o in 0..outer {
        for c in 0..ch {
            let s = s_a.data[c];
            if !(s > 0.0) {
                return Err(DofError::NonPositiveScale(format!("input scale {s}")));
            }
            let f = (1.0f32 / s) as f64;
            for i in 0..inner {
                let xv = x.data[(o * ch + c) * inner + i];
                let code = (round_half_away(f * xv as f64) as f32 + z as f32).clamp(qlo, qhi);
                out.push(code as i32);
            }
        }
    }
    Ok(out)
}

// ── the recorded plan ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct OfflinePlan {
    pub topo: Topology,
    /// graph layer whose decoded output is the distillation feature
    pub feature: usize,
}

pub fn build_offline(dof: &DofSet, graph: &Graph, hw: &HwConfig) -> Result<OfflinePlan, DofError> {
    if *hw != dof.hw {
        return Err(DofError::SnapshotMismatch(
            "hardware description differs from the analyzed one".into(),
        ));
    }
    if dof.plans.len() != graph.layers.len() {
        return Err(DofError::SnapshotMismatch(format!(
            "plan covers {} layers, graph has {}",
            dof.plans.len(),
            graph.layers.len()
        )));
    }
    let topo = graph.validate()?;
    let feature = match &graph.feature_layer {
        Some(f) => graph.layer_index(f)?,
        None => topo.output,
    };
    Ok(OfflinePlan { topo, feature })
}

/// Which parameter families the tape treats as trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyMask {
    pub weights: bool,
    pub biases: bool,
    pub act_scales: bool,
    pub rescales: bool,
}

impl FamilyMask {
    pub fn all() -> Self {
        FamilyMask { weights: true, biases: true, act_scales: true, rescales: true }
    }

    /// weights and biases move, the quantization grid does not
    pub fn frozen_scales() -> Self {
        FamilyMask { weights: true, biases: true, act_scales: false, rescales: false }
    }

    pub fn none() -> Self {
        FamilyMask { weights: false, biases: false, act_scales: false, rescales: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    Weight,
    Bias,
    Rescale,
    ActScale,
}

/// A tape leaf tied back to the DofSet slot it was loaded from.
#[derive(Debug, Clone, Copy)]
pub struct LeafBinding {
    pub kind: LeafKind,
    /// index into `DofSet::layers` (or `DofSet::groups` for ActScale)
    pub index: usize,
    pub id: VarId,
}

/// Tape nodes of one recorded offline plan.
pub struct PlanNodes {
    pub s_a: Vec<VarId>,
    pub w: Vec<VarId>,
    pub b: Vec<VarId>,
    pub f: Vec<VarId>,
    pub s_wl: Vec<VarId>,
    pub s_wr: Vec<VarId>,
    pub wq: Vec<VarId>,
    pub bq: Vec<VarId>,
    /// per graph layer: that layer's output-scale vector (parts concatenated)
    pub domain_scale: Vec<VarId>,
    /// global-average recode multipliers, per graph layer
    pub avg_m: BTreeMap<usize, VarId>,
    /// per-input recode multipliers of elementwise adds
    pub ew_g: BTreeMap<usize, (VarId, VarId)>,
}

impl PlanNodes {
    /// Every parameter leaf in a deterministic order.
    pub fn bindings(&self, dof: &DofSet) -> Vec<LeafBinding> {
        let mut out = Vec::new();
        for i in 0..dof.layers.len() {
            out.push(LeafBinding { kind: LeafKind::Weight, index: i, id: self.w[i] });
            out.push(LeafBinding { kind: LeafKind::Bias, index: i, id: self.b[i] });
            out.push(LeafBinding { kind: LeafKind::Rescale, index: i, id: self.f[i] });
        }
        for g in 0..dof.groups.len() {
            out.push(LeafBinding { kind: LeafKind::ActScale, index: g, id: self.s_a[g] });
        }
        out
    }
}

impl OfflinePlan {
    /// Record the derivation of every deployment constant. Node order is a
    /// pure function of the DofSet, so repeated recordings line up leaf for
    /// leaf.
    pub fn record(
        &self,
        graph: &Graph,
        dof: &DofSet,
        tape: &mut Tape,
        mask: &FamilyMask,
    ) -> Result<PlanNodes, DofError> {
        let s_a: Vec<VarId> = dof
            .groups
            .iter()
            .map(|g| tape.leaf(g.s_a.clone(), mask.act_scales && g.trainable))
            .collect();
        let w: Vec<VarId> =
            dof.layers.iter().map(|d| tape.leaf(d.weight.clone(), mask.weights)).collect();
        let b: Vec<VarId> =
            dof.layers.iter().map(|d| tape.leaf(d.bias.clone(), mask.biases)).collect();
        let f: Vec<VarId> =
            dof.layers.iter().map(|d| tape.leaf(d.f_hat.clone(), mask.rescales)).collect();

        let n = graph.layers.len();
        let mut domain_scale = vec![s_a[INPUT_GROUP]; n];
        for &i in &self.topo.order {
            let parts = &dof.domain[i];
            domain_scale[i] = if parts.len() == 1 {
                s_a[parts[0]]
            } else {
                let ids: Vec<VarId> = parts.iter().map(|&g| s_a[g]).collect();
                tape.concat(&ids, 0)?
            };
        }

        let mut s_wl = Vec::with_capacity(dof.layers.len());
        let mut s_wr = Vec::with_capacity(dof.layers.len());
        let mut wq = Vec::with_capacity(dof.layers.len());
        let mut bq = Vec::with_capacity(dof.layers.len());
        for (di, d) in dof.layers.iter().enumerate() {
            let li = d.layer;
            let LayerPlan::Weighted { out_group, .. } = dof.plans[li] else {
                return Err(DofError::SnapshotMismatch("weighted table out of sync".into()));
            };
            let s_in = match self.topo.preds[li].first() {
                Some(&p) => domain_scale[p],
                None => s_a[INPUT_GROUP],
            };
            let left = tape.reciprocal(s_in);
            let right = tape.mul(s_a[out_group], f[di])?;
            let in_axis =
                if matches!(graph.layers[li].kind, LayerKind::DepthwiseConv2d { .. }) { 0 } else { 1 };
            let over_left = tape.div_bcast(w[di], left, in_axis)?;
            let ratio = tape.div_bcast(over_left, right, 0)?;
            let spec = d.weight_spec;
            let codes = tape.round_ste_clip(ratio, spec.qmin(), spec.qmax())?;
            let bratio = tape.div(b[di], right)?;
            let bcodes = tape.round_ste_clip(bratio, -BIAS_CLIP, BIAS_CLIP)?;
            s_wl.push(left);
            s_wr.push(right);
            wq.push(codes);
            bq.push(bcodes);
        }

        let mut avg_m = BTreeMap::new();
        let mut ew_g = BTreeMap::new();
        for &i in &self.topo.order {
            match dof.plans[i] {
                LayerPlan::AvgPool { out_group, .. } => {
                    let (s_in, hw_count) = match self.topo.preds[i].first() {
                        Some(&p) => {
                            (domain_scale[p], self.topo.shapes[p][1] * self.topo.shapes[p][2])
                        }
                        None => {
                            (s_a[INPUT_GROUP], graph.input_shape[1] * graph.input_shape[2])
                        }
                    };
                    let denom = tape.mul_const(s_a[out_group], hw_count as f32);
                    let m = tape.div(s_in, denom)?;
                    avg_m.insert(i, m);
                }
                LayerPlan::EwAdd { out_group, .. } => {
                    let p0 = self.topo.preds[i][0];
                    let p1 = self.topo.preds[i][1];
                    let g1 = tape.div(domain_scale[p0], s_a[out_group])?;
                    let g2 = tape.div(domain_scale[p1], s_a[out_group])?;
                    ew_g.insert(i, (g1, g2));
                }
                _ => {}
            }
        }

        Ok(PlanNodes { s_a, w, b, f, s_wl, s_wr, wq, bq, domain_scale, avg_m, ew_g })
    }
}

// ── the simulated (student) forward pass ────────────────────────────────────

pub struct StudentNodes {
    /// per graph layer: codes (or real values in weight-only mode)
    pub outputs: Vec<VarId>,
    pub input_codes: Option<VarId>,
    /// decoded feature tap
    pub feature: VarId,
    /// decoded network output
    pub logits: VarId,
}

pub fn record_student(
    graph: &Graph,
    plan: &OfflinePlan,
    dof: &DofSet,
    nodes: &PlanNodes,
    tape: &mut Tape,
    input: &Tensor,
) -> Result<StudentNodes, DofError> {
    let x0 = tape.constant(input.clone());
    if !dof.hw.activation_quant_enabled {
        return record_student_fp(graph, plan, dof, nodes, tape, x0);
    }
    let aq = dof.hw.act_spec();
    let (qlo, qhi) = (aq.qmin(), aq.qmax());
    let topo = &plan.topo;
    let f_in = tape.reciprocal(nodes.s_a[INPUT_GROUP]);
    let codes0 = tape.requant(x0, f_in, dof.groups[INPUT_GROUP].z as f32, qlo, qhi, false)?;
    let n = graph.layers.len();
    let mut outs: Vec<VarId> = vec![codes0; n];
    for &i in &topo.order {
        let x_in = match topo.preds[i].first() {
            Some(&p) => outs[p],
            None => codes0,
        };
        let z_in = match topo.preds[i].first() {
            Some(&p) => dof.parts_z(&dof.domain[p]),
            None => dof.groups[INPUT_GROUP].z,
        };
        let out = match dof.plans[i] {
            LayerPlan::Weighted { dof: di, out_group, act } => {
                let xc = tape.add_const(x_in, -(z_in as f32));
                let acc = match graph.layers[i].kind {
                    LayerKind::Conv2d { stride, pad } => tape.conv2d(xc, nodes.wq[di], stride, pad)?,
                    LayerKind::DepthwiseConv2d { stride, pad } => {
                        tape.depthwise_conv2d(xc, nodes.wq[di], stride, pad)?
                    }
                    LayerKind::Dense => tape.matmul(xc, nodes.wq[di], true)?,
                    _ => unreachable!("weighted plan on non-weighted layer"),
                };
                let accb = tape.add_bcast(acc, nodes.bq[di], 1)?;
                let zo = dof.groups[out_group].z as f32;
                tape.requant(accb, nodes.f[di], zo, qlo, qhi, act != Act::None)?
            }
            LayerPlan::FusedInto { producer } => outs[producer],
            LayerPlan::MaxPool => {
                let LayerKind::MaxPool { kernel, stride } = graph.layers[i].kind else {
                    unreachable!("maxpool plan on non-maxpool layer")
                };
                tape.maxpool(x_in, kernel, stride)?
            }
            LayerPlan::AvgPool { out_group, act } => {
                let xc = tape.add_const(x_in, -(z_in as f32));
                let summed = tape.sum_spatial(xc)?;
                let zo = dof.groups[out_group].z as f32;
                tape.requant(summed, nodes.avg_m[&i], zo, qlo, qhi, act != Act::None)?
            }
            LayerPlan::EwAdd { out_group, act } => {
                let p0 = topo.preds[i][0];
                let p1 = topo.preds[i][1];
                let z1 = dof.parts_z(&dof.domain[p0]);
                let z2 = dof.parts_z(&dof.domain[p1]);
                let x1 = tape.add_const(outs[p0], -(z1 as f32));
                let x2 = tape.add_const(outs[p1], -(z2 as f32));
                let (g1, g2) = nodes.ew_g[&i];
                let zo = dof.groups[out_group].z as f32;
                tape.requant2(x1, x2, g1, g2, zo, qlo, qhi, act != Act::None)?
            }
            LayerPlan::Concat => {
                let ins: Vec<VarId> = topo.preds[i].iter().map(|&p| outs[p]).collect();
                tape.concat(&ins, 1)?
            }
        };
        outs[i] = out;
    }
    let feature = decode(tape, dof, nodes, &outs, plan.feature)?;
    let logits = if topo.output == plan.feature {
        feature
    } else {
        decode(tape, dof, nodes, &outs, topo.output)?
    };
    Ok(StudentNodes { outputs: outs, input_codes: Some(codes0), feature, logits })
}

fn decode(
    tape: &mut Tape,
    dof: &DofSet,
    nodes: &PlanNodes,
    outs: &[VarId],
    layer: usize,
) -> Result<VarId, DofError> {
    let z = dof.parts_z(&dof.domain[layer]) as f32;
    let centered = tape.add_const(outs[layer], -z);
    Ok(tape.mul_bcast(centered, nodes.domain_scale[layer], 1)?)
}

/// Weight-only mode: weights live on their quantized grid, everything else
/// stays in full precision.
fn record_student_fp(
    graph: &Graph,
    plan: &OfflinePlan,
    dof: &DofSet,
    nodes: &PlanNodes,
    tape: &mut Tape,
    x0: VarId,
) -> Result<StudentNodes, DofError> {
    let topo = &plan.topo;
    let n = graph.layers.len();
    let mut outs: Vec<VarId> = vec![x0; n];
    for &i in &topo.order {
        let x_in = match topo.preds[i].first() {
            Some(&p) => outs[p],
            None => x0,
        };
        let out = match dof.plans[i] {
            LayerPlan::Weighted { dof: di, act, .. } => {
                let in_axis = if matches!(graph.layers[i].kind, LayerKind::DepthwiseConv2d { .. }) {
                    0
                } else {
                    1
                };
                let w1 = tape.mul_bcast(nodes.wq[di], nodes.s_wl[di], in_axis)?;
                let w2 = tape.mul_bcast(w1, nodes.s_wr[di], 0)?;
                let y = match graph.layers[i].kind {
                    LayerKind::Conv2d { stride, pad } => tape.conv2d(x_in, w2, stride, pad)?,
                    LayerKind::DepthwiseConv2d { stride, pad } => {
                        tape.depthwise_conv2d(x_in, w2, stride, pad)?
                    }
                    LayerKind::Dense => tape.matmul(x_in, w2, true)?,
                    _ => unreachable!("weighted plan on non-weighted layer"),
                };
                let yb = tape.add_bcast(y, nodes.b[di], 1)?;
                apply_act(tape, yb, act)
            }
            LayerPlan::FusedInto { producer } => outs[producer],
            LayerPlan::MaxPool => {
                let LayerKind::MaxPool { kernel, stride } = graph.layers[i].kind else {
                    unreachable!("maxpool plan on non-maxpool layer")
                };
                tape.maxpool(x_in, kernel, stride)?
            }
            LayerPlan::AvgPool { act, .. } => {
                let y = tape.avgpool_global(x_in)?;
                apply_act(tape, y, act)
            }
            LayerPlan::EwAdd { act, .. } => {
                let p0 = topo.preds[i][0];
                let p1 = topo.preds[i][1];
                let y = tape.add(outs[p0], outs[p1])?;
                apply_act(tape, y, act)
            }
            LayerPlan::Concat => {
                let ins: Vec<VarId> = topo.preds[i].iter().map(|&p| outs[p]).collect();
                tape.concat(&ins, 1)?
            }
        };
        outs[i] = out;
    }
    let feature = outs[plan.feature];
    let logits = outs[topo.output];
    Ok(StudentNodes { outputs: outs, input_codes: None, feature, logits })
}

fn apply_act(tape: &mut Tape, x: VarId, act: Act) -> VarId {
    match act {
        Act::None => x,
        Act::Relu => tape.relu(x),
        Act::Relu6 => tape.relu6(x),
    }
}

// ── numeric exports ──────────────────────────────────────────────────────────

/// Deployment constants for one weighted layer.
#[derive(Debug, Clone)]
pub struct LayerConsts {
    pub layer: usize,
    pub name: String,
    /// integer-valued weight codes
    pub wq: Tensor,
    /// integer bias with the zero-point residue folded in
    pub b_hat: Vec<i64>,
    pub s_wl: Tensor,
    pub s_wr: Tensor,
    /// online recode multiplier
    pub f_hat: Tensor,
    pub z_in: i32,
    pub z_out: i32,
    pub act: Act,
}

/// Recode constants for non-weighted layers that still recode.
#[derive(Debug, Clone)]
pub enum OnlineConsts {
    AvgPool { m: Tensor, z_in: i32, z_out: i32, act: Act },
    EwAdd { g1: Tensor, g2: Tensor, z1: i32, z2: i32, z_out: i32, act: Act },
}

pub struct PlanExports {
    pub weighted: Vec<LayerConsts>,
    /// keyed by graph layer index
    pub online: BTreeMap<usize, OnlineConsts>,
}

pub fn execute_plan(graph: &Graph, plan: &OfflinePlan, dof: &DofSet) -> Result<PlanExports, DofError> {
    let mut tape = Tape::new();
    let nodes = plan.record(graph, dof, &mut tape, &FamilyMask::none())?;
    let acc_limit = 1i64 << (dof.hw.accumulator_bits - 1);
    let topo = &plan.topo;
    let mut weighted = Vec::with_capacity(dof.layers.len());
    for (di, d) in dof.layers.iter().enumerate() {
        let li = d.layer;
        let LayerPlan::Weighted { out_group, act, .. } = dof.plans[li] else {
            unreachable!("weighted table out of sync")
        };
        let wq = tape.value(nodes.wq[di]).clone();
        let bqv = tape.value(nodes.bq[di]);
        let z_in = match topo.preds[li].first() {
            Some(&p) => dof.parts_z(&dof.domain[p]),
            None => dof.groups[INPUT_GROUP].z,
        };
        let z_out = dof.groups[out_group].z;
        let oc = wq.shape[0];
        let per = wq.numel() / oc;
        let mut b_hat = Vec::with_capacity(oc);
        for c in 0..oc {
            let bv = bqv.data[c];
            // a saturated bias code means the grid cannot hold this bias
            if bv.abs() >= BIAS_CLIP {
                return Err(DofError::BiasOverflow { layer: d.name.clone(), value: bv as i64 });
            }
            let code_sum: i64 = wq.data[c * per..(c + 1) * per].iter().map(|&q| q as i64).sum();
            let bh = bv as i64 - z_in as i64 * code_sum;
            if bh.abs() >= acc_limit {
                return Err(DofError::BiasOverflow { layer: d.name.clone(), value: bh });
            }
            b_hat.push(bh);
        }
        weighted.push(LayerConsts {
            layer: li,
            name: d.name.clone(),
            wq,
            b_hat,
            s_wl: tape.value(nodes.s_wl[di]).clone(),
            s_wr: tape.value(nodes.s_wr[di]).clone(),
            f_hat: tape.value(nodes.f[di]).clone(),
            z_in,
            z_out,
            act,
        });
    }
    let mut online = BTreeMap::new();
    for (&i, &m) in &nodes.avg_m {
        let LayerPlan::AvgPool { out_group, act } = dof.plans[i] else {
            unreachable!("avgpool table out of sync")
        };
        let z_in = match topo.preds[i].first() {
            Some(&p) => dof.parts_z(&dof.domain[p]),
            None => dof.groups[INPUT_GROUP].z,
        };
        online.insert(
            i,
            OnlineConsts::AvgPool {
                m: tape.value(m).clone(),
                z_in,
                z_out: dof.groups[out_group].z,
                act,
            },
        );
    }
    for (&i, &(g1, g2)) in &nodes.ew_g {
        let LayerPlan::EwAdd { out_group, act } = dof.plans[i] else {
            unreachable!("ew_add table out of sync")
        };
        let p0 = topo.preds[i][0];
        let p1 = topo.preds[i][1];
        online.insert(
            i,
            OnlineConsts::EwAdd {
                g1: tape.value(g1).clone(),
                g2: tape.value(g2).clone(),
                z1: dof.parts_z(&dof.domain[p0]),
                z2: dof.parts_z(&dof.domain[p1]),
                z_out: dof.groups[out_group].z,
                act,
            },
        );
    }
    Ok(PlanExports { weighted, online })
}

/// Re-derives every exported constant from the DoF values and checks the
/// structural identities: integral in-range weight codes, left scales equal
/// to the reciprocal of the feeding group's scale, right scales equal to
/// `S_out * F`, and exact cancellation of the input zero point.
pub fn constraint_audit(graph: &Graph, plan: &OfflinePlan, dof: &DofSet) -> Result<(), DofError> {
    let ex = execute_plan(graph, plan, dof)?;
    let topo = &plan.topo;
    for (di, lc) in ex.weighted.iter().enumerate() {
        let d = &dof.layers[di];
        let spec = d.weight_spec;
        for &q in &lc.wq.data {
            if q.fract() != 0.0 || q < spec.qmin() || q > spec.qmax() {
                return Err(DofError::Conflict {
                    layer: lc.name.clone(),
                    what: format!("weight code {q} outside the {}-bit range", spec.bits),
                });
            }
        }
        let parts = dof.in_parts(topo, lc.layer);
        let mut k = 0usize;
        for &g in &parts {
            for c in 0..dof.groups[g].channels {
                let expect = 1.0f32 / dof.groups[g].s_a.data[c];
                if lc.s_wl.data[k] != expect {
                    return Err(DofError::Conflict {
                        layer: lc.name.clone(),
                        what: format!("left scale {} != 1/S_a = {}", lc.s_wl.data[k], expect),
                    });
                }
                k += 1;
            }
        }
        if k != lc.s_wl.numel() {
            return Err(DofError::Conflict {
                layer: lc.name.clone(),
                what: format!("left scale has {} entries, input domain has {k}", lc.s_wl.numel()),
            });
        }
        let LayerPlan::Weighted { out_group, .. } = dof.plans[lc.layer] else { unreachable!() };
        let oc = dof.groups[out_group].channels;
        for c in 0..oc {
            let fv = if d.f_hat.numel() == 1 { d.f_hat.data[0] } else { d.f_hat.data[c] };
            let expect = dof.groups[out_group].s_a.data[c] * fv;
            if lc.s_wr.data[c] != expect {
                return Err(DofError::Conflict {
                    layer: lc.name.clone(),
                    what: format!("right scale {} != S_a*F = {expect}", lc.s_wr.data[c]),
                });
            }
        }
        let per = lc.wq.numel() / lc.wq.shape[0];
        for c in 0..oc {
            let cs: i64 = lc.wq.data[c * per..(c + 1) * per].iter().map(|&q| q as i64).sum();
            let direct = round_half_away((d.bias.data[c] / lc.s_wr.data[c]) as f64) as i64;
            if lc.b_hat[c] + lc.z_in as i64 * cs != direct {
                return Err(DofError::Conflict {
                    layer: lc.name.clone(),
                    what: format!("pre-activation zero point does not cancel at channel {c}"),
                });
            }
        }
    }
    Ok(())
}

// ── initialization from calibration data ────────────────────────────────────

fn scale_and_zero(r: &ActRange, spec: QuantSpec) -> (f32, i32, bool) {
    if spec.signed {
        let m = r.min.abs().max(r.max.abs());
        if !(m > 0.0) {
            return (SCALE_FLOOR, 0, true);
        }
        (m / spec.qmax(), 0, false)
    } else {
        let span = r.max - r.min;
        if !(span > 0.0) {
            return (SCALE_FLOOR, 0, true);
        }
        let s = span / spec.qmax();
        let z = (round_half_away((-r.min / s) as f64) as f32).clamp(spec.qmin(), spec.qmax());
        (s, z as i32, false)
    }
}

pub fn init_quantization(
    graph: &Graph,
    hw: &HwConfig,
    calib: &[Tensor],
) -> Result<DofSet, DofError> {
    init_quantization_with(graph, hw, &BTreeSet::new(), calib)
}

/// Calibrate activation ranges on real batches, then seed every group scale
/// uniformly from its range and every rescale factor so the weight grid sits
/// at the scalar-MMSE scale of its kernel.
pub fn init_quantization_with(
    graph: &Graph,
    hw: &HwConfig,
    wide_weight_layers: &BTreeSet<String>,
    calib: &[Tensor],
) -> Result<DofSet, DofError> {
    if calib.is_empty() {
        return Err(DofError::Calibration("at least one calibration batch is required".into()));
    }
    let mut dof = analyze_dof_with(graph, hw, wide_weight_layers)?;
    let topo = graph.validate()?;
    let ranges = calibrate_activations(graph, &topo, calib)?;
    let aq = hw.act_spec();
    let mut dead = Vec::new();
    for g in &mut dof.groups {
        let r = ranges.get(&g.name).ok_or_else(|| {
            DofError::Calibration(format!("no calibrated range for group {:?}", g.name))
        })?;
        let (s, z, is_dead) = scale_and_zero(r, aq);
        if is_dead {
            dead.push(format!("group {:?} never activates; scale floored at {SCALE_FLOOR}", g.name));
        }
        g.s_a = Tensor::filled(&[g.channels], s);
        g.z = z;
    }
    dof.notes.extend(dead);
    for (layer, a, b) in &dof.z_links {
        let (za, zb) = (dof.groups[*a].z, dof.groups[*b].z);
        if za != zb {
            return Err(DofError::Conflict {
                layer: layer.clone(),
                what: format!("concatenated inputs need one zero point, got {za} and {zb}"),
            });
        }
    }

    // F = s_w * S_in / S_out puts the effective weight grid at the kernel's
    // scalar-MMSE scale. Multi-part inputs compromise on the geometric mean.
    let mut seeds = Vec::with_capacity(dof.layers.len());
    for d in &dof.layers {
        let LayerPlan::Weighted { out_group, .. } = dof.plans[d.layer] else { unreachable!() };
        let parts = dof.in_parts(&topo, d.layer);
        let v_in = if parts.len() == 1 {
            dof.groups[parts[0]].s_a.data[0]
        } else {
            let lg: f64 = parts.iter().map(|&g| (dof.groups[g].s_a.data[0] as f64).ln()).sum();
            (lg / parts.len() as f64).exp() as f32
        };
        let v_out = dof.groups[out_group].s_a.data[0];
        seeds.push((v_in, v_out));
    }
    for (d, (v_in, v_out)) in dof.layers.iter_mut().zip(seeds) {
        let s_w = ppq(&d.weight.data, d.weight_spec, PPQ_DEFAULT_ITERS, PPQ_DEFAULT_TOL)?.scale;
        let f_val = s_w * v_in / v_out;
        let len = d.f_hat.numel();
        d.f_hat = Tensor::filled(&[len], f_val);
    }
    Ok(dof)
}

// ── snapshots ────────────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct Snapshot {
    format: u32,
    hw: HwConfig,
    layers: Vec<SnapLayer>,
    groups: Vec<SnapGroup>,
}

#[derive(Serialize, Deserialize)]
struct SnapLayer {
    name: String,
    weight_bits: u8,
    weight: Tensor,
    bias: Tensor,
    f_hat: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct SnapGroup {
    name: String,
    z: i32,
    trainable: bool,
    s_a: Vec<f32>,
}

/// Serialize all DoF values. Identical states produce identical bytes.
pub fn snapshot_string(dof: &DofSet) -> Result<String, DofError> {
    let snap = Snapshot {
        format: SNAPSHOT_FORMAT,
        hw: dof.hw,
        layers: dof
            .layers
            .iter()
            .map(|d| SnapLayer {
                name: d.name.clone(),
                weight_bits: d.weight_spec.bits,
                weight: d.weight.clone(),
                bias: d.bias.clone(),
                f_hat: d.f_hat.data.clone(),
            })
            .collect(),
        groups: dof
            .groups
            .iter()
            .map(|g| SnapGroup {
                name: g.name.clone(),
                z: g.z,
                trainable: g.trainable,
                s_a: g.s_a.data.clone(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&snap)?)
}

/// Load snapshot values into a structurally matching DofSet.
pub fn apply_snapshot(dof: &mut DofSet, text: &str) -> Result<(), DofError> {
    let snap: Snapshot = serde_json::from_str(text)?;
    if snap.format != SNAPSHOT_FORMAT {
        return Err(DofError::SnapshotMismatch(format!("unknown snapshot format {}", snap.format)));
    }
    if snap.hw != dof.hw {
        return Err(DofError::SnapshotMismatch("hardware description differs".into()));
    }
    if snap.layers.len() != dof.layers.len() || snap.groups.len() != dof.groups.len() {
        return Err(DofError::SnapshotMismatch(format!(
            "snapshot has {} layers / {} groups, set has {} / {}",
            snap.layers.len(),
            snap.groups.len(),
            dof.layers.len(),
            dof.groups.len()
        )));
    }
    for (d, s) in dof.layers.iter_mut().zip(&snap.layers) {
        if s.name != d.name {
            return Err(DofError::SnapshotMismatch(format!(
                "layer {:?} where {:?} expected",
                s.name, d.name
            )));
        }
        if s.weight.shape != d.weight.shape
            || s.bias.shape != d.bias.shape
            || s.f_hat.len() != d.f_hat.numel()
            || s.weight_bits != d.weight_spec.bits
        {
            return Err(DofError::SnapshotMismatch(format!("layer {:?} shape differs", s.name)));
        }
        d.weight = s.weight.clone();
        d.bias = s.bias.clone();
        d.f_hat = Tensor { shape: vec![s.f_hat.len()], data: s.f_hat.clone() };
    }
    for (g, s) in dof.groups.iter_mut().zip(&snap.groups) {
        if s.name != g.name || s.s_a.len() != g.channels || s.trainable != g.trainable {
            return Err(DofError::SnapshotMismatch(format!("group {:?} differs", s.name)));
        }
        g.s_a = Tensor { shape: vec![s.s_a.len()], data: s.s_a.clone() };
        g.z = s.z;
    }
    Ok(())
}
