//! Network IR: a DAG of named layers with optional weights, biases, and
//! foldable batchnorm parameters. Edges are (producer, consumer) name pairs;
//! for multi-input layers the declaration order of edges fixes the operand
//! order. Shapes exclude the batch dimension.

pub mod exec;
pub mod io;

use std::collections::{BTreeMap, BTreeSet};

use crate::error::GraphError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d { stride: usize, pad: usize },
    DepthwiseConv2d { stride: usize, pad: usize },
    Dense,
    Relu,
    Relu6,
    MaxPool { kernel: usize, stride: usize },
    AvgPoolGlobal,
    EwAdd,
    Concat,
}

impl LayerKind {
    pub fn is_weighted(self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::DepthwiseConv2d { .. } | LayerKind::Dense)
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::DepthwiseConv2d { .. } => "depthwise_conv2d",
            LayerKind::Dense => "dense",
            LayerKind::Relu => "relu",
            LayerKind::Relu6 => "relu6",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::AvgPoolGlobal => "avgpool_global",
            LayerKind::EwAdd => "ew_add",
            LayerKind::Concat => "concat",
        }
    }
}

/// Inference-time batchnorm attached to a weighted layer, to be folded.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub mean: Tensor,
    pub var: Tensor,
    pub eps: f32,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub bn: Option<BatchNorm>,
}

impl Layer {
    pub fn bare(name: &str, kind: LayerKind) -> Layer {
        Layer { name: name.into(), kind, weight: None, bias: None, bn: None }
    }

    pub fn weighted(name: &str, kind: LayerKind, weight: Tensor, bias: Option<Tensor>) -> Layer {
        Layer { name: name.into(), kind, weight: Some(weight), bias, bn: None }
    }

    /// Output-channel count of a weighted layer.
    pub fn out_channels(&self) -> usize {
        self.weight.as_ref().map(|w| w.shape[0]).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.weight.as_ref().map(|w| w.numel()).unwrap_or(0)
            + self.bias.as_ref().map(|b| b.numel()).unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct Graph {
    pub layers: Vec<Layer>,
    /// (producer, consumer) layer names; declaration order is operand order.
    pub edges: Vec<(String, String)>,
    /// network input shape without batch: [C,H,W] or [K]
    pub input_shape: Vec<usize>,
    /// distillation feature tap; defaults to the output layer
    pub feature_layer: Option<String>,
}

/// Validated structure: topological order, adjacency, inferred shapes.
#[derive(Debug, Clone)]
pub struct Topology {
    pub order: Vec<usize>,
    /// predecessors of each layer in edge-declaration order
    pub preds: Vec<Vec<usize>>,
    pub succs: Vec<Vec<usize>>,
    /// output shape of each layer, batch dimension excluded
    pub shapes: Vec<Vec<usize>>,
    pub output: usize,
    /// layers with no predecessor; they consume the network input
    pub inputs: Vec<usize>,
}

fn pool_out(input: usize, kernel: usize, stride: usize, pad: usize, name: &str) -> Result<usize, GraphError> {
    if input + 2 * pad < kernel {
        return Err(GraphError::ShapeMismatch {
            layer: name.into(),
            what: format!("kernel {kernel} exceeds padded extent {}", input + 2 * pad),
        });
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

impl Graph {
    pub fn layer_index(&self, name: &str) -> Result<usize, GraphError> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| GraphError::DanglingEdge(name.into()))
    }

    pub fn validate(&self) -> Result<Topology, GraphError> {
        let n = self.layers.len();
        if n == 0 {
            return Err(GraphError::Schema("graph has no layers".into()));
        }
        let mut seen = BTreeSet::new();
        for l in &self.layers {
            if !seen.insert(l.name.clone()) {
                return Err(GraphError::DuplicateLayer(l.name.clone()));
            }
        }
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut succs: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (a, b) in &self.edges {
            let (ia, ib) = (self.layer_index(a)?, self.layer_index(b)?);
            preds[ib].push(ia);
            succs[ia].push(ib);
        }

        for (i, l) in self.layers.iter().enumerate() {
            self.check_layer(l, preds[i].len())?;
        }

        // Kahn topological sort; ties resolved by layer index so the order
        // is deterministic.
        let mut indeg: Vec<usize> = preds.iter().map(|p| p.len()).collect();
        let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        let inputs = ready.clone();
        while let Some(&i) = ready.first() {
            ready.remove(0);
            order.push(i);
            for &s in &succs[i] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    // keep ready ascending for determinism
                    let pos = ready.partition_point(|&x| x < s);
                    ready.insert(pos, s);
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|&i| indeg[i] > 0).unwrap();
            return Err(GraphError::Cycle(self.layers[stuck].name.clone()));
        }
        if inputs.is_empty() {
            return Err(GraphError::Schema("no entry layer".into()));
        }

        let sinks: Vec<usize> = (0..n).filter(|&i| succs[i].is_empty()).collect();
        if sinks.len() != 1 {
            let names = sinks.iter().map(|&i| self.layers[i].name.clone()).collect();
            return Err(GraphError::AmbiguousOutput(names));
        }
        let output = sinks[0];

        if let Some(f) = &self.feature_layer {
            self.layer_index(f).map_err(|_| GraphError::BadFeatureLayer(f.clone()))?;
        }

        let shapes = self.infer_shapes(&order, &preds, &inputs)?;
        Ok(Topology { order, preds, succs, shapes, output, inputs })
    }

    fn check_layer(&self, l: &Layer, indeg: usize) -> Result<(), GraphError> {
        let bad = |detail: String| GraphError::BadLayer { layer: l.name.clone(), what: detail };
        match l.kind {
            LayerKind::Conv2d { stride, pad } | LayerKind::DepthwiseConv2d { stride, pad } => {
                let w = l.weight.as_ref().ok_or_else(|| bad("missing weight".into()))?;
                let want_rank = if matches!(l.kind, LayerKind::Conv2d { .. }) { 4 } else { 3 };
                if w.rank() != want_rank {
                    return Err(bad(format!("weight rank {} expected {}", w.rank(), want_rank)));
                }
                if !(stride == 1 || stride == 2) {
                    return Err(bad(format!("stride {stride} not in {{1,2}}")));
                }
                let (kh, kw) = if want_rank == 4 { (w.shape[2], w.shape[3]) } else { (w.shape[1], w.shape[2]) };
                if kh == 0 || kw == 0 || pad >= kh.max(kw) {
                    return Err(bad(format!("kernel {kh}x{kw} with pad {pad}")));
                }
            }
            LayerKind::Dense => {
                let w = l.weight.as_ref().ok_or_else(|| bad("missing weight".into()))?;
                if w.rank() != 2 {
                    return Err(bad(format!("weight rank {} expected 2", w.rank())));
                }
            }
            _ => {
                if l.weight.is_some() || l.bias.is_some() || l.bn.is_some() {
                    return Err(bad("parameters on a parameter-free layer".into()));
                }
            }
        }
        if let Some(b) = &l.bias {
            let oc = l.out_channels();
            if b.rank() != 1 || b.numel() != oc {
                return Err(bad(format!("bias shape {:?} expected [{}]", b.shape, oc)));
            }
        }
        if let Some(bn) = &l.bn {
            let oc = l.out_channels();
            for (t, what) in [(&bn.gamma, "gamma"), (&bn.beta, "beta"), (&bn.mean, "mean"), (&bn.var, "var")] {
                if t.rank() != 1 || t.numel() != oc {
                    return Err(bad(format!("bn {what} shape {:?} expected [{}]", t.shape, oc)));
                }
            }
            if bn.var.data.iter().any(|&v| v < 0.0) || bn.eps <= 0.0 {
                return Err(bad("bn variance must be nonnegative and eps positive".into()));
            }
        }
        let want_indeg = match l.kind {
            LayerKind::EwAdd => Some(2),
            LayerKind::Concat => None, // >= 2 checked below
            _ => Some(1),
        };
        match (want_indeg, indeg) {
            (Some(w), d) if d != w && d != 0 => {
                return Err(bad(format!("expects {w} input(s), has {d}")));
            }
            (Some(w), 0) if w != 1 => {
                return Err(bad(format!("expects {w} input(s), has 0")));
            }
            (None, d) if d < 2 => {
                return Err(bad(format!("concat expects at least 2 inputs, has {d}")));
            }
            _ => {}
        }
        Ok(())
    }

    fn infer_shapes(
        &self,
        order: &[usize],
        preds: &[Vec<usize>],
        inputs: &[usize],
    ) -> Result<Vec<Vec<usize>>, GraphError> {
        let n = self.layers.len();
        let mut shapes: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &i in order {
            let l = &self.layers[i];
            let mismatch = |what: String| GraphError::ShapeMismatch { layer: l.name.clone(), what };
            let in_shapes: Vec<&Vec<usize>> = if preds[i].is_empty() {
                debug_assert!(inputs.contains(&i));
                vec![&self.input_shape]
            } else {
                preds[i].iter().map(|&p| &shapes[p]).collect()
            };
            let s0 = in_shapes[0];
            shapes[i] = match l.kind {
                LayerKind::Conv2d { stride, pad } => {
                    let w = l.weight.as_ref().unwrap();
                    if s0.len() != 3 || s0[0] != w.shape[1] {
                        return Err(mismatch(format!("input {:?} for weight {:?}", s0, w.shape)));
                    }
                    let ho = pool_out(s0[1], w.shape[2], stride, pad, &l.name)?;
                    let wo = pool_out(s0[2], w.shape[3], stride, pad, &l.name)?;
                    vec![w.shape[0], ho, wo]
                }
                LayerKind::DepthwiseConv2d { stride, pad } => {
                    let w = l.weight.as_ref().unwrap();
                    if s0.len() != 3 || s0[0] != w.shape[0] {
                        return Err(mismatch(format!("input {:?} for weight {:?}", s0, w.shape)));
                    }
                    let ho = pool_out(s0[1], w.shape[1], stride, pad, &l.name)?;
                    let wo = pool_out(s0[2], w.shape[2], stride, pad, &l.name)?;
                    vec![w.shape[0], ho, wo]
                }
                LayerKind::Dense => {
                    let w = l.weight.as_ref().unwrap();
                    if s0.len() != 1 || s0[0] != w.shape[1] {
                        return Err(mismatch(format!("input {:?} for weight {:?}", s0, w.shape)));
                    }
                    vec![w.shape[0]]
                }
                LayerKind::Relu | LayerKind::Relu6 => s0.clone(),
                LayerKind::MaxPool { kernel, stride } => {
                    if s0.len() != 3 {
                        return Err(mismatch(format!("input {:?} expected [C,H,W]", s0)));
                    }
                    let ho = pool_out(s0[1], kernel, stride, 0, &l.name)?;
                    let wo = pool_out(s0[2], kernel, stride, 0, &l.name)?;
                    vec![s0[0], ho, wo]
                }
                LayerKind::AvgPoolGlobal => {
                    if s0.len() != 3 {
                        return Err(mismatch(format!("input {:?} expected [C,H,W]", s0)));
                    }
                    vec![s0[0]]
                }
                LayerKind::EwAdd => {
                    if in_shapes.len() != 2 || in_shapes[0] != in_shapes[1] {
                        return Err(mismatch(format!("operands {:?}", in_shapes)));
                    }
                    s0.clone()
                }
                LayerKind::Concat => {
                    let mut ch = 0usize;
                    for s in &in_shapes {
                        if s.len() != s0.len() || s.is_empty() || s[1..] != s0[1..] {
                            return Err(mismatch(format!("operands {:?}", in_shapes)));
                        }
                        ch += s[0];
                    }
                    let mut out = s0.clone();
                    out[0] = ch;
                    out
                }
            };
        }
        Ok(shapes)
    }

    /// Fold inference batchnorm into the preceding layer's weight and bias:
    /// with a = gamma/sqrt(var+eps), weights scale by a per output channel and
    /// bias becomes (b - mean)*a + beta. Parameters are combined in f64.
    pub fn fold_batchnorm(&self) -> Result<Graph, GraphError> {
        let mut out = self.clone();
        for l in &mut out.layers {
            let Some(bn) = l.bn.take() else { continue };
            let w = l.weight.as_mut().expect("bn only validates on weighted layers");
            let oc = w.shape[0];
            let per = w.numel() / oc;
            let mut a = vec![0.0f64; oc];
            for c in 0..oc {
                a[c] = bn.gamma.data[c] as f64 / ((bn.var.data[c] as f64 + bn.eps as f64).sqrt());
            }
            for c in 0..oc {
                for k in 0..per {
                    let idx = c * per + k;
                    w.data[idx] = (w.data[idx] as f64 * a[c]) as f32;
                }
            }
            let bias = l.bias.take().unwrap_or_else(|| Tensor::zeros(&[oc]));
            let mut nb = vec![0.0f32; oc];
            for c in 0..oc {
                nb[c] = ((bias.data[c] as f64 - bn.mean.data[c] as f64) * a[c] + bn.beta.data[c] as f64) as f32;
            }
            l.bias = Some(Tensor { shape: vec![oc], data: nb });
        }
        Ok(out)
    }

    /// Layers kept at 8-bit weights: take weighted layers ascending by
    /// (parameter count, name) and keep adding until the running total
    /// reaches `frac` of all parameters; the layer that crosses the
    /// threshold is included.
    pub fn select_wide_weight_layers(&self, frac: f64) -> BTreeSet<String> {
        let mut entries: Vec<(usize, &str)> = self
            .layers
            .iter()
            .filter(|l| l.kind.is_weighted())
            .map(|l| (l.param_count(), l.name.as_str()))
            .collect();
        let total: usize = entries.iter().map(|e| e.0).sum();
        entries.sort();
        let mut out = BTreeSet::new();
        let mut acc = 0usize;
        for (count, name) in entries {
            if (acc as f64) >= frac * total as f64 {
                break;
            }
            acc += count;
            out.insert(name.to_string());
        }
        out
    }
}

/// Position of `needle` in the predecessor list of layer `consumer`.
pub fn operand_position(preds: &[usize], needle: usize) -> Option<usize> {
    preds.iter().position(|&p| p == needle)
}

/// Convenience map from layer name to index.
pub fn name_map(g: &Graph) -> BTreeMap<&str, usize> {
    g.layers.iter().enumerate().map(|(i, l)| (l.name.as_str(), i)).collect()
}
