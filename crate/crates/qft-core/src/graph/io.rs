//! Graph serialization: a JSON document with either inline tensor data or
//! element offsets into a little-endian f32 sidecar blob referenced by the
//! document's `blob` field (path relative to the JSON file).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::GraphError;
use crate::tensor::Tensor;

use super::{BatchNorm, Graph, Layer, LayerKind};

#[derive(Serialize, Deserialize)]
struct TensorDoc {
    shape: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<Vec<f32>>,
    /// element offset into the sidecar blob
    #[serde(skip_serializing_if = "Option::is_none")]
    offset: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct BnDoc {
    gamma: TensorDoc,
    beta: TensorDoc,
    mean: TensorDoc,
    var: TensorDoc,
    eps: f32,
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    name: String,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pad: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kernel: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weight: Option<TensorDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bias: Option<TensorDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bn: Option<BnDoc>,
}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    input_shape: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    feature_layer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    blob: Option<String>,
    layers: Vec<LayerDoc>,
    edges: Vec<(String, String)>,
}

fn resolve_tensor(doc: &TensorDoc, blob: Option<&[f32]>, what: &str) -> Result<Tensor, GraphError> {
    let numel: usize = doc.shape.iter().product();
    let data = match (&doc.data, doc.offset) {
        (Some(d), None) => d.clone(),
        (None, Some(off)) => {
            let blob = blob.ok_or_else(|| {
                GraphError::Sidecar(format!("{what}: offset given but document names no blob"))
            })?;
            if off + numel > blob.len() {
                return Err(GraphError::Sidecar(format!(
                    "{what}: range {off}..{} exceeds blob of {} elements",
                    off + numel,
                    blob.len()
                )));
            }
            blob[off..off + numel].to_vec()
        }
        _ => {
            return Err(GraphError::Schema(format!(
                "{what}: tensor needs exactly one of inline data or blob offset"
            )));
        }
    };
    Ok(Tensor::from_vec(&doc.shape, data)?)
}

fn parse_kind(doc: &LayerDoc) -> Result<LayerKind, GraphError> {
    let stride = doc.stride.unwrap_or(1);
    let pad = doc.pad.unwrap_or(0);
    Ok(match doc.kind.as_str() {
        "conv2d" => LayerKind::Conv2d { stride, pad },
        "depthwise_conv2d" => LayerKind::DepthwiseConv2d { stride, pad },
        "dense" => LayerKind::Dense,
        "relu" => LayerKind::Relu,
        "relu6" => LayerKind::Relu6,
        "maxpool" => {
            let kernel = doc
                .kernel
                .ok_or_else(|| GraphError::Schema(format!("layer {:?}: maxpool needs kernel", doc.name)))?;
            LayerKind::MaxPool { kernel, stride: doc.stride.unwrap_or(kernel) }
        }
        "avgpool_global" => LayerKind::AvgPoolGlobal,
        "ew_add" => LayerKind::EwAdd,
        "concat" => LayerKind::Concat,
        other => return Err(GraphError::Schema(format!("layer {:?}: unknown kind {other:?}", doc.name))),
    })
}

/// Load a graph document and its sidecar blob if one is referenced.
pub fn load_graph(path: &Path) -> Result<Graph, GraphError> {
    let text = fs::read_to_string(path)?;
    let doc: GraphDoc = serde_json::from_str(&text)?;
    let blob: Option<Vec<f32>> = match &doc.blob {
        Some(rel) => {
            let bpath = path.parent().unwrap_or(Path::new(".")).join(rel);
            let bytes = fs::read(&bpath)?;
            if bytes.len() % 4 != 0 {
                return Err(GraphError::Sidecar(format!(
                    "blob {bpath:?} length {} is not a multiple of 4",
                    bytes.len()
                )));
            }
            Some(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
        }
        None => None,
    };
    let blob = blob.as_deref();

    let mut layers = Vec::with_capacity(doc.layers.len());
    for ld in &doc.layers {
        let kind = parse_kind(ld)?;
        let weight = match &ld.weight {
            Some(t) => Some(resolve_tensor(t, blob, &format!("{}.weight", ld.name))?),
            None => None,
        };
        let bias = match &ld.bias {
            Some(t) => Some(resolve_tensor(t, blob, &format!("{}.bias", ld.name))?),
            None => None,
        };
        let bn = match &ld.bn {
            Some(b) => Some(BatchNorm {
                gamma: resolve_tensor(&b.gamma, blob, &format!("{}.bn.gamma", ld.name))?,
                beta: resolve_tensor(&b.beta, blob, &format!("{}.bn.beta", ld.name))?,
                mean: resolve_tensor(&b.mean, blob, &format!("{}.bn.mean", ld.name))?,
                var: resolve_tensor(&b.var, blob, &format!("{}.bn.var", ld.name))?,
                eps: b.eps,
            }),
            None => None,
        };
        layers.push(Layer { name: ld.name.clone(), kind, weight, bias, bn });
    }
    Ok(Graph {
        layers,
        edges: doc.edges,
        input_shape: doc.input_shape,
        feature_layer: doc.feature_layer,
    })
}

/// Tensors at or above this element count go to the sidecar when one is used.
const SIDECAR_THRESHOLD: usize = 32;

/// Save a graph document. With `sidecar` set, large tensors are written to
/// that file (relative to `path`) and referenced by offset.
pub fn save_graph(g: &Graph, path: &Path, sidecar: Option<&str>) -> Result<(), GraphError> {
    let mut blob: Vec<f32> = Vec::new();
    let mut tensor_doc = |t: &Tensor| -> TensorDoc {
        if sidecar.is_some() && t.numel() >= SIDECAR_THRESHOLD {
            let offset = blob.len();
            blob.extend_from_slice(&t.data);
            TensorDoc { shape: t.shape.clone(), data: None, offset: Some(offset) }
        } else {
            TensorDoc { shape: t.shape.clone(), data: Some(t.data.clone()), offset: None }
        }
    };

    let mut layers = Vec::with_capacity(g.layers.len());
    for l in &g.layers {
        let (stride, pad, kernel) = match l.kind {
            LayerKind::Conv2d { stride, pad } | LayerKind::DepthwiseConv2d { stride, pad } => {
                (Some(stride), Some(pad), None)
            }
            LayerKind::MaxPool { kernel, stride } => (Some(stride), None, Some(kernel)),
            _ => (None, None, None),
        };
        layers.push(LayerDoc {
            name: l.name.clone(),
            kind: l.kind.name().into(),
            stride,
            pad,
            kernel,
            weight: l.weight.as_ref().map(&mut tensor_doc),
            bias: l.bias.as_ref().map(&mut tensor_doc),
            bn: l.bn.as_ref().map(|b| BnDoc {
                gamma: tensor_doc(&b.gamma),
                beta: tensor_doc(&b.beta),
                mean: tensor_doc(&b.mean),
                var: tensor_doc(&b.var),
                eps: b.eps,
            }),
        });
    }
    let doc = GraphDoc {
        input_shape: g.input_shape.clone(),
        feature_layer: g.feature_layer.clone(),
        blob: if blob.is_empty() { None } else { sidecar.map(String::from) },
        layers,
        edges: g.edges.clone(),
    };
    fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    if !blob.is_empty() {
        let bpath = path.parent().unwrap_or(Path::new(".")).join(sidecar.unwrap());
        let bytes: Vec<u8> = blob.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(bpath, bytes)?;
    }
    Ok(())
}
