//! Error types, one enum per module boundary.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("data length {got} does not match shape product {expected}")]
    ShapeDataMismatch { expected: usize, got: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    OpShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    BadRank { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("{op}: broadcast axis {axis} out of range or length mismatch for shape {shape:?} with vector of {vec_len}")]
    BadBroadcast { op: &'static str, axis: usize, shape: Vec<usize>, vec_len: usize },
    #[error("{op}: invalid attribute: {what}")]
    BadAttr { op: &'static str, what: String },
    #[error("backward requires a scalar loss node, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("quantization bounds [{qmin}, {qmax}] invalid (empty or not exactly representable)")]
    BadQuantBounds { qmin: f32, qmax: f32 },
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("duplicate layer name {0:?}")]
    DuplicateLayer(String),
    #[error("edge references unknown layer {0:?}")]
    DanglingEdge(String),
    #[error("graph contains a cycle involving {0:?}")]
    Cycle(String),
    #[error("layer {layer:?}: {what}")]
    BadLayer { layer: String, what: String },
    #[error("layer {layer:?}: shape mismatch: {what}")]
    ShapeMismatch { layer: String, what: String },
    #[error("graph has no unique output (terminals: {0:?})")]
    AmbiguousOutput(Vec<String>),
    #[error("feature layer {0:?} not found or not unique and none specified")]
    BadFeatureLayer(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("sidecar blob: {0}")]
    Sidecar(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("input vector is empty")]
    Empty,
    #[error("all-zero input has no quantization scale")]
    AllZero,
    #[error("degenerate slice (all-zero row or column) at index {0}")]
    DegenerateSlice(usize),
    #[error("iteration count must be at least 1")]
    BadIterations,
    #[error("matrix shape {0:?} is not rank 2 or 3")]
    BadMatrix(Vec<usize>),
}

#[derive(Debug, Error)]
pub enum DofError {
    #[error("accumulator width {acc} too narrow for w{w}/a{a} (needs at least w+a+8)")]
    AccumulatorTooNarrow { acc: u8, w: u8, a: u8 },
    #[error("unsupported bit width {0}")]
    BadBits(u8),
    #[error("layer {layer:?}: unsupported pattern: {what}")]
    Unsupported { layer: String, what: String },
    #[error("conflicting constraints at {layer:?}: {what}")]
    Conflict { layer: String, what: String },
    #[error("quantized bias for layer {layer:?} exceeds accumulator range: {value}")]
    BiasOverflow { layer: String, value: i64 },
    #[error("snapshot does not match graph: {0}")]
    SnapshotMismatch(String),
    #[error("non-positive scale: {0}")]
    NonPositiveScale(String),
    #[error("calibration: {0}")]
    Calibration(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum CleError {
    #[error("interface {producer:?} -> {consumer:?} is not equalizable: {what}")]
    NotEqualizable { producer: String, consumer: String, what: String },
    #[error("factors reference unknown interface {0:?}")]
    UnknownInterface(String),
    #[error("factors parse: {0}")]
    Parse(String),
    #[error("factor vector for {interface:?} has length {got}, expected {expected}")]
    BadFactorLength { interface: String, got: usize, expected: usize },
    #[error("non-positive factor {value} at {interface:?} channel {channel}")]
    BadFactor { interface: String, channel: usize, value: f32 },
    #[error(transparent)]
    Dof(#[from] DofError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("numeric failure (NaN/Inf) at step {step}; snapshot saved to {snapshot:?}")]
    NumericFailure { step: usize, snapshot: Option<String> },
    #[error("data source: {0}")]
    Data(String),
    #[error(transparent)]
    Dof(#[from] DofError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum DeployError {
    #[error("accumulator overflow in layer {layer:?}: |{value}| >= 2^{bits_minus_one}")]
    Overflow { layer: String, value: i64, bits_minus_one: u32 },
    #[error("export requires unsigned activations")]
    SignedActivations,
    #[error("export requires activation quantization enabled")]
    ActivationQuantDisabled,
    #[error("input codes out of range for layer {layer:?}")]
    InputRange { layer: String },
    #[error("malformed export: {0}")]
    Malformed(String),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error(transparent)]
    Dof(#[from] DofError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
