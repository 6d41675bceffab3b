//! Core library for the quantized-deployment toolkit: tensors, a reverse-mode
//! tape, network IR, scale solvers, the degree-of-freedom compiler,
//! cross-layer equalization, the finetuning loop, and the integer deployment
//! simulator.

pub mod cle;
pub mod deploy;
pub mod dof;
pub mod error;
pub mod graph;
#[cfg(feature = "testing")]
pub mod oracle;
pub mod solvers;
pub mod tape;
pub mod tensor;
#[cfg(feature = "testing")]
pub mod testnets;
pub mod train;

pub use cle::CleFactors;
pub use deploy::{CodeTensor, ConformanceReport, DeployExport};
pub use dof::{DofSet, FamilyMask, HwConfig, OfflinePlan, RescaleRank};
pub use error::{CleError, DeployError, DofError, GraphError, SolverError, TensorError, TrainError};
pub use tape::{Op, Tape, VarId};
pub use tensor::{round_half_away, round_half_away_f32, Tensor};
pub use train::{DataSource, TrainConfig, TrainReport};
