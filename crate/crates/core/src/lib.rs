//! Multi-source graph entity matching with Pareto-aligned training.

pub mod align;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod pareto;
pub mod report;
pub mod sampler;
pub mod trainer;
pub mod verify;

pub use align::{GateParams, ProjectionSet};
pub use checkpoint::Checkpoint;
pub use error::{IcpaError, Result};
pub use graph::{Edge, MultiSourceGraph, Node, NodeId, SourceGraph};
pub use model::{ModelConfig, ModelParams, NodeRepresentation, Tower};
pub use nn::Parameters;
pub use pareto::{PmtlWeights, Preference, TntReport, Volume};
pub use report::{RunReport, RunTimings};
pub use sampler::{CategoryBatch, Sampler, SamplerConfig, Triple};
pub use trainer::{run_icpa, Ablation, RunArtifacts, TrainConfig};
pub use verify::{run_suite, CheckResult, SuiteSizes, VerifyOptions};
