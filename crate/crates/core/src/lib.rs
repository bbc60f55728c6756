//! Prefill-only adapter toolkit: adapter math, a toy decoder with adapter
//! hooks, a Punica-style workload generator, a roofline cost model, an FCFS
//! continuous-batching simulator with adapter paging, and the paired
//! statistics used to compare adapter variants.

pub mod adapter;
pub mod cost;
pub mod engine;
pub mod error;
pub mod model;
pub mod stats;
pub mod tensor;
pub mod workload;

pub use adapter::{AdapterId, AdapterKind, AdapterParams, PositionSchedule, ScalingRule, SiteDims};
pub use error::{Error, Result};
pub use tensor::{Matrix, RngSeed};
pub use cost::{HardwareProfile, ModelShape};
pub use engine::{AdapterSetup, Engine, EngineConfig, EngineMode};
pub use model::ModelConfig;
pub use stats::{MetricsReport, ZeroPolicy};
pub use workload::{AdapterMix, RequestSpec, WorkloadConfig};
