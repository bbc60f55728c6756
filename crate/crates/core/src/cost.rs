//! Roofline cost model for engine steps.
//!
//! A step streams the model weights once, reads the KV cache of every
//! scheduled sequence, and performs `2·params` FLOPs per token plus
//! `2·q·ctx·d` attention FLOPs per layer. Adapter work adds its own FLOPs,
//! one weight load per distinct adapter in the step, and a fixed dispatch
//! latency per kernel launch:
//!
//! ```text
//! time = max(flops / peak_flops, bytes / hbm_bandwidth) + launches · launch_latency
//! ```
//!
//! LoRA is modeled with batched multi-adapter kernels (two launches per
//! site regardless of how many adapters share the step). Representation
//! interventions are dispatched per adapter, so their launch count grows
//! with the number of distinct adapters in the batch.

use std::fs;
use std::ops::Add;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterKind, PositionSchedule};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Projection};

/// Relative slack allowed between a stored ridge and `peak / bandwidth`.
pub const RIDGE_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    /// FLOP/s.
    pub peak_flops: f64,
    /// Bytes/s.
    pub hbm_bandwidth: f64,
    /// Host to device bytes/s.
    pub link_bandwidth: f64,
    pub bytes_per_param: usize,
    /// FLOP/byte.
    pub ridge: f64,
    /// Seconds per kernel dispatch.
    #[serde(default = "default_launch_latency")]
    pub launch_latency: f64,
}

fn default_launch_latency() -> f64 {
    HardwareProfile::DEFAULT_LAUNCH_LATENCY
}

impl Default for HardwareProfile {
    fn default() -> Self {
        Self::h100()
    }
}

impl HardwareProfile {
    pub const DEFAULT_LAUNCH_LATENCY: f64 = 2.0e-6;

    /// Single H100 SXM, dense half precision.
    pub fn h100() -> Self {
        Self {
            peak_flops: 989e12,
            hbm_bandwidth: 3.35e12,
            link_bandwidth: 32e9,
            bytes_per_param: 2,
            ridge: 295.0,
            launch_latency: Self::DEFAULT_LAUNCH_LATENCY,
        }
    }

    /// TPU v5e, bf16.
    pub fn tpu_v5e() -> Self {
        Self {
            peak_flops: 197e12,
            hbm_bandwidth: 819e9,
            link_bandwidth: 32e9,
            bytes_per_param: 2,
            ridge: 240.0,
            launch_latency: Self::DEFAULT_LAUNCH_LATENCY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.peak_flops, self.hbm_bandwidth, self.link_bandwidth, self.ridge]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !positive || self.bytes_per_param == 0 {
            return Err(Error::Config(format!("hardware profile values must be strictly positive: {self:?}")));
        }
        if !(self.launch_latency.is_finite() && self.launch_latency >= 0.0) {
            return Err(Error::Config(format!("launch_latency must be non-negative, got {}", self.launch_latency)));
        }
        let implied = self.peak_flops / self.hbm_bandwidth;
        if ((implied - self.ridge) / self.ridge).abs() > RIDGE_TOLERANCE {
            return Err(Error::Config(format!(
                "ridge {} inconsistent with peak_flops/hbm_bandwidth = {implied:.1}",
                self.ridge
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let hw: HardwareProfile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        hw.validate()?;
        Ok(hw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }
}

/// Dense decoder shape used for cost-only simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    /// Width of the key/value projections (grouped-query attention).
    pub kv_dim: usize,
    pub vocab: usize,
}

impl ModelShape {
    pub fn llama_8b() -> Self {
        Self { d_model: 4096, n_layers: 32, ffn_dim: 14336, kv_dim: 1024, vocab: 128_256 }
    }

    pub fn llama_70b() -> Self {
        Self { d_model: 8192, n_layers: 80, ffn_dim: 28672, kv_dim: 1024, vocab: 128_256 }
    }

    pub fn from_model_config(config: &ModelConfig) -> Self {
        Self {
            d_model: config.d_model,
            n_layers: config.n_layers,
            ffn_dim: config.ffn_dim,
            kv_dim: config.d_model,
            vocab: config.vocab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.d_model, self.n_layers, self.ffn_dim, self.kv_dim, self.vocab].contains(&0) {
            return Err(Error::Config(format!("model shape has a zero dimension: {self:?}")));
        }
        Ok(())
    }

    /// `(input, output)` width of a projection.
    pub fn projection_dims(&self, p: Projection) -> (usize, usize) {
        let (d, kv, f) = (self.d_model, self.kv_dim, self.ffn_dim);
        match p {
            Projection::Q | Projection::O => (d, d),
            Projection::K | Projection::V => (d, kv),
            Projection::Gate | Projection::Up => (d, f),
            Projection::Down => (f, d),
        }
    }

    /// `L·(2d² + 2·d·kv + 3·d·ffn) + 2·vocab·d` (untied embeddings).
    pub fn params_total(&self) -> u64 {
        let (d, kv, f, l, v) = (
            self.d_model as u64,
            self.kv_dim as u64,
            self.ffn_dim as u64,
            self.n_layers as u64,
            self.vocab as u64,
        );
        l * (2 * d * d + 2 * d * kv + 3 * d * f) + 2 * v * d
    }

    /// KV-cache bytes for one cached position across all layers.
    pub fn kv_bytes_per_position(&self, bytes_per_param: usize) -> u64 {
        (2 * self.kv_dim * self.n_layers * bytes_per_param) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepPhase {
    Prefill,
    Decode,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCost {
    pub flops: f64,
    pub hbm_bytes: f64,
    pub launches: u64,
    pub phase: StepPhase,
}

impl StepCost {
    pub fn zero(phase: StepPhase) -> Self {
        Self { flops: 0.0, hbm_bytes: 0.0, launches: 0, phase }
    }

    pub fn is_zero(&self) -> bool {
        self.flops == 0.0 && self.hbm_bytes == 0.0 && self.launches == 0
    }

    /// FLOP/byte; infinite when no bytes move.
    pub fn intensity(&self) -> f64 {
        if self.hbm_bytes == 0.0 {
            f64::INFINITY
        } else {
            self.flops / self.hbm_bytes
        }
    }
}

impl Add for StepCost {
    type Output = StepCost;

    fn add(self, rhs: StepCost) -> StepCost {
        let phase = if self.phase == rhs.phase { self.phase } else { StepPhase::Mixed };
        StepCost {
            flops: self.flops + rhs.flops,
            hbm_bytes: self.hbm_bytes + rhs.hbm_bytes,
            launches: self.launches + rhs.launches,
            phase,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundedness {
    Memory,
    Compute,
}

pub fn classify(cost: &StepCost, hw: &HardwareProfile) -> Boundedness {
    if cost.intensity() >= hw.ridge {
        Boundedness::Compute
    } else {
        Boundedness::Memory
    }
}

/// Arithmetic intensity of a batched LoRA down-projection in half
/// precision: `1 / (1/r + 1/b + 1/d)`.
pub fn lora_down_intensity(b: usize, d: usize, r: usize) -> f64 {
    let (b, d, r) = (b as f64, d as f64, r as f64);
    b * d * r / (b * d + r * d + r * b)
}

/// One scheduled sequence: `query` new tokens attending over `context`
/// positions (including the new ones).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqWork {
    pub query: usize,
    pub context: usize,
}

/// Base-model cost of a single-phase step with `tokens_in_step` tokens and
/// `kv_positions` cached positions read in total.
pub fn base_step_cost(shape: &ModelShape, phase: StepPhase, tokens_in_step: usize, kv_positions: usize, hw: &HardwareProfile) -> StepCost {
    let p = shape.params_total() as f64;
    let t = tokens_in_step as f64;
    let kv = kv_positions as f64;
    let attn = 2.0 * t * kv * shape.d_model as f64 * shape.n_layers as f64;
    StepCost {
        flops: 2.0 * p * t + attn,
        hbm_bytes: p * hw.bytes_per_param as f64 + kv * shape.kv_bytes_per_position(hw.bytes_per_param) as f64,
        launches: 0,
        phase,
    }
}

/// Base-model cost of a continuous-batching step: weights once, attention
/// and KV reads per sequence.
pub fn batch_step_cost(shape: &ModelShape, phase: StepPhase, seqs: &[SeqWork], hw: &HardwareProfile) -> StepCost {
    let p = shape.params_total() as f64;
    let (d, l) = (shape.d_model as f64, shape.n_layers as f64);
    let kv_pos = shape.kv_bytes_per_position(hw.bytes_per_param) as f64;
    let mut cost = StepCost { flops: 0.0, hbm_bytes: p * hw.bytes_per_param as f64, launches: 0, phase };
    for s in seqs {
        let (q, c) = (s.query as f64, s.context as f64);
        cost.flops += 2.0 * p * q + 2.0 * q * c * d * l;
        cost.hbm_bytes += c * kv_pos;
    }
    cost
}

/// Adapter configuration as seen by the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterCostSpec {
    pub kind: AdapterKind,
    pub rank: usize,
    pub schedule: PositionSchedule,
}

/// Trainable parameters of one adapter over the whole model. LoRA attaches
/// to all seven projections; interventions to one residual site per layer.
pub fn adapter_model_params(shape: &ModelShape, kind: AdapterKind, rank: usize) -> u64 {
    let per_layer: usize = match kind {
        AdapterKind::Lora => Projection::ALL
            .iter()
            .map(|p| {
                let (i, o) = shape.projection_dims(*p);
                rank * (i + o)
            })
            .sum(),
        AdapterKind::Direft | AdapterKind::Loreft => 2 * rank * shape.d_model + rank,
    };
    (per_layer * shape.n_layers) as u64
}

pub fn adapter_model_bytes(shape: &ModelShape, kind: AdapterKind, rank: usize, hw: &HardwareProfile) -> u64 {
    adapter_model_params(shape, kind, rank) * hw.bytes_per_param as u64
}

/// Kernel dispatches per hook site: batched (LoRA) or per adapter (ReFT).
fn launches_per_site(kind: AdapterKind) -> u64 {
    match kind {
        AdapterKind::Lora => 2,
        AdapterKind::Direft => 4,
        AdapterKind::Loreft => 5,
    }
}

/// Adapter cost of one step. `tokens_per_adapter` lists, for each distinct
/// adapter in the step, how many of its tokens the adapter is applied to.
/// Activation traffic is not counted.
pub fn adapter_step_cost(
    shape: &ModelShape,
    spec: &AdapterCostSpec,
    phase: StepPhase,
    tokens_per_adapter: &[usize],
    hw: &HardwareProfile,
) -> StepCost {
    if spec.schedule == PositionSchedule::PrefillOnly && phase == StepPhase::Decode {
        return StepCost::zero(phase);
    }
    let params = adapter_model_params(shape, spec.kind, spec.rank) as f64;
    let active: Vec<usize> = tokens_per_adapter.iter().copied().filter(|t| *t > 0).collect();
    if active.is_empty() {
        return StepCost::zero(phase);
    }
    let tokens: usize = active.iter().sum();
    let distinct = active.len() as u64;
    let layers = shape.n_layers as u64;
    let launches = match spec.kind {
        AdapterKind::Lora => launches_per_site(spec.kind) * Projection::ALL.len() as u64 * layers,
        _ => launches_per_site(spec.kind) * distinct * layers,
    };
    StepCost {
        flops: 2.0 * params * tokens as f64,
        hbm_bytes: params * hw.bytes_per_param as f64 * distinct as f64,
        launches,
        phase,
    }
}

/// Roofline time plus dispatch latency.
pub fn step_time(cost: &StepCost, hw: &HardwareProfile) -> f64 {
    (cost.flops / hw.peak_flops).max(cost.hbm_bytes / hw.hbm_bandwidth) + cost.launches as f64 * hw.launch_latency
}

pub fn paging_time(adapter_bytes: u64, hw: &HardwareProfile) -> f64 {
    adapter_bytes as f64 / hw.link_bandwidth
}
