//! Run configuration: a TOML document with `[workload]`, `[engine]`,
//! `[adapters]`, `[hardware]`, `[model]` and optional `[sweep]` sections.
//! Every section is optional; defaults give 1000 requests, `l_max` 2048,
//! `B = M = 32` on an 8B-class shape and an H100 profile.

use std::fs;
use std::path::{Path, PathBuf};

use preft_core::workload::DEFAULT_L_MAX;
use preft_core::{
    AdapterMix, AdapterSetup, EngineConfig, EngineMode, Error, HardwareProfile, ModelConfig, ModelShape, PositionSchedule,
    Result, RngSeed, WorkloadConfig,
};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSection {
    pub n_requests: usize,
    pub l_max: usize,
    /// Defaults to the adapter count.
    pub n_adapters: Option<usize>,
    pub mix: AdapterMix,
    pub seed: u64,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        Self { n_requests: 1000, l_max: DEFAULT_L_MAX, n_adapters: None, mix: AdapterMix::Uniform, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareSection {
    /// `h100` (default) or `tpu_v5e`; explicit fields override it.
    pub preset: Option<String>,
    pub peak_flops: Option<f64>,
    pub hbm_bandwidth: Option<f64>,
    pub link_bandwidth: Option<f64>,
    pub bytes_per_param: Option<usize>,
    pub ridge: Option<f64>,
    pub launch_latency: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Cost mode: `llama-8b` (default) or `llama-70b`.
    pub shape: Option<String>,
    pub d_model: Option<usize>,
    pub n_layers: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub kv_dim: Option<usize>,
    pub vocab: Option<usize>,
    /// Functional mode only.
    pub max_positions: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub counts: Vec<usize>,
    #[serde(default = "both_schedules")]
    pub schedules: Vec<PositionSchedule>,
    #[serde(default = "yes")]
    pub baseline: bool,
}

fn both_schedules() -> Vec<PositionSchedule> {
    vec![PositionSchedule::PrefillOnly, PositionSchedule::AllPositions]
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: Option<PathBuf>,
    pub workload: WorkloadSection,
    pub engine: EngineConfig,
    pub adapters: Option<AdapterSetup>,
    pub hardware: HardwareSection,
    pub model: ModelSection,
    pub sweep: Option<SweepSection>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.engine.validate()?;
        if let Some(a) = &self.adapters {
            a.validate()?;
        }
        let n = self.n_adapters();
        if let (Some(w), Some(a)) = (self.workload.n_adapters, &self.adapters) {
            if w != a.count {
                return Err(Error::Config(format!("workload.n_adapters = {w} but adapters.count = {}", a.count)));
            }
        }
        if self.sweep.is_none() {
            self.engine.pool_limits(n)?;
        }
        self.workload_config().validate()?;
        self.hardware()?;
        match self.engine.mode {
            EngineMode::Cost => {
                self.shape()?;
            }
            EngineMode::Functional => {
                let m = self.toy_model()?;
                if self.workload.l_max > m.max_positions {
                    return Err(Error::Config(format!(
                        "workload.l_max = {} exceeds model.max_positions = {}",
                        self.workload.l_max, m.max_positions
                    )));
                }
                if self.sweep.is_some() {
                    return Err(Error::Config("[sweep] requires cost mode".into()));
                }
            }
        }
        if let Some(s) = &self.sweep {
            if self.adapters.is_none() {
                return Err(Error::Config("[sweep] needs an [adapters] section for kind and rank".into()));
            }
            if s.counts.is_empty() || s.counts.contains(&0) {
                return Err(Error::Config("sweep.counts must be non-empty and positive".into()));
            }
            for c in &s.counts {
                self.engine.pool_limits(*c)?;
            }
        }
        Ok(())
    }

    pub fn n_adapters(&self) -> usize {
        self.workload.n_adapters.or(self.adapters.map(|a| a.count)).unwrap_or(1)
    }

    pub fn workload_config(&self) -> WorkloadConfig {
        WorkloadConfig {
            n_requests: self.workload.n_requests,
            l_max: self.workload.l_max,
            n_adapters: self.n_adapters(),
            mix: self.workload.mix,
            seed: RngSeed(self.workload.seed),
        }
    }

    pub fn hardware(&self) -> Result<HardwareProfile> {
        let h = &self.hardware;
        let mut hw = match h.preset.as_deref().unwrap_or("h100") {
            "h100" => HardwareProfile::h100(),
            "tpu_v5e" | "tpu-v5e" => HardwareProfile::tpu_v5e(),
            other => return Err(Error::Config(format!("unknown hardware preset {other:?}"))),
        };
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut hw.peak_flops, h.peak_flops);
        set(&mut hw.hbm_bandwidth, h.hbm_bandwidth);
        set(&mut hw.link_bandwidth, h.link_bandwidth);
        hw.bytes_per_param = h.bytes_per_param.unwrap_or(hw.bytes_per_param);
        set(&mut hw.launch_latency, h.launch_latency);
        match h.ridge {
            Some(r) => hw.ridge = r,
            None if h.peak_flops.is_some() || h.hbm_bandwidth.is_some() => hw.ridge = hw.peak_flops / hw.hbm_bandwidth,
            None => {}
        }
        hw.validate()?;
        Ok(hw)
    }

    pub fn shape(&self) -> Result<ModelShape> {
        let m = &self.model;
        let mut s = match m.shape.as_deref().unwrap_or("llama-8b") {
            "llama-8b" => ModelShape::llama_8b(),
            "llama-70b" => ModelShape::llama_70b(),
            other => return Err(Error::Config(format!("unknown model shape {other:?}"))),
        };
        s.d_model = m.d_model.unwrap_or(s.d_model);
        s.n_layers = m.n_layers.unwrap_or(s.n_layers);
        s.ffn_dim = m.ffn_dim.unwrap_or(s.ffn_dim);
        s.kv_dim = m.kv_dim.unwrap_or(s.kv_dim);
        s.vocab = m.vocab.unwrap_or(s.vocab);
        s.validate()?;
        Ok(s)
    }

    pub fn toy_model(&self) -> Result<ModelConfig> {
        let m = &self.model;
        if m.shape.is_some() || m.kv_dim.is_some() {
            return Err(Error::Config("model.shape and model.kv_dim apply to cost mode only".into()));
        }
        let base = ModelConfig::tiny(RngSeed(m.seed.unwrap_or(0)));
        let cfg = ModelConfig {
            d_model: m.d_model.unwrap_or(base.d_model),
            n_layers: m.n_layers.unwrap_or(base.n_layers),
            ffn_dim: m.ffn_dim.unwrap_or(base.ffn_dim),
            vocab: m.vocab.unwrap_or(base.vocab),
            max_positions: m.max_positions.unwrap_or(base.max_positions),
            ..base
        };
        cfg.validate()?;
        if let Some(a) = &self.adapters {
            if a.rank > cfg.d_model {
                return Err(Error::Config(format!("adapters.rank = {} exceeds model.d_model = {}", a.rank, cfg.d_model)));
            }
        }
        Ok(cfg)
    }
}
