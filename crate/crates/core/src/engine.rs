//! FCFS continuous-batching simulator with adapter paging.
//!
//! At most `max_batch` requests are in flight. Each step schedules one decode
//! token for every decoding request, then fills the remaining token budget
//! with prefill chunks in admission order. Adapters applied in the step are
//! paged onto the device (LRU, at most `max_active_adapters` resident) before
//! the step runs. The clock advances by paging plus modeled step time, or by
//! measured wall time when the functional backend runs on the wall clock.
//!
//! A prefill step emits no token; the step that consumes the last prompt
//! token marks the first-token time. Every decode step commits one output
//! token, so a request with `p` prompt tokens and `o` outputs takes
//! `⌈p / chunk⌉ + o` steps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::adapter::{AdapterId, AdapterKind, PositionSchedule, ScalingRule};
use crate::cost::{
    adapter_model_bytes, adapter_step_cost, batch_step_cost, paging_time, step_time, AdapterCostSpec, HardwareProfile,
    ModelShape, SeqWork, StepCost, StepPhase,
};
use crate::error::{Error, Result};
use crate::model::{argmax, build_model, forward, AdapterSet, ForwardBatch, KvCache, ModelConfig, ModelWeights, Phase, SequenceInput};
use crate::stats::{aggregate, LatencyRecord, MetricsReport};
use crate::tensor::RngSeed;
use crate::workload::{generate_workload, prompt_tokens, RequestSpec, WorkloadConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineMode {
    Functional,
    #[serde(alias = "cost_simulated")]
    Cost,
}

impl fmt::Display for EngineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EngineMode::Functional => "functional",
            EngineMode::Cost => "cost",
        })
    }
}

/// Time source for the functional backend. Cost simulation is always modeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockSource {
    #[default]
    Wall,
    Modeled,
}

/// Prefill chunk length: whole prompt or a fixed token count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChunkSize {
    #[default]
    Full,
    Tokens(usize),
}

impl Serialize for ChunkSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ChunkSize::Full => s.serialize_str("full"),
            ChunkSize::Tokens(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for ChunkSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Name(String),
            Tokens(u64),
        }
        match Raw::deserialize(d)? {
            Raw::Name(s) if s == "full" => Ok(ChunkSize::Full),
            Raw::Name(s) => Err(serde::de::Error::custom(format!("chunk_size must be \"full\" or a token count, got {s:?}"))),
            Raw::Tokens(0) => Err(serde::de::Error::custom("chunk_size must be positive")),
            Raw::Tokens(n) => Ok(ChunkSize::Tokens(n as usize)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub max_batch: usize,
    pub max_active_adapters: usize,
    /// Host catalogue capacity; `None` means `N + 1`.
    pub max_host_adapters: Option<usize>,
    pub chunk_size: ChunkSize,
    /// Tokens per step across decode and prefill.
    pub token_budget: usize,
    pub mode: EngineMode,
    pub clock: ClockSource,
    pub warmup: bool,
    pub record_trace: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_batch: 32,
            max_active_adapters: 32,
            max_host_adapters: None,
            chunk_size: ChunkSize::Full,
            token_budget: 2048,
            mode: EngineMode::Cost,
            clock: ClockSource::Wall,
            warmup: true,
            record_trace: true,
        }
    }
}

/// Device and host adapter capacities after defaults are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolLimits {
    pub device: usize,
    pub host: usize,
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_batch == 0 || self.max_active_adapters == 0 {
            return Err(Error::Config("max_batch and max_active_adapters must be at least 1".into()));
        }
        if self.token_budget < self.max_batch {
            return Err(Error::Config(format!(
                "token_budget {} must cover one decode token per slot ({})",
                self.token_budget, self.max_batch
            )));
        }
        if let ChunkSize::Tokens(0) = self.chunk_size {
            return Err(Error::Config("chunk_size must be positive".into()));
        }
        Ok(())
    }

    /// With the default host capacity `N + 1`, the device cap is clamped to
    /// it; an explicit host capacity below the device cap is an error.
    pub fn pool_limits(&self, n_adapters: usize) -> Result<PoolLimits> {
        self.validate()?;
        let host = match self.max_host_adapters {
            Some(h) if h < self.max_active_adapters => {
                return Err(Error::Config(format!(
                    "max_host_adapters {h} is below max_active_adapters {}",
                    self.max_active_adapters
                )))
            }
            Some(h) => h,
            None => n_adapters + 1,
        };
        if n_adapters > host {
            return Err(Error::Config(format!("{n_adapters} adapters do not fit a host catalogue of {host}")));
        }
        Ok(PoolLimits { device: self.max_active_adapters.min(host), host })
    }
}

/// Adapter population served by the engine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSetup {
    pub kind: AdapterKind,
    pub rank: usize,
    pub schedule: PositionSchedule,
    #[serde(default)]
    pub scaling: Option<ScalingRule>,
    pub count: usize,
}

impl AdapterSetup {
    pub fn scaling_rule(&self) -> ScalingRule {
        self.scaling.unwrap_or_else(|| ScalingRule::default_for(self.kind))
    }

    pub fn cost_spec(&self) -> AdapterCostSpec {
        AdapterCostSpec { kind: self.kind, rank: self.rank, schedule: self.schedule }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.count == 0 {
            return Err(Error::Config("adapter rank and count must be positive".into()));
        }
        Ok(())
    }
}

/// Non-zero adapters for the functional backend, one per id.
pub fn build_catalogue(model: &ModelConfig, setup: &AdapterSetup, seed: RngSeed) -> Result<Vec<AdapterSet>> {
    (0..setup.count)
        .map(|i| AdapterSet::perturbed(model, setup.kind, setup.rank, setup.scaling_rule(), seed.derive_index("catalogue", i as u64)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum RequestPhase {
    Queued,
    Prefilling { consumed: usize },
    Decoding { emitted: usize },
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestState {
    pub spec: RequestSpec,
    pub phase: RequestPhase,
    pub t_admit: Option<f64>,
    pub t_first_token: Option<f64>,
    pub t_finish: Option<f64>,
}

impl RequestState {
    pub fn new(spec: RequestSpec) -> Self {
        Self { spec, phase: RequestPhase::Queued, t_admit: None, t_first_token: None, t_finish: None }
    }

    pub fn emitted(&self) -> usize {
        match self.phase {
            RequestPhase::Decoding { emitted } => emitted,
            RequestPhase::Finished => self.spec.output_len,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SimClock {
    pub now: f64,
    pub step: u64,
}

impl SimClock {
    pub fn advance(&mut self, seconds: f64) -> Result<()> {
        if !(seconds.is_finite() && seconds >= 0.0) {
            return Err(Error::State(format!("clock cannot advance by {seconds}")));
        }
        self.now += seconds;
        self.step += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", content = "adapter", rename_all = "lowercase")]
pub enum PoolEvent {
    Load(AdapterId),
    Evict(AdapterId),
}

/// Device-resident adapter set with LRU eviction over a host catalogue.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPool {
    capacity: usize,
    catalogue: usize,
    last_use: BTreeMap<AdapterId, u64>,
    load_counts: BTreeMap<AdapterId, u64>,
    loads: u64,
    evictions: u64,
}

impl AdapterPool {
    pub fn new(capacity: usize, catalogue: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("device adapter capacity must be positive".into()));
        }
        Ok(Self { capacity, catalogue, last_use: BTreeMap::new(), load_counts: BTreeMap::new(), loads: 0, evictions: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn resident(&self) -> impl Iterator<Item = AdapterId> + '_ {
        self.last_use.keys().copied()
    }

    pub fn resident_count(&self) -> usize {
        self.last_use.len()
    }

    pub fn is_resident(&self, id: AdapterId) -> bool {
        self.last_use.contains_key(&id)
    }

    pub fn loads(&self) -> u64 {
        self.loads
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    /// Loads per adapter over the pool's lifetime.
    pub fn load_counts(&self) -> &BTreeMap<AdapterId, u64> {
        &self.load_counts
    }

    /// Makes every adapter in `needed` resident, evicting the least recently
    /// used adapters outside `needed` when full. Loads happen in id order.
    pub fn ensure_resident(&mut self, needed: &BTreeSet<AdapterId>, step: u64) -> Result<Vec<PoolEvent>> {
        if needed.len() > self.capacity {
            return Err(Error::InfeasibleBatch { needed: needed.len(), capacity: self.capacity });
        }
        if let Some(id) = needed.iter().find(|id| id.index() >= self.catalogue) {
            return Err(Error::Routing(*id));
        }
        let mut events = Vec::new();
        for &id in needed {
            if !self.last_use.contains_key(&id) {
                if self.last_use.len() == self.capacity {
                    let victim = self
                        .last_use
                        .iter()
                        .filter(|(k, _)| !needed.contains(k))
                        .min_by_key(|(k, t)| (**t, **k))
                        .map(|(k, _)| *k)
                        .ok_or_else(|| Error::State("no evictable adapter".into()))?;
                    self.last_use.remove(&victim);
                    self.evictions += 1;
                    events.push(PoolEvent::Evict(victim));
                }
                self.loads += 1;
                *self.load_counts.entry(id).or_insert(0) += 1;
                events.push(PoolEvent::Load(id));
            }
            self.last_use.insert(id, step);
        }
        Ok(events)
    }
}

/// Roofline clock for a model shape and optional adapter population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub shape: ModelShape,
    pub hw: HardwareProfile,
    pub adapter: Option<AdapterCostSpec>,
}

impl CostModel {
    pub fn adapter_bytes(&self) -> u64 {
        self.adapter.map(|a| adapter_model_bytes(&self.shape, a.kind, a.rank, &self.hw)).unwrap_or(0)
    }

    /// Base and adapter cost of a planned step.
    pub fn plan_cost(&self, plan: &StepPlan) -> (StepCost, StepCost) {
        let phase = plan.phase();
        let work: Vec<SeqWork> = plan.entries.iter().map(|e| SeqWork { query: e.tokens, context: e.context_after() }).collect();
        let base = batch_step_cost(&self.shape, phase, &work, &self.hw);
        let adapter = match self.adapter {
            Some(spec) => {
                let mut per: BTreeMap<AdapterId, usize> = BTreeMap::new();
                for e in plan.entries.iter().filter(|e| e.applies) {
                    *per.entry(e.adapter).or_insert(0) += e.tokens;
                }
                let counts: Vec<usize> = per.into_values().collect();
                adapter_step_cost(&self.shape, &spec, phase, &counts, &self.hw)
            }
            None => StepCost::zero(phase),
        };
        (base, adapter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Prefill,
    Decode,
}

/// One request's share of a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub request_id: u64,
    pub adapter: AdapterId,
    pub kind: EntryKind,
    /// Cached positions before the step.
    pub context_before: usize,
    pub tokens: usize,
    pub prompt_len: usize,
    /// Whether the adapter is applied to these tokens.
    pub applies: bool,
}

impl PlanEntry {
    pub fn context_after(&self) -> usize {
        self.context_before + self.tokens
    }

    pub fn completes_prefill(&self) -> bool {
        self.kind == EntryKind::Prefill && self.context_after() == self.prompt_len
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepPlan {
    pub entries: Vec<PlanEntry>,
    /// Adapters that must be resident for this step.
    pub needed: BTreeSet<AdapterId>,
}

impl StepPlan {
    pub fn phase(&self) -> StepPhase {
        let pre = self.entries.iter().any(|e| e.kind == EntryKind::Prefill);
        let dec = self.entries.iter().any(|e| e.kind == EntryKind::Decode);
        match (pre, dec) {
            (true, true) => StepPhase::Mixed,
            (true, false) => StepPhase::Prefill,
            _ => StepPhase::Decode,
        }
    }

    pub fn tokens(&self, kind: EntryKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).map(|e| e.tokens).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Admit,
    Load,
    Evict,
    Prefill,
    FirstToken,
    Finish,
    Sync,
}

/// One line of the replayable event trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub step: u64,
    pub clock: f64,
    pub kind: EventKind,
    pub request_id: Option<u64>,
    pub adapter_id: Option<u32>,
    pub tokens: usize,
}

pub fn write_trace<W: Write>(trace: &[TraceEvent], out: &mut W) -> Result<()> {
    for e in trace {
        serde_json::to_writer(&mut *out, e).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Per-step accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub start: f64,
    pub phase: StepPhase,
    pub prefill_tokens: usize,
    pub decode_tokens: usize,
    pub paging_seconds: f64,
    pub compute_seconds: f64,
    pub base: Option<StepCost>,
    pub adapter: Option<StepCost>,
    pub workset: usize,
    pub resident: usize,
    /// Adapters applied in the step.
    pub applied: Vec<AdapterId>,
    /// True when the model skipped per-token mask work.
    pub mask_fast_path: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub records: Vec<LatencyRecord>,
    pub states: Vec<RequestState>,
    pub trace: Vec<TraceEvent>,
    pub steps: Vec<StepRecord>,
    pub emitted_tokens: u64,
    pub loads: u64,
    pub evictions: u64,
    /// Greedy outputs per request (functional backend only).
    pub generated: BTreeMap<u64, Vec<u32>>,
}

struct FuncSeq {
    prompt: Vec<u32>,
    cache: Option<KvCache>,
    pending: Option<u32>,
    output: Vec<u32>,
}

/// Runs the toy decoder for real. Device slots hold copies of the resident
/// adapters; sequences are routed by slot.
struct FunctionalBackend {
    weights: ModelWeights,
    host: Vec<AdapterSet>,
    slots: Vec<AdapterSet>,
    slot_of: BTreeMap<AdapterId, usize>,
    free_slots: Vec<usize>,
    versions: Vec<u64>,
    schedule: PositionSchedule,
    token_seed: RngSeed,
    seqs: BTreeMap<u64, FuncSeq>,
}

impl FunctionalBackend {
    fn admit(&mut self, spec: &RequestSpec) -> Result<()> {
        let vocab = self.weights.config().vocab as u32;
        let max = self.weights.config().max_positions;
        if spec.total_tokens() > max {
            return Err(Error::Range(format!("request {} needs {} positions, model has {max}", spec.request_id, spec.total_tokens())));
        }
        let prompt = prompt_tokens(self.token_seed, spec, 0, vocab);
        let cache = KvCache::new(self.weights.config());
        self.seqs.insert(spec.request_id, FuncSeq { prompt, cache: Some(cache), pending: None, output: Vec::new() });
        Ok(())
    }

    fn page(&mut self, events: &[PoolEvent]) {
        for e in events {
            match *e {
                PoolEvent::Evict(id) => {
                    if let Some(slot) = self.slot_of.remove(&id) {
                        self.free_slots.push(slot);
                    }
                }
                PoolEvent::Load(id) => {
                    let copy = self.host[id.index()].clone();
                    let slot = match self.free_slots.pop() {
                        Some(s) => {
                            self.slots[s] = copy;
                            s
                        }
                        None => {
                            self.slots.push(copy);
                            self.slots.len() - 1
                        }
                    };
                    self.slot_of.insert(id, slot);
                }
            }
        }
    }

    fn execute(&mut self, plan: &StepPlan, adapters_on: bool) -> Result<bool> {
        let mut inputs = Vec::with_capacity(plan.entries.len());
        let mut caches = Vec::with_capacity(plan.entries.len());
        for e in &plan.entries {
            let seq = self.seqs.get_mut(&e.request_id).ok_or_else(|| Error::State(format!("unknown request {}", e.request_id)))?;
            let (tokens, phase) = match e.kind {
                EntryKind::Prefill => (seq.prompt[e.context_before..e.context_after()].to_vec(), Phase::Prefill),
                EntryKind::Decode => {
                    let t = seq.pending.ok_or_else(|| Error::State(format!("request {} has no pending token", e.request_id)))?;
                    (vec![t], Phase::Decode)
                }
            };
            let adapter = if adapters_on && e.applies {
                let slot = self.slot_of.get(&e.adapter).ok_or_else(|| Error::State(format!("{} used while not resident", e.adapter)))?;
                Some(AdapterId(*slot as u32))
            } else {
                None
            };
            inputs.push(SequenceInput { tokens, prompt_len: e.prompt_len, phase, adapter, schedule: self.schedule });
            caches.push(seq.cache.take().ok_or_else(|| Error::State("cache already borrowed".into()))?);
        }
        let versions = self.versions.clone();
        let batch = ForwardBatch::new(inputs)?;
        let result = forward(&self.weights, &batch, &self.slots, &mut caches);
        for (e, cache) in plan.entries.iter().zip(caches) {
            if let Some(seq) = self.seqs.get_mut(&e.request_id) {
                seq.cache = Some(cache);
            }
        }
        let out = result?;
        if versions != self.versions {
            return Err(Error::Sync("adapter parameters changed during a step".into()));
        }
        for (e, logits) in plan.entries.iter().zip(&out.logits) {
            let seq = self.seqs.get_mut(&e.request_id).expect("checked above");
            match e.kind {
                EntryKind::Prefill if e.completes_prefill() => seq.pending = Some(argmax(logits)),
                EntryKind::Prefill => {}
                EntryKind::Decode => {
                    seq.output.extend(seq.pending);
                    seq.pending = Some(argmax(logits));
                }
            }
        }
        Ok(out.mask.is_fast_path())
    }

    fn release(&mut self, id: u64) -> Option<Vec<u32>> {
        self.seqs.remove(&id).map(|s| s.output)
    }

    fn sync(&mut self, updates: &BTreeMap<AdapterId, AdapterSet>) -> Result<usize> {
        for (id, set) in updates {
            let current = self.host.get(id.index()).ok_or(Error::Sync(format!("unknown {id}")))?;
            if !current.same_layout(set) {
                return Err(Error::Sync(format!("{id}: replacement does not match the registered layout")));
            }
            set.check_compatible(self.weights.config()).map_err(|e| Error::Sync(format!("{id}: {e}")))?;
        }
        for (id, set) in updates {
            self.host[id.index()] = set.clone();
            if let Some(slot) = self.slot_of.get(id) {
                self.slots[*slot] = set.clone();
            }
            self.versions[id.index()] += 1;
        }
        Ok(updates.len())
    }
}

/// Parameter replacement request delivered to the engine between steps.
pub struct SyncRequest {
    pub updates: BTreeMap<AdapterId, AdapterSet>,
    reply: Sender<Result<usize>>,
}

/// Cloneable handle for submitting weight syncs from other threads.
#[derive(Clone)]
pub struct SyncHandle {
    tx: Sender<SyncRequest>,
}

impl SyncHandle {
    /// Queues `updates`; the receiver yields the outcome once the engine
    /// applies them at a step boundary.
    pub fn submit(&self, updates: BTreeMap<AdapterId, AdapterSet>) -> Result<Receiver<Result<usize>>> {
        let (reply, rx) = channel();
        self.tx.send(SyncRequest { updates, reply }).map_err(|_| Error::Sync("engine has shut down".into()))?;
        Ok(rx)
    }
}

pub struct Engine {
    config: EngineConfig,
    setup: Option<AdapterSetup>,
    limits: PoolLimits,
    cost: Option<CostModel>,
    functional: Option<FunctionalBackend>,
    pool: AdapterPool,
    sync_tx: Sender<SyncRequest>,
    sync_rx: Receiver<SyncRequest>,
    syncs_applied: u64,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("config", &self.config)
            .field("setup", &self.setup)
            .field("limits", &self.limits)
            .field("cost", &self.cost)
            .field("pool", &self.pool)
            .finish_non_exhaustive()
    }
}

impl Engine {
    fn with_parts(
        config: EngineConfig,
        setup: Option<AdapterSetup>,
        cost: Option<CostModel>,
        functional: Option<FunctionalBackend>,
    ) -> Result<Self> {
        if let Some(s) = &setup {
            s.validate()?;
        }
        let n = setup.map(|s| s.count).unwrap_or(0);
        let limits = config.pool_limits(n)?;
        let pool = AdapterPool::new(limits.device, n)?;
        let (sync_tx, sync_rx) = channel();
        Ok(Self { config, setup, limits, cost, functional, pool, sync_tx, sync_rx, syncs_applied: 0 })
    }

    /// Roofline-timed engine over an arbitrary model shape.
    pub fn cost_simulated(config: EngineConfig, setup: Option<AdapterSetup>, shape: ModelShape, hw: HardwareProfile) -> Result<Self> {
        shape.validate()?;
        hw.validate()?;
        let cost = CostModel { shape, hw, adapter: setup.map(|s| s.cost_spec()) };
        let config = EngineConfig { mode: EngineMode::Cost, ..config };
        Self::with_parts(config, setup, Some(cost), None)
    }

    /// Engine that runs the toy decoder. `catalogue[i]` serves adapter `i`.
    /// With a modeled clock, `hw` prices steps on the toy shape.
    pub fn functional(
        config: EngineConfig,
        setup: Option<AdapterSetup>,
        model: ModelConfig,
        catalogue: Vec<AdapterSet>,
        hw: HardwareProfile,
    ) -> Result<Self> {
        let weights = build_model(model.clone())?;
        if let Some(s) = &setup {
            if catalogue.len() != s.count {
                return Err(Error::Config(format!("{} adapters in catalogue, setup declares {}", catalogue.len(), s.count)));
            }
            for set in &catalogue {
                set.check_compatible(&model)?;
                if set.kind() != s.kind {
                    return Err(Error::Config(format!("catalogue holds {} adapters, setup declares {}", set.kind(), s.kind)));
                }
            }
        }
        let cost = match config.clock {
            ClockSource::Modeled => {
                hw.validate()?;
                Some(CostModel { shape: ModelShape::from_model_config(&model), hw, adapter: setup.map(|s| s.cost_spec()) })
            }
            ClockSource::Wall => None,
        };
        let backend = FunctionalBackend {
            weights,
            versions: vec![0; catalogue.len()],
            host: catalogue,
            slots: Vec::new(),
            slot_of: BTreeMap::new(),
            free_slots: Vec::new(),
            schedule: setup.map(|s| s.schedule).unwrap_or(PositionSchedule::PrefillOnly),
            token_seed: RngSeed(0),
            seqs: BTreeMap::new(),
        };
        let config = EngineConfig { mode: EngineMode::Functional, ..config };
        Self::with_parts(config, setup, cost, Some(backend))
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn limits(&self) -> PoolLimits {
        self.limits
    }

    pub fn pool(&self) -> &AdapterPool {
        &self.pool
    }

    pub fn syncs_applied(&self) -> u64 {
        self.syncs_applied
    }

    pub fn sync_handle(&self) -> SyncHandle {
        SyncHandle { tx: self.sync_tx.clone() }
    }

    /// Host copy of an adapter (functional backend only).
    pub fn adapter(&self, id: AdapterId) -> Option<&AdapterSet> {
        self.functional.as_ref().and_then(|f| f.host.get(id.index()))
    }

    /// Replaces adapter parameters atomically. Every update is validated
    /// before any is applied.
    pub fn weight_sync(&mut self, updates: &BTreeMap<AdapterId, AdapterSet>) -> Result<usize> {
        if updates.is_empty() {
            return Ok(0);
        }
        let setup = self.setup.ok_or_else(|| Error::Sync("engine serves no adapters".into()))?;
        let applied = match self.functional.as_mut() {
            Some(f) => f.sync(updates)?,
            None => {
                for (id, set) in updates {
                    if id.index() >= setup.count {
                        return Err(Error::Sync(format!("unknown {id}")));
                    }
                    if set.kind() != setup.kind {
                        return Err(Error::Sync(format!("{id}: expected {} parameters, got {}", setup.kind, set.kind())));
                    }
                }
                updates.len()
            }
        };
        self.syncs_applied += applied as u64;
        Ok(applied)
    }

    /// Applies queued syncs; returns how many adapters were replaced.
    pub fn apply_pending_syncs(&mut self) -> usize {
        let mut total = 0;
        while let Ok(req) = self.sync_rx.try_recv() {
            let result = self.weight_sync(&req.updates);
            if let Ok(n) = result {
                total += n;
            }
            let _ = req.reply.send(result);
        }
        total
    }

    /// Warmup over the same workload shape with a derived seed (discarded),
    /// then the timed run.
    pub fn run(&mut self, workload: &WorkloadConfig) -> Result<RunOutput> {
        self.check_workload(workload)?;
        if self.config.warmup {
            let warm = WorkloadConfig { seed: workload.seed.derive("warmup"), ..workload.clone() };
            let specs = generate_workload(&warm)?;
            self.run_requests(&specs, warm.seed.derive("tokens"))?;
        }
        let specs = generate_workload(workload)?;
        self.run_requests(&specs, workload.seed.derive("tokens"))
    }

    fn check_workload(&self, workload: &WorkloadConfig) -> Result<()> {
        workload.validate()?;
        if let Some(s) = &self.setup {
            if workload.n_adapters != s.count {
                return Err(Error::Config(format!(
                    "workload draws from {} adapters but {} are configured",
                    workload.n_adapters, s.count
                )));
            }
        }
        if let Some(f) = &self.functional {
            let max = f.weights.config().max_positions;
            if workload.l_max > max {
                return Err(Error::Config(format!("l_max {} exceeds the model's {max} positions", workload.l_max)));
            }
        }
        Ok(())
    }

    /// Serves `specs` to completion from a fresh clock. Adapter residency
    /// carries over between calls.
    pub fn run_requests(&mut self, specs: &[RequestSpec], token_seed: RngSeed) -> Result<RunOutput> {
        if specs.is_empty() {
            return Err(Error::Empty("no requests to serve".into()));
        }
        for s in specs {
            if s.prompt_len == 0 || s.output_len == 0 {
                return Err(Error::Range(format!("request {} has empty prompt or output", s.request_id)));
            }
            if let Some(setup) = &self.setup {
                if s.adapter.index() >= setup.count {
                    return Err(Error::Routing(s.adapter));
                }
            }
        }
        if let Some(f) = self.functional.as_mut() {
            f.token_seed = token_seed;
            f.seqs.clear();
        }
        let loads_before = self.pool.loads();
        let evictions_before = self.pool.evictions();

        let index: BTreeMap<u64, usize> = specs.iter().enumerate().map(|(i, s)| (s.request_id, i)).collect();
        if index.len() != specs.len() {
            return Err(Error::Config("duplicate request ids".into()));
        }
        let mut order: Vec<usize> = (0..specs.len()).collect();
        order.sort_by_key(|&i| (specs[i].arrival_index, specs[i].request_id));
        let mut queue: std::collections::VecDeque<usize> = order.into();
        let mut states: Vec<RequestState> = specs.iter().map(|s| RequestState::new(*s)).collect();
        let mut workset: Vec<usize> = Vec::with_capacity(self.config.max_batch);
        let mut clock = SimClock::default();
        let mut trace = Vec::new();
        let mut steps = Vec::new();
        let mut generated = BTreeMap::new();
        let mut emitted_total = 0u64;

        self.admit(&mut queue, &mut workset, &mut states, &clock, &mut trace)?;
        while !workset.is_empty() {
            let synced = self.apply_pending_syncs();
            if synced > 0 {
                self.push_event(&mut trace, &clock, EventKind::Sync, None, None, synced);
            }
            let plan = self.plan_step(&workset, &states);
            if plan.entries.is_empty() {
                return Err(Error::State("scheduler produced an empty step".into()));
            }
            let start = clock.now;
            let step_index = clock.step;
            let wall = Instant::now();

            let events = self.pool.ensure_resident(&plan.needed, step_index)?;
            if self.pool.resident_count() > self.limits.device {
                return Err(Error::State("resident adapters exceed device capacity".into()));
            }
            if let Some(id) = plan.needed.iter().find(|id| !self.pool.is_resident(**id)) {
                return Err(Error::State(format!("{id} scheduled while not resident")));
            }
            for e in &events {
                let (kind, id) = match e {
                    PoolEvent::Load(id) => (EventKind::Load, id),
                    PoolEvent::Evict(id) => (EventKind::Evict, id),
                };
                self.push_event(&mut trace, &clock, kind, None, Some(id.0), 0);
            }
            let loads = events.iter().filter(|e| matches!(e, PoolEvent::Load(_))).count();

            let mut fast_path = false;
            if let Some(f) = self.functional.as_mut() {
                f.page(&events);
                fast_path = f.execute(&plan, self.setup.is_some())?;
            }
            let (paging_seconds, compute_seconds, base, adapter) = match &self.cost {
                Some(cm) => {
                    let (base, adapter) = cm.plan_cost(&plan);
                    let paging = loads as f64 * paging_time(cm.adapter_bytes(), &cm.hw);
                    (paging, step_time(&(base + adapter), &cm.hw), Some(base), Some(adapter))
                }
                None => (0.0, wall.elapsed().as_secs_f64(), None, None),
            };
            clock.advance(paging_seconds + compute_seconds)?;

            let mut finished = Vec::new();
            for e in &plan.entries {
                let st = &mut states[index[&e.request_id]];
                match e.kind {
                    EntryKind::Prefill => {
                        if self.config.record_trace {
                            trace.push(TraceEvent {
                                step: step_index,
                                clock: clock.now,
                                kind: EventKind::Prefill,
                                request_id: Some(e.request_id),
                                adapter_id: Some(e.adapter.0),
                                tokens: e.tokens,
                            });
                        }
                        if e.completes_prefill() {
                            st.phase = RequestPhase::Decoding { emitted: 0 };
                            st.t_first_token = Some(clock.now);
                            self.push_request_event(&mut trace, step_index, &clock, EventKind::FirstToken, st, 0);
                        } else {
                            st.phase = RequestPhase::Prefilling { consumed: e.context_after() };
                        }
                    }
                    EntryKind::Decode => {
                        let emitted = st.emitted() + 1;
                        emitted_total += 1;
                        if emitted == st.spec.output_len {
                            st.phase = RequestPhase::Finished;
                            st.t_finish = Some(clock.now);
                            self.push_request_event(&mut trace, step_index, &clock, EventKind::Finish, st, emitted);
                            finished.push(e.request_id);
                        } else {
                            st.phase = RequestPhase::Decoding { emitted };
                        }
                    }
                }
            }
            steps.push(StepRecord {
                step: step_index,
                start,
                phase: plan.phase(),
                prefill_tokens: plan.tokens(EntryKind::Prefill),
                decode_tokens: plan.tokens(EntryKind::Decode),
                paging_seconds,
                compute_seconds,
                base,
                adapter,
                workset: workset.len(),
                resident: self.pool.resident_count(),
                applied: plan.needed.iter().copied().collect(),
                mask_fast_path: fast_path,
            });
            for id in finished {
                let idx = index[&id];
                workset.retain(|&w| w != idx);
                if let Some(f) = self.functional.as_mut() {
                    if let Some(out) = f.release(id) {
                        generated.insert(id, out);
                    }
                }
            }
            self.admit(&mut queue, &mut workset, &mut states, &clock, &mut trace)?;
        }

        let mut records = Vec::with_capacity(states.len());
        for st in &states {
            match (st.phase, st.t_admit, st.t_first_token, st.t_finish) {
                (RequestPhase::Finished, Some(a), Some(f), Some(e)) if a <= f && f <= e => records.push(LatencyRecord {
                    request_id: st.spec.request_id,
                    prompt_len: st.spec.prompt_len,
                    output_len: st.spec.output_len,
                    encode: f - a,
                    decode: e - f,
                }),
                _ => return Err(Error::State(format!("request {} ended in {:?}", st.spec.request_id, st.phase))),
            }
        }
        let expected: u64 = specs.iter().map(|s| s.output_len as u64).sum();
        if emitted_total != expected {
            return Err(Error::State(format!("emitted {emitted_total} tokens, requested {expected}")));
        }
        let total_tokens: u64 = specs.iter().map(|s| s.total_tokens() as u64).sum();
        let report = aggregate(&records, clock.now, total_tokens)?;
        Ok(RunOutput {
            report,
            records,
            states,
            trace,
            steps,
            emitted_tokens: emitted_total,
            loads: self.pool.loads() - loads_before,
            evictions: self.pool.evictions() - evictions_before,
            generated,
        })
    }

    fn push_event(&self, trace: &mut Vec<TraceEvent>, clock: &SimClock, kind: EventKind, request_id: Option<u64>, adapter: Option<u32>, tokens: usize) {
        if self.config.record_trace {
            trace.push(TraceEvent { step: clock.step, clock: clock.now, kind, request_id, adapter_id: adapter, tokens });
        }
    }

    fn push_request_event(&self, trace: &mut Vec<TraceEvent>, step: u64, clock: &SimClock, kind: EventKind, st: &RequestState, tokens: usize) {
        if self.config.record_trace {
            trace.push(TraceEvent {
                step,
                clock: clock.now,
                kind,
                request_id: Some(st.spec.request_id),
                adapter_id: Some(st.spec.adapter.0),
                tokens,
            });
        }
    }

    /// FCFS: fills every free slot from the head of the queue.
    fn admit(
        &mut self,
        queue: &mut std::collections::VecDeque<usize>,
        workset: &mut Vec<usize>,
        states: &mut [RequestState],
        clock: &SimClock,
        trace: &mut Vec<TraceEvent>,
    ) -> Result<()> {
        while workset.len() < self.config.max_batch {
            let Some(idx) = queue.pop_front() else { break };
            let st = &mut states[idx];
            st.phase = RequestPhase::Prefilling { consumed: 0 };
            st.t_admit = Some(clock.now);
            if let Some(f) = self.functional.as_mut() {
                f.admit(&st.spec)?;
            }
            workset.push(idx);
            self.push_request_event(trace, clock.step, clock, EventKind::Admit, st, st.spec.prompt_len);
        }
        if workset.len() > self.config.max_batch {
            return Err(Error::State("workset exceeds max_batch".into()));
        }
        Ok(())
    }

    fn applies(&self, kind: EntryKind) -> bool {
        match (self.setup, kind) {
            (None, _) => false,
            (Some(_), EntryKind::Prefill) => true,
            (Some(s), EntryKind::Decode) => s.schedule == PositionSchedule::AllPositions,
        }
    }

    /// Decode tokens first, then prefill chunks, both in admission order.
    /// A request whose adapter would push the step past the device cap
    /// waits for a later step.
    pub fn plan_step(&self, workset: &[usize], states: &[RequestState]) -> StepPlan {
        let mut plan = StepPlan::default();
        let mut budget = self.config.token_budget;
        let cap = self.limits.device;
        let fits = |plan: &StepPlan, id: AdapterId, applies: bool| !applies || plan.needed.contains(&id) || plan.needed.len() < cap;

        for &idx in workset {
            let st = &states[idx];
            if let RequestPhase::Decoding { emitted } = st.phase {
                let applies = self.applies(EntryKind::Decode);
                if budget == 0 || !fits(&plan, st.spec.adapter, applies) {
                    continue;
                }
                budget -= 1;
                if applies {
                    plan.needed.insert(st.spec.adapter);
                }
                plan.entries.push(PlanEntry {
                    request_id: st.spec.request_id,
                    adapter: st.spec.adapter,
                    kind: EntryKind::Decode,
                    context_before: st.spec.prompt_len + emitted,
                    tokens: 1,
                    prompt_len: st.spec.prompt_len,
                    applies,
                });
            }
        }
        for &idx in workset {
            let st = &states[idx];
            if let RequestPhase::Prefilling { consumed } = st.phase {
                let applies = self.applies(EntryKind::Prefill);
                if budget == 0 {
                    break;
                }
                if !fits(&plan, st.spec.adapter, applies) {
                    continue;
                }
                let remaining = st.spec.prompt_len - consumed;
                let chunk = match self.config.chunk_size {
                    ChunkSize::Full => remaining,
                    ChunkSize::Tokens(c) => remaining.min(c),
                }
                .min(budget);
                budget -= chunk;
                if applies {
                    plan.needed.insert(st.spec.adapter);
                }
                plan.entries.push(PlanEntry {
                    request_id: st.spec.request_id,
                    adapter: st.spec.adapter,
                    kind: EntryKind::Prefill,
                    context_before: consumed,
                    tokens: chunk,
                    prompt_len: st.spec.prompt_len,
                    applies,
                });
            }
        }
        plan
    }
}

/// Resolves adapter residency for one step and returns the transfer time.
pub fn ensure_resident(
    pool: &mut AdapterPool,
    needed: &BTreeSet<AdapterId>,
    clock: &SimClock,
    adapter_bytes: u64,
    hw: &HardwareProfile,
) -> Result<(f64, Vec<PoolEvent>)> {
    let events = pool.ensure_resident(needed, clock.step)?;
    let loads = events.iter().filter(|e| matches!(e, PoolEvent::Load(_))).count();
    Ok((loads as f64 * paging_time(adapter_bytes, hw), events))
}
