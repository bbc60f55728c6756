//! A tiny decoder used to exercise adapter routing end to end.
//!
//! Each layer is single-head causal attention followed by a gated MLP, both
//! with residual adds and no normalisation; positions use a learned absolute
//! embedding. LoRA hooks wrap any subset of the seven projections, and the
//! ReFT hook sits on the residual stream right after the MLP add.
//!
//! Position masks are computed once per forward from `query_start_loc` and
//! each sequence's phase, then sliced per sequence by every hooked module.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    apply_with_mask, init_zero_delta, AdapterId, AdapterKind, AdapterParams, AdapterWeights, PositionSchedule,
    ScalingRule, SiteDims,
};
use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix, RngSeed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Projection {
    pub const ALL: [Projection; 7] = [
        Projection::Q,
        Projection::K,
        Projection::V,
        Projection::O,
        Projection::Gate,
        Projection::Up,
        Projection::Down,
    ];

    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(tag: u8) -> Result<Self> {
        Self::ALL
            .get(tag as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown projection tag {tag}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub vocab: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub seed: RngSeed,
    pub lora_targets: BTreeSet<Projection>,
    /// Zero all attention projections, leaving the KV cache as a dead end.
    #[serde(default)]
    pub ablate_attention: bool,
}

impl ModelConfig {
    pub fn tiny(seed: RngSeed) -> Self {
        Self {
            d_model: 16,
            n_layers: 2,
            vocab: 64,
            ffn_dim: 32,
            max_positions: 256,
            seed,
            lora_targets: Projection::ALL.into_iter().collect(),
            ablate_attention: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model < 2 || self.n_layers < 1 || self.vocab < 1 || self.ffn_dim < 1 || self.max_positions < 1 {
            return Err(Error::Config(format!("invalid model config {self:?}")));
        }
        Ok(())
    }

    /// `(input, output)` widths of a projection.
    pub fn projection_dims(&self, p: Projection) -> SiteDims {
        let d = self.d_model;
        match p {
            Projection::Q | Projection::K | Projection::V | Projection::O => SiteDims::square(d),
            Projection::Gate | Projection::Up => SiteDims { input: d, output: self.ffn_dim },
            Projection::Down => SiteDims { input: self.ffn_dim, output: d },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerWeights {
    proj: BTreeMap<Projection, Matrix>,
}

/// Frozen base-model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    tok_emb: Matrix,
    pos_emb: Matrix,
    layers: Vec<LayerWeights>,
    unembed: Matrix,
}

pub fn build_model(config: ModelConfig) -> Result<ModelWeights> {
    config.validate()?;
    let d = config.d_model;
    let mut rng = config.seed.derive("model").rng();
    let tok_emb = Matrix::gaussian(config.vocab, d, 0.5, &mut rng);
    let pos_emb = Matrix::gaussian(config.max_positions, d, 0.1, &mut rng);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let mut proj = BTreeMap::new();
        for p in Projection::ALL {
            let SiteDims { input, output } = config.projection_dims(p);
            let mut w = Matrix::gaussian(output, input, 0.5 / (input as f64).sqrt(), &mut rng);
            if config.ablate_attention && matches!(p, Projection::Q | Projection::K | Projection::V | Projection::O) {
                w = Matrix::zeros(output, input);
            }
            proj.insert(p, w);
        }
        layers.push(LayerWeights { proj });
    }
    let unembed = Matrix::gaussian(config.vocab, d, 1.0 / (d as f64).sqrt(), &mut rng);
    Ok(ModelWeights { config, tok_emb, pos_emb, layers, unembed })
}

impl ModelWeights {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
}

/// Hook parameters of one adapter in one layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerAdapters {
    pub lora: BTreeMap<Projection, AdapterParams>,
    pub reft: Option<AdapterParams>,
}

/// One catalogue entry: an adapter's parameters at every hooked site.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    kind: AdapterKind,
    layers: Vec<LayerAdapters>,
}

impl AdapterSet {
    pub fn new(kind: AdapterKind, layers: Vec<LayerAdapters>) -> Result<Self> {
        for layer in &layers {
            let ok = if kind.is_reft() {
                layer.lora.is_empty() && layer.reft.as_ref().is_some_and(|p| p.kind() == kind)
            } else {
                layer.reft.is_none() && layer.lora.values().all(|p| p.kind() == kind)
            };
            if !ok {
                return Err(Error::Shape(format!("layer hooks inconsistent with {kind}")));
            }
        }
        Ok(Self { kind, layers })
    }

    /// Untrained adapter at every site of `config`.
    pub fn zero_delta(config: &ModelConfig, kind: AdapterKind, rank: usize, scaling: ScalingRule, seed: RngSeed) -> Result<Self> {
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let layer_seed = seed.derive_index("layer", l as u64);
            let mut hooks = LayerAdapters::default();
            if kind.is_reft() {
                hooks.reft = Some(init_zero_delta(kind, rank, SiteDims::square(config.d_model), layer_seed, scaling)?);
            } else {
                for &p in &config.lora_targets {
                    let site_seed = layer_seed.derive_index("proj", p.tag() as u64);
                    hooks.lora.insert(p, init_zero_delta(kind, rank, config.projection_dims(p), site_seed, scaling)?);
                }
            }
            layers.push(hooks);
        }
        Self::new(kind, layers)
    }

    /// Untrained-but-distinct adapter in the style of serving benchmarks: LoRA
    /// `A`, `B` ~ N(0, 0.01²); ReFT gets N(0, 0.1²) added to its source
    /// projection and bias on top of the zero-delta init.
    pub fn perturbed(config: &ModelConfig, kind: AdapterKind, rank: usize, scaling: ScalingRule, seed: RngSeed) -> Result<Self> {
        let base = Self::zero_delta(config, kind, rank, scaling, seed)?;
        let mut rng = seed.derive("perturb").rng();
        let mut noise = |m: &Matrix, std: f64| m.map(|v| v + std * rng.sample::<f64, _>(StandardNormal));
        let mut layers = Vec::with_capacity(base.layers.len());
        for layer in base.layers {
            let mut hooks = LayerAdapters::default();
            for (p, params) in layer.lora {
                let AdapterWeights::Lora { a, b } = params.weights() else { unreachable!() };
                let zero_a = Matrix::zeros(a.rows(), a.cols());
                let zero_b = Matrix::zeros(b.rows(), b.cols());
                let w = AdapterWeights::Lora { a: noise(&zero_a, 0.01), b: noise(&zero_b, 0.01) };
                hooks.lora.insert(p, AdapterParams::from_weights(w, params.scaling())?);
            }
            if let Some(params) = layer.reft {
                let w = match params.weights() {
                    AdapterWeights::Direft { a, b, bias } => AdapterWeights::Direft {
                        a: noise(a, 0.1),
                        b: b.clone(),
                        bias: noise(&Matrix::row_vector(bias), 0.1).into_data(),
                    },
                    AdapterWeights::Loreft { r, w, bias } => AdapterWeights::Loreft {
                        r: r.clone(),
                        w: noise(w, 0.1),
                        bias: noise(&Matrix::row_vector(bias), 0.1).into_data(),
                    },
                    AdapterWeights::Lora { .. } => unreachable!(),
                };
                hooks.reft = Some(AdapterParams::from_weights(w, params.scaling())?);
            }
            layers.push(hooks);
        }
        Self::new(kind, layers)
    }

    pub fn kind(&self) -> AdapterKind {
        self.kind
    }

    pub fn layers(&self) -> &[LayerAdapters] {
        &self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.lora.values().map(AdapterParams::parameter_count).sum::<usize>() + l.reft.as_ref().map_or(0, AdapterParams::parameter_count))
            .sum()
    }

    /// Checks every hook against the model's widths.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.n_layers {
            return Err(Error::Shape(format!("adapter has {} layers, model {}", self.layers.len(), config.n_layers)));
        }
        for layer in &self.layers {
            for (p, params) in &layer.lora {
                if params.dims() != config.projection_dims(*p) {
                    return Err(Error::Shape(format!("LoRA on {p:?} has dims {:?}", params.dims())));
                }
            }
            if let Some(params) = &layer.reft {
                if params.dims() != SiteDims::square(config.d_model) {
                    return Err(Error::Shape(format!("ReFT hook has dims {:?}", params.dims())));
                }
            }
        }
        Ok(())
    }

    /// Same kind, layer count and per-site shapes.
    pub fn same_layout(&self, other: &AdapterSet) -> bool {
        self.kind == other.kind
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.lora.len() == b.lora.len()
                    && a.lora.iter().zip(&b.lora).all(|((pa, x), (pb, y))| pa == pb && x.dims() == y.dims() && x.rank() == y.rank())
                    && match (&a.reft, &b.reft) {
                        (Some(x), Some(y)) => x.dims() == y.dims() && x.rank() == y.rank(),
                        (None, None) => true,
                        _ => false,
                    }
            })
    }

    fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            let n_sites = layer.lora.len() + usize::from(layer.reft.is_some());
            out.write_all(&[n_sites as u8])?;
            for (p, params) in &layer.lora {
                out.write_all(&[p.tag()])?;
                params.write_to(out)?;
            }
            if let Some(params) = &layer.reft {
                out.write_all(&[RESIDUAL_SITE_TAG])?;
                params.write_to(out)?;
            }
        }
        Ok(())
    }

    fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut n = [0u8; 4];
        input.read_exact(&mut n)?;
        let n_layers = u32::from_le_bytes(n) as usize;
        let mut layers = Vec::with_capacity(n_layers);
        let mut kind = None;
        for _ in 0..n_layers {
            let mut hooks = LayerAdapters::default();
            let mut count = [0u8; 1];
            input.read_exact(&mut count)?;
            for _ in 0..count[0] {
                let mut tag = [0u8; 1];
                input.read_exact(&mut tag)?;
                let params = AdapterParams::read_from(input)?;
                kind.get_or_insert(params.kind());
                if tag[0] == RESIDUAL_SITE_TAG {
                    hooks.reft = Some(params);
                } else {
                    hooks.lora.insert(Projection::from_tag(tag[0])?, params);
                }
            }
            layers.push(hooks);
        }
        let kind = kind.ok_or_else(|| Error::Format("adapter set without any hook".into()))?;
        Self::new(kind, layers)
    }
}

const RESIDUAL_SITE_TAG: u8 = 0xff;
const CATALOGUE_MAGIC: &[u8; 4] = b"PFTC";

/// Writes `sets` as a catalogue: magic "PFTC", count u32, then for every set
/// its layer count u32 and, per layer, a site count u8 followed by
/// `(site tag u8, adapter record)` pairs. Site tags are projection indices
/// 0..=6 (Q, K, V, O, Gate, Up, Down) or 0xff for the residual stream.
pub fn write_catalogue<W: Write>(sets: &[AdapterSet], out: &mut W) -> Result<()> {
    out.write_all(CATALOGUE_MAGIC)?;
    out.write_all(&(sets.len() as u32).to_le_bytes())?;
    for set in sets {
        set.write_to(out)?;
    }
    Ok(())
}

pub fn read_catalogue<R: Read>(input: &mut R) -> Result<Vec<AdapterSet>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CATALOGUE_MAGIC {
        return Err(Error::Format("bad catalogue magic".into()));
    }
    let mut n = [0u8; 4];
    input.read_exact(&mut n)?;
    (0..u32::from_le_bytes(n)).map(|_| AdapterSet::read_from(input)).collect()
}

/// Keys and values of one sequence, per layer, `len × d_model` each.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    d_model: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            d_model: config.d_model,
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
        }
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.len() / self.d_model)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(layers, positions, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.keys.len(), self.len(), self.d_model)
    }

    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        (&self.keys[l], &self.values[l])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefill,
    Decode,
}

/// One sequence's share of a forward pass: a prompt chunk (prefill) or the
/// single most recent token (decode).
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceInput {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    pub phase: Phase,
    pub adapter: Option<AdapterId>,
    pub schedule: PositionSchedule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardBatch {
    sequences: Vec<SequenceInput>,
    query_start_loc: Vec<usize>,
}

impl ForwardBatch {
    pub fn new(sequences: Vec<SequenceInput>) -> Result<Self> {
        let mut loc = Vec::with_capacity(sequences.len() + 1);
        loc.push(0);
        for s in &sequences {
            loc.push(loc.last().unwrap() + s.tokens.len());
        }
        Self::with_offsets(sequences, loc)
    }

    /// Uses caller-provided `query_start_loc` (length `n + 1`, starting at 0).
    pub fn with_offsets(sequences: Vec<SequenceInput>, query_start_loc: Vec<usize>) -> Result<Self> {
        if query_start_loc.len() != sequences.len() + 1 || query_start_loc.first() != Some(&0) {
            return Err(Error::Index(format!(
                "query_start_loc has {} entries for {} sequences",
                query_start_loc.len(),
                sequences.len()
            )));
        }
        for (i, s) in sequences.iter().enumerate() {
            let (lo, hi) = (query_start_loc[i], query_start_loc[i + 1]);
            if hi <= lo || hi - lo != s.tokens.len() {
                return Err(Error::Index(format!("offsets {lo}..{hi} do not match {} tokens of sequence {i}", s.tokens.len())));
            }
            if s.phase == Phase::Decode && s.tokens.len() != 1 {
                return Err(Error::Index(format!("decode sequence {i} carries {} tokens", s.tokens.len())));
            }
        }
        Ok(Self { sequences, query_start_loc })
    }

    pub fn sequences(&self) -> &[SequenceInput] {
        &self.sequences
    }

    pub fn query_start_loc(&self) -> &[usize] {
        &self.query_start_loc
    }

    pub fn total_tokens(&self) -> usize {
        *self.query_start_loc.last().unwrap_or(&0)
    }
}

/// Per-token adapter mask over the flattened batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionMask {
    bits: Vec<bool>,
    uniform: Option<bool>,
    skipped: bool,
}

impl PositionMask {
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// `Some(v)` when every token has the same value.
    pub fn uniform(&self) -> Option<bool> {
        self.uniform
    }

    /// True when the batch was all-decode under prefill-only schedules and
    /// per-token work was skipped.
    pub fn is_fast_path(&self) -> bool {
        self.skipped
    }

    pub fn slice(&self, lo: usize, hi: usize) -> &[bool] {
        &self.bits[lo..hi]
    }
}

pub fn compute_position_mask(batch: &ForwardBatch) -> PositionMask {
    let n = batch.total_tokens();
    let all_decode_prefill_only = batch
        .sequences
        .iter()
        .all(|s| s.phase == Phase::Decode && s.schedule == PositionSchedule::PrefillOnly);
    if all_decode_prefill_only {
        return PositionMask { bits: vec![false; n], uniform: Some(false), skipped: true };
    }
    let mut bits = vec![false; n];
    for (i, s) in batch.sequences.iter().enumerate() {
        let on = match (s.phase, s.schedule) {
            (Phase::Prefill, _) | (_, PositionSchedule::AllPositions) => true,
            (Phase::Decode, PositionSchedule::PrefillOnly) => false,
        };
        bits[batch.query_start_loc[i]..batch.query_start_loc[i + 1]].fill(on);
    }
    let uniform = match (bits.iter().all(|b| *b), bits.iter().any(|b| *b)) {
        (true, _) => Some(true),
        (_, false) => Some(false),
        _ => None,
    };
    PositionMask { bits, uniform, skipped: false }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Logits at the last query token of each sequence.
    pub logits: Vec<Vec<f64>>,
    /// Residual stream after each layer: `hidden[seq][layer]` is `tokens × d`.
    pub hidden: Vec<Vec<Matrix>>,
    pub mask: PositionMask,
}

/// Runs a mixed prefill/decode batch. Every sequence owns the cache at the
/// same index of `caches`.
pub fn forward(weights: &ModelWeights, batch: &ForwardBatch, adapters: &[AdapterSet], caches: &mut [KvCache]) -> Result<ForwardOutput> {
    let cfg = &weights.config;
    if caches.len() != batch.sequences.len() {
        return Err(Error::Shape(format!("{} caches for {} sequences", caches.len(), batch.sequences.len())));
    }
    for (s, cache) in batch.sequences.iter().zip(caches.iter()) {
        if let Some(id) = s.adapter {
            let set = adapters.get(id.index()).ok_or(Error::Routing(id))?;
            if set.layers.len() != cfg.n_layers {
                return Err(Error::Shape(format!("{id} has {} layers, model {}", set.layers.len(), cfg.n_layers)));
            }
        }
        let start = cache.len();
        match s.phase {
            Phase::Prefill if start + s.tokens.len() > s.prompt_len => {
                return Err(Error::State(format!(
                    "prefill chunk {}..{} runs past prompt length {}",
                    start,
                    start + s.tokens.len(),
                    s.prompt_len
                )))
            }
            Phase::Decode if start == 0 || start < s.prompt_len => {
                return Err(Error::State(format!("decode with {start} cached positions for a {}-token prompt", s.prompt_len)))
            }
            _ => {}
        }
        if start + s.tokens.len() > cfg.max_positions {
            return Err(Error::Index(format!("position {} exceeds model limit {}", start + s.tokens.len(), cfg.max_positions)));
        }
        if let Some(t) = s.tokens.iter().find(|t| **t as usize >= cfg.vocab) {
            return Err(Error::Index(format!("token {t} outside vocabulary of {}", cfg.vocab)));
        }
    }

    let mask = compute_position_mask(batch);
    let mut logits = Vec::with_capacity(batch.sequences.len());
    let mut hidden = Vec::with_capacity(batch.sequences.len());
    for (i, (s, cache)) in batch.sequences.iter().zip(caches.iter_mut()).enumerate() {
        let seq_mask = mask.slice(batch.query_start_loc[i], batch.query_start_loc[i + 1]);
        let hooks = match (s.adapter, mask.uniform()) {
            (_, Some(false)) | (None, _) => None,
            (Some(id), _) => Some(&adapters[id.index()]),
        };
        let (lg, hs) = run_sequence(weights, &s.tokens, cache, hooks, seq_mask)?;
        logits.push(lg);
        hidden.push(hs);
    }
    Ok(ForwardOutput { logits, hidden, mask })
}

fn project(layer: &LayerWeights, hooks: Option<&LayerAdapters>, p: Projection, x: &Matrix, mask: &[bool]) -> Result<Matrix> {
    let out = x.matmul(&layer.proj[&p].transpose())?;
    match hooks.and_then(|h| h.lora.get(&p)) {
        Some(params) => apply_with_mask(params, &out, x, mask),
        None => Ok(out),
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn run_sequence(
    weights: &ModelWeights,
    tokens: &[u32],
    cache: &mut KvCache,
    adapter: Option<&AdapterSet>,
    mask: &[bool],
) -> Result<(Vec<f64>, Vec<Matrix>)> {
    let cfg = &weights.config;
    let d = cfg.d_model;
    let start = cache.len();
    let n = tokens.len();
    let mut x = Matrix::zeros(n, d);
    for (i, &t) in tokens.iter().enumerate() {
        let row = x.row_mut(i);
        row.iter_mut()
            .zip(weights.tok_emb.row(t as usize).iter().zip(weights.pos_emb.row(start + i)))
            .for_each(|(o, (e, p))| *o = e + p);
    }

    let scale = 1.0 / (d as f64).sqrt();
    let mut per_layer = Vec::with_capacity(cfg.n_layers);
    for (l, layer) in weights.layers.iter().enumerate() {
        let hooks = adapter.map(|a| &a.layers[l]);
        let q = project(layer, hooks, Projection::Q, &x, mask)?;
        let k = project(layer, hooks, Projection::K, &x, mask)?;
        let v = project(layer, hooks, Projection::V, &x, mask)?;
        cache.keys[l].extend_from_slice(k.data());
        cache.values[l].extend_from_slice(v.data());

        let keys = &cache.keys[l];
        let values = &cache.values[l];
        let mut mix = Matrix::zeros(n, d);
        for i in 0..n {
            let visible = start + i + 1;
            let scores: Vec<f64> = (0..visible).map(|j| dot(q.row(i), &keys[j * d..(j + 1) * d]) * scale).collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let row = mix.row_mut(i);
            for (j, e) in exps.iter().enumerate() {
                let w = e / total;
                row.iter_mut().zip(&values[j * d..(j + 1) * d]).for_each(|(o, v)| *o += w * v);
            }
        }
        let attn = project(layer, hooks, Projection::O, &mix, mask)?;
        x = x.add(&attn)?;

        let gate = project(layer, hooks, Projection::Gate, &x, mask)?;
        let up = project(layer, hooks, Projection::Up, &x, mask)?;
        let act = Matrix::new(
            n,
            cfg.ffn_dim,
            gate.data().iter().zip(up.data()).map(|(g, u)| silu(*g) * u).collect(),
        )?;
        let down = project(layer, hooks, Projection::Down, &act, mask)?;
        x = x.add(&down)?;

        if let Some(params) = hooks.and_then(|h| h.reft.as_ref()) {
            x = apply_with_mask(params, &x, &x, mask)?;
        }
        if !x.is_finite() {
            return Err(Error::Numeric(format!("non-finite residual stream after layer {l}")));
        }
        per_layer.push(x.clone());
    }
    let logits = weights.unembed.matvec(x.row(n - 1))?;
    Ok((logits, per_layer))
}

/// Forward over prompt chunks only.
pub fn prefill(weights: &ModelWeights, batch: &ForwardBatch, adapters: &[AdapterSet], caches: &mut [KvCache]) -> Result<ForwardOutput> {
    if let Some(i) = batch.sequences.iter().position(|s| s.phase != Phase::Prefill) {
        return Err(Error::State(format!("sequence {i} is not in prefill")));
    }
    forward(weights, batch, adapters, caches)
}

/// One decode token per sequence.
pub fn decode_step(weights: &ModelWeights, batch: &ForwardBatch, adapters: &[AdapterSet], caches: &mut [KvCache]) -> Result<ForwardOutput> {
    if let Some(i) = batch.sequences.iter().position(|s| s.phase != Phase::Decode) {
        return Err(Error::State(format!("sequence {i} is not decoding")));
    }
    forward(weights, batch, adapters, caches)
}

pub fn argmax(values: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy generation record: tokens plus the residual stream of every forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    /// `hidden[call][layer]`, call 0 being the prefill.
    pub hidden: Vec<Vec<Matrix>>,
    pub cache: KvCache,
}

pub fn generate_traced(
    weights: &ModelWeights,
    prompt: &[u32],
    steps: usize,
    adapter: Option<&AdapterSet>,
    schedule: PositionSchedule,
) -> Result<Generation> {
    let mut cache = KvCache::new(&weights.config);
    let mut gen = Generation { tokens: Vec::with_capacity(steps), hidden: Vec::new(), cache: cache.clone() };
    if steps == 0 {
        return Ok(gen);
    }
    if prompt.is_empty() {
        return Err(Error::Range("cannot generate from an empty prompt".into()));
    }
    let catalogue = adapter.map(std::slice::from_ref).unwrap_or(&[]);
    let id = adapter.map(|_| AdapterId(0));
    let seq = |tokens: Vec<u32>, phase| SequenceInput { tokens, prompt_len: prompt.len(), phase, adapter: id, schedule };

    let batch = ForwardBatch::new(vec![seq(prompt.to_vec(), Phase::Prefill)])?;
    let mut out = prefill(weights, &batch, catalogue, std::slice::from_mut(&mut cache))?;
    loop {
        let next = argmax(&out.logits[0]);
        gen.tokens.push(next);
        gen.hidden.push(out.hidden.remove(0));
        if gen.tokens.len() == steps {
            break;
        }
        let batch = ForwardBatch::new(vec![seq(vec![next], Phase::Decode)])?;
        out = decode_step(weights, &batch, catalogue, std::slice::from_mut(&mut cache))?;
    }
    gen.cache = cache;
    Ok(gen)
}

/// Greedy argmax decoding of `steps` tokens.
pub fn generate(weights: &ModelWeights, prompt: &[u32], steps: usize, adapter: Option<&AdapterSet>, schedule: PositionSchedule) -> Result<Vec<u32>> {
    Ok(generate_traced(weights, prompt, steps, adapter, schedule)?.tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(tokens: Vec<u32>, p: usize, phase: Phase, schedule: PositionSchedule) -> SequenceInput {
        SequenceInput { tokens, prompt_len: p, phase, adapter: None, schedule }
    }

    #[test]
    fn deterministic_build() {
        let a = build_model(ModelConfig::tiny(RngSeed(1))).unwrap();
        let b = build_model(ModelConfig::tiny(RngSeed(1))).unwrap();
        assert_eq!(a, b);
        let mut small = ModelConfig::tiny(RngSeed(1));
        small.d_model = 1;
        assert!(build_model(small).is_err());
    }

    #[test]
    fn smoke_forward_is_finite() {
        let mut cfg = ModelConfig::tiny(RngSeed(2));
        cfg.d_model = 8;
        let w = build_model(cfg).unwrap();
        let toks = generate(&w, &[1, 2, 3], 4, None, PositionSchedule::PrefillOnly).unwrap();
        assert_eq!(toks.len(), 4);
        assert!(generate(&w, &[1], 0, None, PositionSchedule::PrefillOnly).unwrap().is_empty());
    }

    #[test]
    fn mask_examples() {
        let decode_only = ForwardBatch::new(vec![
            seq(vec![1], 3, Phase::Decode, PositionSchedule::PrefillOnly),
            seq(vec![2], 5, Phase::Decode, PositionSchedule::PrefillOnly),
        ])
        .unwrap();
        let m = compute_position_mask(&decode_only);
        assert!(m.is_fast_path());
        assert_eq!(m.uniform(), Some(false));
        assert_eq!(m.bits(), &[false, false]);

        let single = ForwardBatch::new(vec![seq(vec![1, 2, 3, 4], 4, Phase::Prefill, PositionSchedule::PrefillOnly)]).unwrap();
        let m = compute_position_mask(&single);
        assert_eq!(m.bits(), &[true; 4]);
        assert_eq!(m.uniform(), Some(true));

        let mixed = ForwardBatch::new(vec![
            seq(vec![1, 2], 2, Phase::Prefill, PositionSchedule::PrefillOnly),
            seq(vec![7], 3, Phase::Decode, PositionSchedule::AllPositions),
        ])
        .unwrap();
        assert_eq!(compute_position_mask(&mixed).bits(), &[true, true, true]);
    }

    #[test]
    fn malformed_offsets() {
        let s = vec![seq(vec![1, 2], 2, Phase::Prefill, PositionSchedule::PrefillOnly)];
        assert!(matches!(ForwardBatch::with_offsets(s.clone(), vec![0, 3]), Err(Error::Index(_))));
        assert!(matches!(ForwardBatch::with_offsets(s, vec![0]), Err(Error::Index(_))));
        let d = vec![seq(vec![1, 2], 2, Phase::Decode, PositionSchedule::PrefillOnly)];
        assert!(matches!(ForwardBatch::new(d), Err(Error::Index(_))));
    }

    #[test]
    fn unknown_adapter_is_a_routing_error() {
        let w = build_model(ModelConfig::tiny(RngSeed(3))).unwrap();
        let mut s = seq(vec![1, 2], 2, Phase::Prefill, PositionSchedule::PrefillOnly);
        s.adapter = Some(AdapterId(4));
        let batch = ForwardBatch::new(vec![s]).unwrap();
        let mut caches = vec![KvCache::new(w.config())];
        assert!(matches!(prefill(&w, &batch, &[], &mut caches), Err(Error::Routing(AdapterId(4)))));
        assert!(caches[0].is_empty());
    }

    #[test]
    fn decode_needs_cache() {
        let w = build_model(ModelConfig::tiny(RngSeed(3))).unwrap();
        let batch = ForwardBatch::new(vec![seq(vec![1], 2, Phase::Decode, PositionSchedule::PrefillOnly)]).unwrap();
        let mut caches = vec![KvCache::new(w.config())];
        assert!(matches!(decode_step(&w, &batch, &[], &mut caches), Err(Error::State(_))));
    }

    #[test]
    fn catalogue_round_trip() {
        let cfg = ModelConfig::tiny(RngSeed(5));
        let sets = vec![
            AdapterSet::perturbed(&cfg, AdapterKind::Lora, 2, ScalingRule::LORA_DEFAULT, RngSeed(1)).unwrap(),
            AdapterSet::perturbed(&cfg, AdapterKind::Direft, 4, ScalingRule::InvSqrtR, RngSeed(2)).unwrap(),
            AdapterSet::zero_delta(&cfg, AdapterKind::Loreft, 3, ScalingRule::InvSqrtR, RngSeed(3)).unwrap(),
        ];
        let mut buf = Vec::new();
        write_catalogue(&sets, &mut buf).unwrap();
        let back = read_catalogue(&mut buf.as_slice()).unwrap();
        assert_eq!(back, sets);
        let mut again = Vec::new();
        write_catalogue(&back, &mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn adapters_do_not_touch_base_weights() {
        let cfg = ModelConfig::tiny(RngSeed(8));
        let w = build_model(cfg.clone()).unwrap();
        let before = w.clone();
        let set = AdapterSet::perturbed(&cfg, AdapterKind::Direft, 4, ScalingRule::InvSqrtR, RngSeed(1)).unwrap();
        generate(&w, &[3, 4, 5], 3, Some(&set), PositionSchedule::AllPositions).unwrap();
        assert_eq!(w, before);
    }
}
