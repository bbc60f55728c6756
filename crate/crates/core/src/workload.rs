//! Punica-style synthetic request stream.
//!
//! Prompt lengths are `loc + scale·exp(σ·z)` with `z ~ N(0, 1)`, rounded
//! half-to-even and clipped to `[1, l_max − 2]`; the total length is uniform
//! on `[p + 2, l_max]`. Each sampler draws from its own sub-stream of the
//! master seed so changing the adapter mix leaves lengths untouched.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterId;
use crate::error::{Error, Result};
use crate::tensor::{RngSeed, SeededRng};

pub const PROMPT_SIGMA: f64 = 0.8;
pub const PROMPT_LOC: f64 = -1.0;
pub const PROMPT_SCALE: f64 = 18.0;
pub const ZIPF_ALPHA: f64 = 1.0;
pub const DEFAULT_L_MAX: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterMix {
    Identical,
    Uniform,
    Skewed,
    Distinct,
}

impl AdapterMix {
    pub const ALL: [AdapterMix; 4] = [AdapterMix::Identical, AdapterMix::Uniform, AdapterMix::Skewed, AdapterMix::Distinct];
}

impl fmt::Display for AdapterMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterMix::Identical => "identical",
            AdapterMix::Uniform => "uniform",
            AdapterMix::Skewed => "skewed",
            AdapterMix::Distinct => "distinct",
        })
    }
}

impl FromStr for AdapterMix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AdapterMix::ALL
            .into_iter()
            .find(|m| m.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown adapter mix {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub n_requests: usize,
    pub l_max: usize,
    pub n_adapters: usize,
    pub mix: AdapterMix,
    pub seed: RngSeed,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self { n_requests: 1000, l_max: DEFAULT_L_MAX, n_adapters: 32, mix: AdapterMix::Uniform, seed: RngSeed(0) }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_max < 4 {
            return Err(Error::Config(format!("l_max must be at least 4, got {}", self.l_max)));
        }
        if self.n_adapters < 1 || self.n_requests < 1 {
            return Err(Error::Config("n_requests and n_adapters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RequestSpec {
    pub request_id: u64,
    pub prompt_len: usize,
    pub output_len: usize,
    pub adapter: AdapterId,
    pub arrival_index: usize,
}

impl RequestSpec {
    pub fn check(&self, l_max: usize, n_adapters: usize) -> Result<()> {
        let ok = self.prompt_len >= 1
            && self.prompt_len <= l_max - 2
            && self.output_len >= 2
            && self.prompt_len + self.output_len <= l_max
            && self.adapter.index() < n_adapters;
        if ok {
            Ok(())
        } else {
            Err(Error::Range(format!("request {self:?} violates bounds for l_max={l_max}, N={n_adapters}")))
        }
    }

    pub fn total_tokens(&self) -> usize {
        self.prompt_len + self.output_len
    }
}

/// Continuous lognormal draw before rounding and clipping.
pub fn raw_prompt_len(rng: &mut SeededRng) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    PROMPT_LOC + PROMPT_SCALE * (PROMPT_SIGMA * z).exp()
}

/// Closed-form mean of the unclipped draw, `loc + scale·e^{σ²/2}`.
pub fn analytic_prompt_mean() -> f64 {
    PROMPT_LOC + PROMPT_SCALE * (PROMPT_SIGMA * PROMPT_SIGMA / 2.0).exp()
}

pub fn sample_prompt_len(rng: &mut SeededRng, l_max: usize) -> usize {
    let x = raw_prompt_len(rng).round_ties_even();
    x.clamp(1.0, (l_max - 2) as f64) as usize
}

pub fn sample_output_len(prompt_len: usize, l_max: usize, rng: &mut SeededRng) -> Result<usize> {
    if l_max < 2 || prompt_len > l_max - 2 {
        return Err(Error::Range(format!("prompt length {prompt_len} leaves no room under l_max={l_max}")));
    }
    let total = rng.random_range(prompt_len + 2..=l_max);
    Ok(total - prompt_len)
}

/// Cumulative Zipf(α) table over ids `0..n`, `P(k) ∝ (k + 1)^{-α}`.
pub fn zipf_cdf(n: usize, alpha: f64) -> Vec<f64> {
    let weights: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-alpha)).collect();
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w / total;
            acc
        })
        .collect()
}

fn sample_from_cdf(cdf: &[f64], rng: &mut SeededRng) -> usize {
    let u: f64 = rng.random();
    cdf.partition_point(|c| *c <= u).min(cdf.len() - 1)
}

pub fn assign_adapters(config: &WorkloadConfig) -> Vec<AdapterId> {
    let n = config.n_adapters;
    let mut rng = config.seed.derive("adapter").rng();
    let ids: Vec<usize> = match config.mix {
        AdapterMix::Identical => vec![0; config.n_requests],
        AdapterMix::Uniform => (0..config.n_requests).map(|_| rng.random_range(0..n)).collect(),
        AdapterMix::Skewed => {
            let cdf = zipf_cdf(n, ZIPF_ALPHA);
            (0..config.n_requests).map(|_| sample_from_cdf(&cdf, &mut rng)).collect()
        }
        AdapterMix::Distinct => {
            let mut ids: Vec<usize> = (0..config.n_requests).map(|i| i % n).collect();
            ids.shuffle(&mut rng);
            ids
        }
    };
    ids.into_iter().map(|i| AdapterId(i as u32)).collect()
}

pub fn generate_workload(config: &WorkloadConfig) -> Result<Vec<RequestSpec>> {
    config.validate()?;
    let mut prompt_rng = config.seed.derive("prompt_len").rng();
    let mut output_rng = config.seed.derive("output_len").rng();
    let adapters = assign_adapters(config);
    adapters
        .into_iter()
        .enumerate()
        .map(|(i, adapter)| {
            let prompt_len = sample_prompt_len(&mut prompt_rng, config.l_max);
            let output_len = sample_output_len(prompt_len, config.l_max, &mut output_rng)?;
            Ok(RequestSpec { request_id: i as u64, prompt_len, output_len, adapter, arrival_index: i })
        })
        .collect()
}

/// Prompt token ids for a request, uniform on `[lo, hi)`.
pub fn prompt_tokens(seed: RngSeed, spec: &RequestSpec, lo: u32, hi: u32) -> Vec<u32> {
    let mut rng = seed.derive_index("prompt_tokens", spec.request_id).rng();
    (0..spec.prompt_len).map(|_| rng.random_range(lo..hi)).collect()
}

/// CSV dump with header `request_id,prompt_len,output_len,adapter_id`.
pub fn write_workload_csv<W: Write>(specs: &[RequestSpec], out: &mut W) -> Result<()> {
    writeln!(out, "request_id,prompt_len,output_len,adapter_id")?;
    for s in specs {
        writeln!(out, "{},{},{},{}", s.request_id, s.prompt_len, s.output_len, s.adapter.0)?;
    }
    Ok(())
}
