//! Latency aggregation, paired significance tests and length-following
//! metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest sample size for which the exact signed-rank distribution is used.
pub const EXACT_LIMIT: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub mean: f64,
    pub sd: f64,
}

/// Nearest-rank percentile of sorted values: the `⌈q/100 · n⌉`-th smallest.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

impl Summary {
    /// Sample standard deviation (`n − 1`), zero for a single value.
    pub fn of(values: &[f64]) -> Result<Summary> {
        if values.is_empty() {
            return Err(Error::Empty("no values to summarise".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("latency value {v}")));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(Summary {
            p50: nearest_rank(&sorted, 50.0),
            p90: nearest_rank(&sorted, 90.0),
            p99: nearest_rank(&sorted, 99.0),
            mean,
            sd,
        })
    }

    pub fn is_monotone(&self) -> bool {
        self.p50 <= self.p90 && self.p90 <= self.p99
    }
}

/// Per-request timings in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub request_id: u64,
    pub prompt_len: usize,
    pub output_len: usize,
    /// Admission to first output token.
    pub encode: f64,
    /// First output token to completion.
    pub decode: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub requests: usize,
    pub total_tokens: u64,
    pub wall_time: f64,
    /// Tokens per second.
    pub throughput: f64,
    pub encode_per_token: Summary,
    pub decode_per_token: Summary,
    pub encode_per_request: Summary,
    pub decode_per_request: Summary,
}

pub fn aggregate(records: &[LatencyRecord], wall_time: f64, total_tokens: u64) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Empty("no latency records".into()));
    }
    if !(wall_time.is_finite() && wall_time > 0.0) {
        return Err(Error::Range(format!("wall time must be positive, got {wall_time}")));
    }
    let column = |f: &dyn Fn(&LatencyRecord) -> f64| records.iter().map(f).collect::<Vec<f64>>();
    Ok(MetricsReport {
        requests: records.len(),
        total_tokens,
        wall_time,
        throughput: total_tokens as f64 / wall_time,
        encode_per_token: Summary::of(&column(&|r| r.encode / r.prompt_len.max(1) as f64))?,
        decode_per_token: Summary::of(&column(&|r| r.decode / r.output_len.max(1) as f64))?,
        encode_per_request: Summary::of(&column(&|r| r.encode))?,
        decode_per_request: Summary::of(&column(&|r| r.decode))?,
    })
}

impl MetricsReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fixed-width table, latencies in milliseconds.
    pub fn render_table(&self) -> String {
        let mut out = format!(
            "requests {}  tokens {}  time {:.4} s  throughput {:.2} tok/s\n",
            self.requests, self.total_tokens, self.wall_time, self.throughput
        );
        out.push_str(&format!(
            "{:<20}{:>12}{:>12}{:>12}{:>12}{:>12}\n",
            "latency (ms)", "p50", "p90", "p99", "mean", "sd"
        ));
        for (name, s) in [
            ("encode / token", &self.encode_per_token),
            ("decode / token", &self.decode_per_token),
            ("encode / request", &self.encode_per_request),
            ("decode / request", &self.decode_per_request),
        ] {
            out.push_str(&format!(
                "{:<20}{:>12.4}{:>12.4}{:>12.4}{:>12.4}{:>12.4}\n",
                name,
                s.p50 * 1e3,
                s.p90 * 1e3,
                s.p99 * 1e3,
                s.mean * 1e3,
                s.sd * 1e3
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZeroPolicy {
    /// Discard zero differences before ranking.
    #[default]
    Drop,
    /// Rank zeros with the rest, then leave them out of both sums.
    Pratt,
}

impl FromStr for ZeroPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "drop" | "wilcox" => Ok(ZeroPolicy::Drop),
            "pratt" => Ok(ZeroPolicy::Pratt),
            _ => Err(Error::Config(format!("unknown zero policy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PMethod {
    Exact,
    Normal,
}

impl fmt::Display for PMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PMethod::Exact => "exact",
            PMethod::Normal => "normal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W⁺, W⁻)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Two-sided.
    pub p_value: f64,
    /// Nonzero differences that entered the sums.
    pub n: usize,
    pub zeros: usize,
    pub method: PMethod,
}

/// Average ranks (1-based) of `values`, ties sharing the mean of their span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in &order[i..=j] {
            ranks[*k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn tie_sizes(values: &[f64]) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut sizes = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|v| **v == sorted[i]).count();
        sizes.push(j);
        i += j;
    }
    sizes
}

/// `P(T ≤ t)` for `T = Σ` of a uniformly random subset of `ranks`, computed
/// over doubled ranks so tied half-ranks stay integral.
fn exact_lower_tail(ranks: &[f64], t: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0_f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let limit = (2.0 * t).round() as usize;
    let hits: f64 = counts.iter().take(limit + 1).sum();
    hits / 2f64.powi(ranks.len() as i32)
}

/// Two-sided signed-rank test on paired differences. Exact (conditional on
/// ties) for up to [`EXACT_LIMIT`] nonzero differences, otherwise a normal
/// approximation with tie and continuity corrections.
pub fn wilcoxon_signed_rank(diffs: &[f64], zero_policy: ZeroPolicy) -> Result<WilcoxonResult> {
    let method = if diffs.iter().filter(|d| **d != 0.0).count() <= EXACT_LIMIT { PMethod::Exact } else { PMethod::Normal };
    wilcoxon_with_method(diffs, zero_policy, method)
}

pub fn wilcoxon_with_method(diffs: &[f64], zero_policy: ZeroPolicy, method: PMethod) -> Result<WilcoxonResult> {
    if let Some(d) = diffs.iter().find(|d| !d.is_finite()) {
        return Err(Error::Numeric(format!("difference {d}")));
    }
    let zeros = diffs.iter().filter(|d| **d == 0.0).count();
    if zeros == diffs.len() {
        return Err(Error::Degenerate("every paired difference is zero".into()));
    }
    let ranked: Vec<f64> = match zero_policy {
        ZeroPolicy::Drop => diffs.iter().copied().filter(|d| *d != 0.0).collect(),
        ZeroPolicy::Pratt => diffs.to_vec(),
    };
    let abs: Vec<f64> = ranked.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let (mut w_plus, mut w_minus) = (0.0, 0.0);
    let mut nonzero_ranks = Vec::with_capacity(ranks.len());
    for (d, r) in ranked.iter().zip(&ranks) {
        if *d > 0.0 {
            w_plus += r;
        } else if *d < 0.0 {
            w_minus += r;
        }
        if *d != 0.0 {
            nonzero_ranks.push(*r);
        }
    }
    let statistic = w_plus.min(w_minus);
    let n = nonzero_ranks.len();

    let p_value = match method {
        PMethod::Exact => (2.0 * exact_lower_tail(&nonzero_ranks, statistic)).min(1.0),
        PMethod::Normal => {
            let total = ranks.len() as f64;
            let z0 = match zero_policy {
                ZeroPolicy::Drop => 0.0,
                ZeroPolicy::Pratt => zeros as f64,
            };
            let mean = (total * (total + 1.0) - z0 * (z0 + 1.0)) / 4.0;
            let ties: f64 = tie_sizes(&abs).iter().map(|&t| (t * t * t - t) as f64).sum();
            let var = (total * (total + 1.0) * (2.0 * total + 1.0) - z0 * (z0 + 1.0) * (2.0 * z0 + 1.0)) / 24.0 - ties / 48.0;
            if var <= 0.0 {
                return Err(Error::Degenerate("signed-rank variance is zero".into()));
            }
            let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
            let normal = Normal::standard();
            (2.0 * normal.sf(z)).min(1.0)
        }
    };
    Ok(WilcoxonResult { statistic, w_plus, w_minus, p_value, n, zeros, method })
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("mean of no values".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Discordant pair counts of one stratum: `b` = treatment right and control
/// wrong, `c` = the reverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Discordant {
    pub b: u64,
    pub c: u64,
}

/// One paired binary observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryPair {
    pub stratum: String,
    pub treatment: bool,
    pub control: bool,
}

/// Groups pairs by stratum (in first-appearance order) and counts discordant
/// outcomes.
pub fn discordant_counts(pairs: &[BinaryPair]) -> Vec<(String, Discordant)> {
    let mut strata: Vec<(String, Discordant)> = Vec::new();
    for p in pairs {
        let idx = match strata.iter().position(|(s, _)| *s == p.stratum) {
            Some(i) => i,
            None => {
                strata.push((p.stratum.clone(), Discordant::default()));
                strata.len() - 1
            }
        };
        match (p.treatment, p.control) {
            (true, false) => strata[idx].1.b += 1,
            (false, true) => strata[idx].1.c += 1,
            _ => {}
        }
    }
    strata
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Stratified McNemar (Mantel–Haenszel) test with continuity correction:
/// `X² = (|Σb − Σc| − 1)² / Σ(b + c)` on one degree of freedom.
pub fn cmh_test(strata: &[Discordant]) -> Result<ChiSquareResult> {
    let b: u64 = strata.iter().map(|s| s.b).sum();
    let c: u64 = strata.iter().map(|s| s.c).sum();
    if b + c == 0 {
        return Err(Error::Degenerate("no discordant pairs in any stratum".into()));
    }
    let statistic = ((b as f64 - c as f64).abs() - 1.0).powi(2) / (b + c) as f64;
    let chi = ChiSquared::new(1.0).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(ChiSquareResult { statistic, p_value: chi.sf(statistic) })
}

/// Continuity-corrected McNemar test on a single 2×2 table.
pub fn mcnemar(b: u64, c: u64) -> Result<ChiSquareResult> {
    if b + c == 0 {
        return Err(Error::Degenerate("no discordant pairs".into()));
    }
    let statistic = ((b as f64 - c as f64).abs() - 1.0).powi(2) / (b + c) as f64;
    let chi = ChiSquared::new(1.0).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(ChiSquareResult { statistic, p_value: chi.sf(statistic) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    LengthCap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthOutcome {
    pub required: f64,
    pub generated: f64,
    pub finished_by: FinishReason,
}

/// Length-following score in `[0, 100]`. Overshoot loses a third per unit of
/// relative excess, undershoot half per unit of relative shortfall.
pub fn length_following_score(required: f64, generated: f64) -> Result<f64> {
    if !(required.is_finite() && required > 0.0) {
        return Err(Error::Domain(format!("required length must be positive, got {required}")));
    }
    if !(generated.is_finite() && generated >= 0.0) {
        return Err(Error::Domain(format!("generated length must be non-negative, got {generated}")));
    }
    if generated == 0.0 {
        return Ok(0.0);
    }
    let score = if generated >= required {
        1.0 - (generated / required - 1.0) / 3.0
    } else {
        1.0 - (required / generated - 1.0) / 2.0
    };
    Ok(100.0 * score.max(0.0))
}

/// Fraction of outcomes that stopped at the length cap.
pub fn truncation_rate(outcomes: &[LengthOutcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::Domain("truncation rate of an empty batch".into()));
    }
    let capped = outcomes.iter().filter(|o| o.finished_by == FinishReason::LengthCap).count();
    Ok(capped as f64 / outcomes.len() as f64)
}

fn is_cjk_ideograph(c: char) -> bool {
    matches!(
        c as u32,
        0x3400..=0x4DBF
            | 0x4E00..=0x9FFF
            | 0xF900..=0xFAFF
            | 0x20000..=0x2A6DF
            | 0x2A700..=0x2EBEF
            | 0x2F800..=0x2FA1F
            | 0x30000..=0x3134F
    )
}

/// Each CJK ideograph counts as one word, as does each maximal run of ASCII
/// letters.
pub fn word_count(text: &str) -> usize {
    let mut count = 0;
    let mut in_run = false;
    for c in text.chars() {
        if c.is_ascii_alphabetic() {
            if !in_run {
                count += 1;
            }
            in_run = true;
        } else {
            in_run = false;
            if is_cjk_ideograph(c) {
                count += 1;
            }
        }
    }
    count
}

/// Parses one number per non-empty line; `#` starts a comment.
pub fn parse_diffs(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let v: f64 = body
            .parse()
            .map_err(|_| Error::Config(format!("line {}: expected a number, found {body:?}", i + 1)))?;
        out.push(v);
    }
    if out.is_empty() {
        return Err(Error::Empty("no differences in input".into()));
    }
    Ok(out)
}

/// Parses whitespace-separated `stratum item treatment control` rows with
/// 0/1 outcomes; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<BinaryPair>> {
    let flag = |s: &str, line: usize| match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::Config(format!("line {line}: outcome must be 0 or 1, found {s:?}"))),
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let cols: Vec<&str> = body.split_whitespace().collect();
        if cols.len() != 4 {
            return Err(Error::Config(format!("line {}: expected 4 columns, found {}", i + 1, cols.len())));
        }
        out.push(BinaryPair { stratum: cols[0].to_string(), treatment: flag(cols[2], i + 1)?, control: flag(cols[3], i + 1)? });
    }
    if out.is_empty() {
        return Err(Error::Empty("no pairs in input".into()));
    }
    Ok(out)
}
