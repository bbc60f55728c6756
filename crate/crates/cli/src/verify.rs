//! Invariant suites behind `preft verify`.

use clap::ValueEnum;
use preft_core::adapter::{first_step_delta_norm, init_zero_delta};
use preft_core::cost::{lora_down_intensity, HardwareProfile};
use preft_core::model::{
    build_model, compute_position_mask, forward, generate_traced, AdapterSet, ForwardBatch, KvCache, Phase, SequenceInput,
};
use preft_core::tensor::l1_norm;
use preft_core::{AdapterId, AdapterKind, Matrix, ModelConfig, PositionSchedule, Result, RngSeed, ScalingRule, SiteDims};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    ZeroDelta,
    Theorem1,
    Intensity,
    Mask,
}

pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

pub fn run(suite: Suite, seed: RngSeed) -> Result<Vec<Check>> {
    match suite {
        Suite::ZeroDelta => zero_delta(seed),
        Suite::Theorem1 => theorem1(seed),
        Suite::Intensity => Ok(intensity()),
        Suite::Mask => mask(seed),
    }
}

fn zero_delta(seed: RngSeed) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let mut rng = seed.derive("inputs").rng();
    for kind in AdapterKind::ALL {
        for rank in [1, 8, 32] {
            for d in [8, 64] {
                if rank > d {
                    continue;
                }
                let p = init_zero_delta(kind, rank, SiteDims::square(d), seed.derive_index("site", rank as u64), ScalingRule::default_for(kind))?;
                let x = Matrix::gaussian(100, d, 1.0, &mut rng);
                let mut worst = 0.0_f64;
                for row in 0..x.rows() {
                    worst = p.delta(x.row(row))?.iter().fold(worst, |m, v| m.max(v.abs()));
                }
                let limit = if kind == AdapterKind::Loreft { 1e-12 } else { 0.0 };
                checks.push(Check::new(format!("delta {kind} r={rank} d={d}"), worst <= limit, format!("max |delta| {worst:e}")));
            }
        }
    }
    let model = ModelConfig { d_model: 48, ffn_dim: 96, ..ModelConfig::tiny(seed) };
    let weights = build_model(model.clone())?;
    let prompt: Vec<u32> = (0..10).map(|_| rng.random_range(0..model.vocab as u32)).collect();
    let base = generate_traced(&weights, &prompt, 16, None, PositionSchedule::AllPositions)?;
    for kind in AdapterKind::ALL {
        for rank in [1, 8, 32] {
            let set = AdapterSet::zero_delta(&model, kind, rank, ScalingRule::default_for(kind), seed.derive_index("set", rank as u64))?;
            for schedule in [PositionSchedule::PrefillOnly, PositionSchedule::AllPositions] {
                let gen = generate_traced(&weights, &prompt, 16, Some(&set), schedule)?;
                let dev = gen
                    .hidden
                    .iter()
                    .flatten()
                    .zip(base.hidden.iter().flatten())
                    .filter_map(|(a, b)| a.max_abs_diff(b))
                    .fold(0.0_f64, f64::max);
                let same = gen.tokens == base.tokens;
                checks.push(Check::new(
                    format!("generate {kind} r={rank} {schedule}"),
                    same && dev <= 1e-12,
                    format!("tokens {}, max hidden deviation {dev:e}", if same { "equal" } else { "differ" }),
                ));
            }
        }
    }
    Ok(checks)
}

fn theorem1(seed: RngSeed) -> Result<Vec<Check>> {
    let (d, eta, eps) = (128, 1e-3, 1e-12);
    let ranks = [1, 4, 16, 64];
    let mut rng = seed.derive("theorem1").rng();
    let mut checks = Vec::new();
    let mut worst_ratio = 1.0_f64;
    for trial in 0..20u64 {
        let h: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let expect = eta * (l1_norm(&h) + 1.0);
        let norms = ranks
            .iter()
            .map(|r| first_step_delta_norm(*r, d, &h, &g, eta, eps, ScalingRule::InvSqrtR, seed.derive_index("trial", trial)))
            .collect::<Result<Vec<f64>>>()?;
        let hi = norms.iter().cloned().fold(f64::MIN, f64::max);
        let lo = norms.iter().cloned().fold(f64::MAX, f64::min);
        worst_ratio = worst_ratio.max(hi / lo);
        let rel = norms.iter().map(|n| ((n - expect) / expect).abs()).fold(0.0, f64::max);
        if trial == 0 {
            for (r, n) in ranks.iter().zip(&norms) {
                outln!("  r={r:<3} |delta| = {n:.12}");
            }
            outln!("  closed form eta(|h|_1 + 1) = {expect:.12}");
        }
        checks.push(Check::new(format!("trial {trial}"), rel <= 1e-6, format!("max/min {:.9}, rel err {rel:.2e}", hi / lo)));
    }
    checks.push(Check::new("rank invariance", worst_ratio <= 1.001, format!("max/min over 20 trials {worst_ratio:.9}")));

    let h: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c = |r| first_step_delta_norm(r, d, &h, &g, eta, eps, ScalingRule::Constant(1.0), seed);
    let ratio = c(64)? / c(1)?;
    checks.push(Check::new("s=1 grows as sqrt(r)", (ratio / 8.0 - 1.0).abs() <= 0.005, format!("r=64 : r=1 = {ratio:.6}")));
    Ok(checks)
}

fn intensity() -> Vec<Check> {
    let ridge = HardwareProfile::h100().ridge;
    let mut checks = Vec::new();
    outln!("  {:>5} {:>4} {:>6} {:>10}", "b", "r", "d", "intensity");
    for b in [1, 32, 256] {
        for r in [1, 16, 64] {
            for d in [512, 4096] {
                let i = lora_down_intensity(b, d, r);
                outln!("  {b:>5} {r:>4} {d:>6} {i:>10.4}");
                let ok = i < ridge && i < r.min(b).min(d) as f64;
                checks.push(Check::new(format!("b={b} r={r} d={d}"), ok, format!("{i:.4} < min(r, b, d) and < {ridge}")));
            }
        }
    }
    let corner = lora_down_intensity(256, 8192, 64);
    checks.push(Check::new("grid maximum", corner < ridge, format!("b=256 r=64 d=8192 gives {corner:.3}; intensity grows in every argument")));
    checks
}

fn mask(seed: RngSeed) -> Result<Vec<Check>> {
    let config = ModelConfig::tiny(seed);
    let mut rng = seed.derive("mask").rng();
    let (mut mismatches, mut fast, mut fast_wrong) = (0, 0, 0);
    for _ in 0..1000 {
        let mut seqs = Vec::new();
        let mut expect = Vec::new();
        let all_decode = rng.random_bool(0.3);
        for _ in 0..rng.random_range(1..=6) {
            let p = rng.random_range(1..=20usize);
            let schedule = if rng.random_bool(0.5) { PositionSchedule::PrefillOnly } else { PositionSchedule::AllPositions };
            let (phase, start, len) = if all_decode || rng.random_bool(0.5) {
                (Phase::Decode, rng.random_range(p..p + 10), 1)
            } else {
                let start = rng.random_range(0..p);
                (Phase::Prefill, start, rng.random_range(1..=p - start))
            };
            expect.extend((start..start + len).map(|pos| schedule.includes(pos, p)));
            let tokens = (0..len).map(|_| rng.random_range(0..config.vocab as u32)).collect();
            seqs.push(SequenceInput { tokens, prompt_len: p, phase, adapter: Some(AdapterId(0)), schedule });
        }
        let batch = ForwardBatch::new(seqs)?;
        let m = compute_position_mask(&batch);
        mismatches += usize::from(m.bits() != expect.as_slice());
        if batch.sequences().iter().all(|s| s.phase == Phase::Decode && s.schedule == PositionSchedule::PrefillOnly) {
            fast += 1;
            fast_wrong += usize::from(!(m.is_fast_path() && m.uniform() == Some(false)));
        }
    }
    let mut checks = vec![
        Check::new("mask vs per-token enumeration", mismatches == 0, format!("{mismatches} of 1000 random batches differ")),
        Check::new("all-decode fast path", fast_wrong == 0, format!("{fast} all-decode batches, {fast_wrong} without the uniform mask")),
    ];

    let weights = build_model(config.clone())?;
    let mut worst = 0.0_f64;
    for (case, kind) in AdapterKind::ALL.into_iter().cycle().take(30).enumerate() {
        let set = AdapterSet::perturbed(&config, kind, 4, ScalingRule::default_for(kind), seed.derive_index("chunk", case as u64))?;
        let catalogue = [set];
        let p = rng.random_range(2..=40usize);
        let prompt: Vec<u32> = (0..p).map(|_| rng.random_range(0..config.vocab as u32)).collect();
        let schedule = if case % 2 == 0 { PositionSchedule::PrefillOnly } else { PositionSchedule::AllPositions };
        let seq = |tokens: &[u32]| SequenceInput { tokens: tokens.to_vec(), prompt_len: p, phase: Phase::Prefill, adapter: Some(AdapterId(0)), schedule };
        let full = forward(&weights, &ForwardBatch::new(vec![seq(&prompt)])?, &catalogue, &mut [KvCache::new(&config)])?;
        let mut cache = [KvCache::new(&config)];
        let mut last = full.logits[0].clone();
        for piece in prompt.chunks(rng.random_range(1..p)) {
            last = forward(&weights, &ForwardBatch::new(vec![seq(piece)])?, &catalogue, &mut cache)?.logits.remove(0);
        }
        worst = full.logits[0].iter().zip(&last).fold(worst, |w, (a, b)| w.max((a - b).abs()));
    }
    checks.push(Check::new("chunked vs full prefill", worst <= 1e-9, format!("max logit deviation {worst:e} over 30 prompts")));
    Ok(checks)
}
