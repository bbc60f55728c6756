use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use preft_core::adapter::init_zero_delta;
use preft_core::cost::lora_down_intensity;
use preft_core::model::{build_model, compute_position_mask, generate, AdapterSet, ForwardBatch, ModelConfig, Phase, SequenceInput};
use preft_core::stats::{wilcoxon_with_method, PMethod};
use preft_core::workload::{generate_workload, WorkloadConfig};
use preft_core::{AdapterId, AdapterKind, Matrix, PositionSchedule, RngSeed, ScalingRule, SiteDims, ZeroPolicy};

fn adapter_delta(c: &mut Criterion) {
    let mut g = c.benchmark_group("adapter_delta");
    let d = 256;
    let x = Matrix::gaussian(1, d, 1.0, &mut RngSeed(1).rng());
    for kind in AdapterKind::ALL {
        for rank in [4, 32] {
            let p = init_zero_delta(kind, rank, SiteDims::square(d), RngSeed(2), ScalingRule::default_for(kind)).unwrap();
            g.bench_with_input(BenchmarkId::new(kind.to_string(), rank), &p, |b, p| b.iter(|| p.delta(black_box(x.row(0))).unwrap()));
        }
    }
    g.finish();
}

fn intensity(c: &mut Criterion) {
    c.bench_function("lora_down_intensity", |b| b.iter(|| lora_down_intensity(black_box(32), black_box(4096), black_box(16))));
}

fn position_mask(c: &mut Criterion) {
    let decode = |schedule| SequenceInput { tokens: vec![1], prompt_len: 8, phase: Phase::Decode, adapter: Some(AdapterId(0)), schedule };
    let prefill = SequenceInput { tokens: vec![1; 64], prompt_len: 64, phase: Phase::Prefill, adapter: Some(AdapterId(0)), schedule: PositionSchedule::PrefillOnly };
    let fast = ForwardBatch::new(vec![decode(PositionSchedule::PrefillOnly); 32]).unwrap();
    let mut mixed: Vec<_> = vec![decode(PositionSchedule::AllPositions); 31];
    mixed.push(prefill);
    let mixed = ForwardBatch::new(mixed).unwrap();
    c.bench_function("mask/all_decode", |b| b.iter(|| compute_position_mask(black_box(&fast))));
    c.bench_function("mask/mixed", |b| b.iter(|| compute_position_mask(black_box(&mixed))));
}

fn toy_generation(c: &mut Criterion) {
    let cfg = ModelConfig::tiny(RngSeed(3));
    let w = build_model(cfg.clone()).unwrap();
    let set = AdapterSet::perturbed(&cfg, AdapterKind::Direft, 4, ScalingRule::InvSqrtR, RngSeed(4)).unwrap();
    let prompt: Vec<u32> = (0..32).collect();
    let mut g = c.benchmark_group("generate_32x16");
    g.bench_function("base", |b| b.iter(|| generate(&w, &prompt, 16, None, PositionSchedule::AllPositions).unwrap()));
    for schedule in [PositionSchedule::PrefillOnly, PositionSchedule::AllPositions] {
        g.bench_function(schedule.to_string(), |b| b.iter(|| generate(&w, &prompt, 16, Some(&set), schedule).unwrap()));
    }
    g.finish();
}

fn statistics(c: &mut Criterion) {
    let diffs: Vec<f64> = Matrix::gaussian(1, 25, 1.0, &mut RngSeed(5).rng()).data().to_vec();
    c.bench_function("wilcoxon/exact_n25", |b| b.iter(|| wilcoxon_with_method(black_box(&diffs), ZeroPolicy::Drop, PMethod::Exact).unwrap()));
}

fn workload(c: &mut Criterion) {
    let cfg = WorkloadConfig::default();
    c.bench_function("workload/1000", |b| b.iter(|| generate_workload(black_box(&cfg)).unwrap()));
}

criterion_group!(benches, adapter_delta, intensity, position_mask, toy_generation, statistics, workload);
criterion_main!(benches);
