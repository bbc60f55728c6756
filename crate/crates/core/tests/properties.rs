use std::collections::{BTreeMap, BTreeSet};

use preft_core::adapter::{first_step_delta_norm, init_zero_delta};
use preft_core::cost::lora_down_intensity;
use preft_core::engine::AdapterPool;
use preft_core::model::{build_model, generate, AdapterSet, ModelConfig};
use preft_core::stats::{
    length_following_score, wilcoxon_signed_rank, wilcoxon_with_method, PMethod, Summary, ZeroPolicy,
};
use preft_core::tensor::l1_norm;
use preft_core::workload::{generate_workload, AdapterMix, WorkloadConfig};
use preft_core::{AdapterId, AdapterKind, Matrix, PositionSchedule, RngSeed, ScalingRule, SiteDims};
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = AdapterKind> {
    prop::sample::select(AdapterKind::ALL.to_vec())
}

fn schedule() -> impl Strategy<Value = PositionSchedule> {
    prop_oneof![Just(PositionSchedule::PrefillOnly), Just(PositionSchedule::AllPositions)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_init_has_zero_delta(kind in kind(), rank in 1usize..16, seed in any::<u64>(), rows in 1usize..5) {
        let d = 16;
        let p = init_zero_delta(kind, rank, SiteDims::square(d), RngSeed(seed), ScalingRule::default_for(kind)).unwrap();
        let mut rng = RngSeed(seed ^ 1).rng();
        let x = Matrix::gaussian(rows, d, 3.0, &mut rng);
        for row in 0..rows {
            prop_assert!(p.delta(x.row(row)).unwrap().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn zero_delta_generation_matches_base(kind in kind(), rank in 1usize..8, schedule in schedule(), seed in 0u64..1000) {
        let cfg = ModelConfig::tiny(RngSeed(seed));
        let w = build_model(cfg.clone()).unwrap();
        let set = AdapterSet::zero_delta(&cfg, kind, rank, ScalingRule::default_for(kind), RngSeed(seed + 1)).unwrap();
        let prompt = [1, 5, 9, (seed % 60) as u32];
        prop_assert_eq!(
            generate(&w, &prompt, 6, Some(&set), schedule).unwrap(),
            generate(&w, &prompt, 6, None, schedule).unwrap()
        );
    }

    #[test]
    fn intensity_below_each_argument_and_monotone(b in 1usize..4096, d in 1usize..65536, r in 1usize..512) {
        let i = lora_down_intensity(b, d, r);
        prop_assert!(i < r.min(b).min(d) as f64);
        prop_assert!(lora_down_intensity(b + 1, d, r) > i);
        prop_assert!(lora_down_intensity(b, d + 1, r) > i);
        prop_assert!(lora_down_intensity(b, d, r + 1) > i);
    }

    #[test]
    fn first_step_norm_rank_free(seed in any::<u64>(), r in 1usize..32) {
        let d = 32;
        let mut rng = RngSeed(seed).rng();
        let h = Matrix::gaussian(1, d, 1.0, &mut rng).row(0).to_vec();
        let g = Matrix::gaussian(1, d, 1.0, &mut rng).row(0).to_vec();
        let n = first_step_delta_norm(r, d, &h, &g, 0.01, 1e-12, ScalingRule::InvSqrtR, RngSeed(seed)).unwrap();
        let expect = 0.01 * (l1_norm(&h) + 1.0);
        prop_assert!(((n - expect) / expect).abs() < 1e-6);
    }

    #[test]
    fn workload_in_bounds(l_max in 4usize..3000, n in 1usize..64, mix in prop::sample::select(AdapterMix::ALL.to_vec()), seed in any::<u64>()) {
        let cfg = WorkloadConfig { n_requests: 200, l_max, n_adapters: n, mix, seed: RngSeed(seed) };
        let specs = generate_workload(&cfg).unwrap();
        prop_assert_eq!(specs.len(), 200);
        for s in specs {
            prop_assert!(s.check(l_max, n).is_ok());
        }
    }

    #[test]
    fn wilcoxon_antisymmetric_and_scale_free(diffs in prop::collection::vec(-50i32..50, 3..40), scale in 0.01f64..100.0) {
        let diffs: Vec<f64> = diffs.into_iter().map(f64::from).collect();
        prop_assume!(diffs.iter().any(|d| *d != 0.0));
        let base = wilcoxon_signed_rank(&diffs, ZeroPolicy::Drop).unwrap();
        let neg: Vec<f64> = diffs.iter().map(|d| -d).collect();
        let flipped = wilcoxon_signed_rank(&neg, ZeroPolicy::Drop).unwrap();
        prop_assert!((base.p_value - flipped.p_value).abs() < 1e-12);
        prop_assert_eq!(base.w_plus, flipped.w_minus);
        let scaled: Vec<f64> = diffs.iter().map(|d| d * scale).collect();
        let s = wilcoxon_signed_rank(&scaled, ZeroPolicy::Drop).unwrap();
        prop_assert!((base.p_value - s.p_value).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&base.p_value));
    }

    #[test]
    fn exact_and_normal_agree_for_moderate_n(n in 15usize..=25, seed in any::<u64>()) {
        let mut rng = RngSeed(seed).rng();
        let diffs: Vec<f64> = Matrix::gaussian(1, n, 1.0, &mut rng).row(0).iter().map(|d| d + 0.3).collect();
        let e = wilcoxon_with_method(&diffs, ZeroPolicy::Drop, PMethod::Exact).unwrap();
        let a = wilcoxon_with_method(&diffs, ZeroPolicy::Drop, PMethod::Normal).unwrap();
        prop_assert!((e.p_value - a.p_value).abs() <= 0.02, "{} vs {}", e.p_value, a.p_value);
    }

    #[test]
    fn length_score_bounded_and_peaked(k in 1.0f64..50_000.0, ratio in 0.0f64..6.0) {
        let s = length_following_score(k, k * ratio).unwrap();
        prop_assert!((0.0..=100.0).contains(&s));
        prop_assert!(s <= length_following_score(k, k).unwrap());
    }

    #[test]
    fn percentiles_ordered(values in prop::collection::vec(0.0f64..1e3, 1..300)) {
        let s = Summary::of(&values).unwrap();
        prop_assert!(s.is_monotone());
        let max = values.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!(s.p99 <= max);
    }

    #[test]
    fn pool_matches_reference_lru(cap in 1usize..6, catalogue in 1usize..12, steps in prop::collection::vec(prop::collection::btree_set(0u32..12, 0..4), 1..60)) {
        let mut pool = AdapterPool::new(cap, catalogue).unwrap();
        let mut last_use: BTreeMap<u32, u64> = BTreeMap::new();
        for (t, needed) in steps.iter().enumerate() {
            let needed: BTreeSet<AdapterId> = needed.iter().filter(|a| (**a as usize) < catalogue).map(|a| AdapterId(*a)).collect();
            let result = pool.ensure_resident(&needed, t as u64);
            if needed.len() > cap {
                prop_assert!(result.is_err());
                continue;
            }
            prop_assert!(result.is_ok());
            for a in &needed {
                if !last_use.contains_key(&a.0) {
                    while last_use.len() >= cap {
                        let victim = last_use
                            .iter()
                            .filter(|(id, _)| !needed.contains(&AdapterId(**id)))
                            .min_by_key(|(id, used)| (**used, **id))
                            .map(|(id, _)| *id)
                            .unwrap();
                        last_use.remove(&victim);
                    }
                    last_use.insert(a.0, t as u64);
                }
            }
            for a in &needed {
                last_use.insert(a.0, t as u64);
            }
            let expect: Vec<AdapterId> = last_use.keys().map(|a| AdapterId(*a)).collect();
            let got: Vec<AdapterId> = pool.resident().collect();
            prop_assert_eq!(got, expect);
        }
    }
}
