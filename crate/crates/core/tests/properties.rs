use basn::codec::{
    build_plan, embed, embed_bits, extract_with_plan, quantize_attention, CapacityMap, PayloadFrame, PlanConfig,
};
use basn::fusion::{fuse, FusionStrategy};
use basn::image::{AttentionMap, FloatImage, ImageTensor};
use basn::mfd::simulate_embed;
use basn::penalty::{itc_area_penalty, mfd_area_penalty};
use basn::texture::var_pool_2d;
use basn::Tensor;
use proptest::prelude::*;

fn capacity() -> impl Strategy<Value = CapacityMap> {
    (8usize..20, 8usize..20).prop_flat_map(|(h, w)| {
        prop::collection::vec(0u8..=4, h * w)
            .prop_map(move |n| CapacityMap::new(h, w, 3, 4, n.iter().flat_map(|&b| [b; 3]).collect()).unwrap())
    })
}

fn cover_for(cap: &CapacityMap, seed: u64) -> ImageTensor {
    let n = cap.height() * cap.width() * 3;
    let bytes = (0..n as u64).map(|i| (i.wrapping_mul(2654435761).wrapping_add(seed) >> 3) as u8).collect();
    ImageTensor::new(cap.height(), cap.width(), 3, bytes).unwrap()
}

fn plan_cfg() -> impl Strategy<Value = PlanConfig> {
    (0u8..=2, any::<Option<u64>>(), 0.2f64..2.0, any::<bool>()).prop_map(|(lsm_k, seed, limit, limited)| PlanConfig {
        lsm_k,
        ps_seed: seed,
        ps_limit_bpp: (seed.is_some() && limited).then_some(limit),
    })
}

fn attention(h: usize, w: usize) -> impl Strategy<Value = AttentionMap<f64>> {
    prop::collection::vec(0.0f64..=1.0, h * w).prop_map(move |v| AttentionMap::new(h, w, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frame_round_trips_through_any_plan(cap in capacity(), cfg in plan_cfg(), seed in any::<u64>(), frac in 0.0f64..=1.0) {
        let plan = build_plan(&cap, cfg).unwrap();
        let room = plan.payload_capacity();
        let n = (room as f64 * frac) as usize;
        let body: Vec<bool> = (0..n).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
        let cover = cover_for(&cap, seed);
        let frame = PayloadFrame::from_bits(body.clone());
        match embed(&cover, &plan, &frame) {
            Ok(stego) => prop_assert_eq!(extract_with_plan(&stego, &plan).unwrap().into_body(), body),
            Err(_) => prop_assert!(frame.encoded_len() > plan.len()),
        }
    }

    #[test]
    fn low_planes_are_never_touched(cap in capacity(), k in 1u8..=2, seed in any::<u64>()) {
        let plan = build_plan(&cap, PlanConfig::plain(k)).unwrap();
        let cover = cover_for(&cap, seed);
        let bits: Vec<bool> = (0..plan.len()).map(|i| (seed >> (i % 64)) & 1 == 0).collect();
        let stego = embed_bits(&cover, &plan, &bits).unwrap();
        let mask = (1u8 << k) - 1;
        for (a, b) in cover.bytes().iter().zip(stego.bytes()) {
            prop_assert_eq!(a & mask, b & mask);
        }
        prop_assert!(plan.slots().iter().all(|s| s.plane >= k));
    }

    #[test]
    fn straddling_respects_budget(cap in capacity(), seed in any::<u64>(), limit in 0.1f64..3.0) {
        let cfg = PlanConfig { lsm_k: 0, ps_seed: Some(seed), ps_limit_bpp: Some(limit) };
        let plan = build_plan(&cap, cfg).unwrap();
        prop_assert!(plan.bpp() <= limit);
        prop_assert!(plan.len() <= cap.total_bits());
    }

    #[test]
    fn plans_are_deterministic(cap in capacity(), cfg in plan_cfg()) {
        prop_assert_eq!(build_plan(&cap, cfg).unwrap(), build_plan(&cap, cfg).unwrap());
    }

    #[test]
    fn capacity_is_monotone_in_attention(a in attention(8, 8), bump in 0.0f64..0.5) {
        let b = AttentionMap::new(8, 8, a.values().iter().map(|v| (v + bump).min(1.0)).collect()).unwrap();
        let ca = quantize_attention(&a, 3, 4).unwrap();
        let cb = quantize_attention(&b, 3, 4).unwrap();
        for (x, y) in ca.bits().iter().zip(cb.bits()) {
            prop_assert!(x <= y);
        }
    }

    #[test]
    fn fusion_is_commutative_and_idempotent(a in attention(8, 8), b in attention(8, 8)) {
        for s in [FusionStrategy::Min, FusionStrategy::Mean] {
            prop_assert_eq!(fuse(&a, &b, s).unwrap(), fuse(&b, &a, s).unwrap());
            let same = fuse(&a, &a, s).unwrap();
            for (x, y) in same.values().iter().zip(a.values()) {
                prop_assert!((x - y).abs() < 1e-15);
            }
        }
        let min = fuse(&a, &b, FusionStrategy::Min).unwrap();
        let mean = fuse(&a, &b, FusionStrategy::Mean).unwrap();
        prop_assert!(min.values().iter().zip(mean.values()).all(|(m, n)| m <= n));
    }

    #[test]
    fn penalties_stay_in_range(e in 0.0f64..=1.0) {
        let p = itc_area_penalty(e).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(p <= e + 1e-12);
        let q = mfd_area_penalty(e);
        prop_assert!(q.is_finite() && q > 0.0);
    }

    #[test]
    fn simulated_embedding_is_bounded(a in attention(8, 8), seed in any::<u64>(), amp in 0.0f64..0.1) {
        let cover = FloatImage::filled(3, 8, 8, 0.5f64);
        let s = simulate_embed(&cover, &a, amp, seed).unwrap();
        for (i, (x, c)) in s.data().iter().zip(cover.data()).enumerate() {
            prop_assert!((0.0..=1.0).contains(x));
            prop_assert!((x - c).abs() <= a.values()[i % 64] * amp + 1e-12);
        }
    }

    #[test]
    fn var_pool_is_non_negative(v in prop::collection::vec(-10.0f64..10.0, 100), k in prop::sample::select(vec![1usize, 3, 5, 7])) {
        let out = var_pool_2d(&Tensor::new(vec![10, 10], v).unwrap(), k).unwrap();
        prop_assert!(out.data().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn var_pool_of_constant_is_zero(c in -5.0f64..5.0) {
        let out = var_pool_2d(&Tensor::new(vec![9, 9], vec![c; 81]).unwrap(), 7).unwrap();
        prop_assert!(out.data().iter().all(|&x| x.abs() < 1e-12));
    }
}
