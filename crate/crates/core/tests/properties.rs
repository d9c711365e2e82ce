//! Invariants of the public API under randomized inputs.

use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use canf::can::{AdaptiveKernelBank, CondAwareParam, LayerKind, WeightGenerator};
use canf::checkpoint::{decode, encode};
use canf::config::{parse_config, RunConfig};
use canf::diffusion::{cfg_combine, make_schedule, q_sample};
use canf::model::{build_model, ModelConfig};
use canf::{Conv2dSpec, Tensor};

fn randn(shape: &[usize], std: f64, seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, std, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generated_weight_is_linear_in_condition(
        p in 1usize..40, d in 1usize..12, a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()
    ) {
        let gen = WeightGenerator::new(randn(&[p, d], 1.0, seed), &[p], false).unwrap();
        let c1 = randn(&[1, d], 1.0, seed ^ 1);
        let c2 = randn(&[1, d], 1.0, seed ^ 2);
        let mix = c1.zip_map(&c2, |x, y| a * x + b * y).unwrap();
        let lhs = gen.generate(&mix).unwrap();
        let (g1, g2) = (gen.generate(&c1).unwrap(), gen.generate(&c2).unwrap());
        let rhs = g1.zip_map(&g2, |x, y| a * x + b * y).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
    }

    #[test]
    fn zero_generator_is_the_static_layer(
        batch in 1usize..5, c in 1usize..6, depthwise in any::<bool>(), size in 3usize..7, d in 1usize..6, seed in any::<u64>()
    ) {
        let groups = if depthwise { c } else { 1 };
        let ws = [c, c / groups, 3, 3];
        let layer = CondAwareParam::new(
            LayerKind::DwConv,
            randn(&ws, 0.5, seed),
            Arc::new(WeightGenerator::zeros(&ws, d, false)),
            Some(Conv2dSpec::new(1, 1, groups)),
        ).unwrap();
        let x = randn(&[batch, c, size, size], 1.0, seed ^ 3);
        let cb = randn(&[batch, d], 1.0, seed ^ 4);
        let fused = layer.apply_fused(&x, &cb).unwrap();
        prop_assert!(fused.bitwise_eq(&layer.apply_static(&x).unwrap()));
    }

    #[test]
    fn kernel_mixture_is_convex(k in 1usize..6, d in 1usize..6, batch in 1usize..4, seed in any::<u64>()) {
        // identical bases make every mixture equal to that base
        let base = randn(&[1, 2, 1, 3, 3], 1.0, seed);
        let mut bank_data = Vec::new();
        for _ in 0..k {
            bank_data.extend_from_slice(base.data());
        }
        let bank = AdaptiveKernelBank::new(
            Tensor::new(vec![k, 2, 1, 3, 3], bank_data).unwrap(),
            randn(&[k, d], 2.0, seed ^ 5),
            Conv2dSpec::new(1, 1, 2),
        ).unwrap();
        let mixed = bank.mix(&randn(&[batch, d], 1.0, seed ^ 6)).unwrap();
        for i in 0..batch {
            let m = mixed.narrow0(i, 1).unwrap();
            prop_assert!(m.data().iter().zip(base.data()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn guidance_interpolates(s in -2.0f64..4.0, seed in any::<u64>()) {
        let c = randn(&[2, 5], 1.0, seed);
        let u = randn(&[2, 5], 1.0, seed ^ 7);
        prop_assert!(cfg_combine(&c, &u, 1.0).unwrap().max_abs_diff(&c).unwrap() < 1e-15);
        prop_assert!(cfg_combine(&c, &u, 0.0).unwrap().bitwise_eq(&u));
        let g = cfg_combine(&c, &u, s).unwrap();
        let want = c.zip_map(&u, |a, b| b + s * (a - b)).unwrap();
        prop_assert!(g.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn noiseless_forward_process_scales(t in 0usize..100, seed in any::<u64>()) {
        let sched = make_schedule(100, 1e-4, 0.02).unwrap();
        let x0 = randn(&[3, 1, 2, 2], 1.0, seed);
        let xt = q_sample(&x0, &[t; 3], &Tensor::zeros(&[3, 1, 2, 2]), &sched).unwrap();
        let s = sched.alpha_bar(t).sqrt();
        prop_assert!(xt.max_abs_diff(&x0.map(|v| s * v)).unwrap() < 1e-12);
        if t > 0 {
            prop_assert!(sched.alpha_bar(t) < sched.alpha_bar(t - 1));
        }
    }

    #[test]
    fn config_text_roundtrips(width in 1usize..5, depth in 1usize..4, dw in any::<bool>(), patch in any::<bool>(), seed in any::<u64>()) {
        let mut cfg = RunConfig { seed, ..RunConfig::default() };
        cfg.model.width = 8 * width;
        cfg.model.heads = 2;
        cfg.model.depth = depth;
        cfg.model.cond_aware_set.clear();
        if dw { cfg.model.cond_aware_set.insert(LayerKind::DwConv); }
        if patch { cfg.model.cond_aware_set.insert(LayerKind::PatchEmbed); }
        let back = parse_config(&cfg.serialize(), &[]).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoint_roundtrip_is_bitwise(depth in 1usize..3, seed in any::<u64>()) {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig { width: 8, heads: 2, depth, cond_dim: 4, ..ModelConfig::default() };
        let m = build_model::<f32>(&cfg.model, seed).unwrap();
        let bytes = encode(&m, &cfg);
        let (cfg2, m2) = decode(&bytes).unwrap().into_model::<f32>(&[]).unwrap();
        prop_assert_eq!(&cfg2, &cfg);
        prop_assert_eq!(encode(&m2, &cfg2), bytes);
    }
}
