use proptest::prelude::*;

use d2p_core::linalg::{self, argsort_ascending, solve_normal_equations};
use d2p_core::plan::ModuleKind;
use d2p_core::pruner::{allocate, select_removed, ModuleUnits, SparsityTarget};
use d2p_core::stats::js_distance;
use d2p_core::{ModuleId, ModulePlan, SolveOptions, Tensor};

fn distribution(len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(0.0f32..1.0, len).prop_map(|v| {
        let total: f32 = v.iter().sum::<f32>() + 1e-3;
        let mut v: Vec<f32> = v.iter().map(|x| x / total).collect();
        v[0] += 1.0 - v.iter().sum::<f32>();
        v
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(row in prop::collection::vec(
        prop_oneof![-1e30f32..1e30, -50.0f32..50.0, Just(1e30f32), Just(-1e30f32)], 1..40)) {
        let n = row.len();
        let t = Tensor::new(vec![1, n], row).unwrap();
        let s = linalg::softmax_rows(&t);
        let total: f64 = s.data().iter().map(|&v| v as f64).sum();
        prop_assert!((total - 1.0).abs() <= 1e-6, "sum {}", total);
        prop_assert!(s.data().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn js_distance_is_a_bounded_symmetric_distance(
        (p, q) in (2usize..12).prop_flat_map(|n| (distribution(n), distribution(n)))
    ) {
        let d = js_distance(&p, &q);
        prop_assert!((0.0..=1.0 + 1e-9).contains(&d));
        prop_assert!((d - js_distance(&q, &p)).abs() < 1e-12);
        prop_assert!(js_distance(&p, &p) < 1e-6);
    }

    #[test]
    fn solver_recovers_planted_weights(seed in 0u64..10_000, k in 1usize..6) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (64, 8);
        let x = Tensor::from_fn(&[n, d], |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::from_fn(&[d, k], |_| rng.gen_range(-2.0..2.0));
        let y = linalg::matmul(&x, &w).unwrap();
        let g = linalg::matmul_tn_f64(&x, &x).unwrap();
        let c = linalg::matmul_tn_f64(&x, &y).unwrap();
        let (w_hat, stats) = solve_normal_equations(&g, &c, d, k, SolveOptions::ridge(0.0), "prop").unwrap();
        prop_assert_eq!(stats.lambda, 0.0);
        for (a, b) in w_hat.iter().zip(w.data()) {
            prop_assert!((a - *b as f64).abs() < 1e-4);
        }
    }

    #[test]
    fn channel_plans_partition(units in 1usize..200, mask in prop::collection::vec(any::<bool>(), 200)) {
        let mut kept: Vec<usize> = (0..units).filter(|&i| mask[i]).collect();
        if kept.is_empty() {
            kept.push(units - 1);
        }
        let p = ModulePlan::from_channels(&kept, units).unwrap();
        prop_assert_eq!(p.kept.len() + p.removed.len(), units);
        prop_assert!(p.validate(ModuleId::ffn(0), units, 1).is_ok());
        prop_assert!(p.removed.iter().all(|r| p.kept.binary_search(r).is_err()));
    }

    #[test]
    fn head_plans_are_whole_heads(n_heads in 1usize..16, d_head in 1usize..9, mask in prop::collection::vec(any::<bool>(), 16)) {
        let mut kept: Vec<usize> = (0..n_heads).filter(|&i| mask[i]).collect();
        if kept.is_empty() {
            kept.push(0);
        }
        let p = ModulePlan::from_heads(&kept, n_heads, d_head).unwrap();
        prop_assert_eq!(p.kept.len(), kept.len() * d_head);
        let heads = p.validate(ModuleId::attention(0), n_heads * d_head, d_head).unwrap();
        prop_assert_eq!(heads, Some(kept));
    }

    #[test]
    fn removal_respects_budget(scores in prop::collection::vec(0.0f64..100.0, 1..64), frac in 0.0f64..1.0) {
        let budget = ((scores.len() as f64) * frac) as usize;
        let removed = select_removed(&scores, None, budget);
        prop_assert_eq!(removed.len(), budget);
        let mut sorted = removed.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), budget);
        // removed units are exactly the lowest-scoring ones
        prop_assert_eq!(&removed[..], &argsort_ascending(&scores)[..budget]);
    }

    #[test]
    fn budgets_grow_with_the_target(a in 0.0f64..0.9, b in 0.0f64..0.9) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let modules: Vec<ModuleUnits> = (0..3)
            .flat_map(|blk| {
                [
                    ModuleUnits { id: ModuleId::new(blk, ModuleKind::Attention), units: 12, params_per_unit: 4 * 768 * 64 },
                    ModuleUnits { id: ModuleId::new(blk, ModuleKind::Ffn), units: 3072, params_per_unit: 2 * 768 },
                ]
            })
            .collect();
        let (Ok(x), Ok(y)) = (
            allocate(&modules, SparsityTarget::new(lo).unwrap()),
            allocate(&modules, SparsityTarget::new(hi).unwrap()),
        ) else {
            return Ok(());
        };
        for m in &modules {
            prop_assert!(x.budgets[&m.id] <= y.budgets[&m.id]);
        }
        prop_assert!((x.achieved - lo).abs() <= 0.005);
    }
}
