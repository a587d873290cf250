//! Cross-checks against independent implementations and fixed formats.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use d2p_core::checkpoint::{load_model, load_plan, save_model, save_plan};
use d2p_core::linalg::{self, solve_least_squares, solve_normal_equations};
use d2p_core::model::TapRequest;
use d2p_core::toy::{toy_checkpoint, ToySpec};
use d2p_core::{Error, ModelConfig, ModelGraph, ModuleId, ModulePlan, PruningPlan, SolveOptions, Tensor, TokenBatch};

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn ridge_solve_matches_dense_linear_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let (n, d, k) = (40, 10, 3);
        let x: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xm = DMatrix::from_row_slice(n, d, &x);
        let ym = DMatrix::from_row_slice(n, k, &y);
        let g = xm.transpose() * &xm;
        let c = xm.transpose() * &ym;
        let lambda_frac = 0.05;
        let lambda = lambda_frac * g.diagonal().mean();
        let expected = (&g + DMatrix::identity(d, d) * lambda).try_inverse().unwrap() * &c;

        let g_rows: Vec<f64> = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| g[(i, j)]).collect();
        let c_rows: Vec<f64> = (0..d).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| c[(i, j)]).collect();
        let (w, stats) = solve_normal_equations(&g_rows, &c_rows, d, k, SolveOptions::ridge(lambda_frac), "oracle").unwrap();
        assert!((stats.lambda - lambda).abs() < 1e-12);
        for i in 0..d {
            for j in 0..k {
                assert!((w[i * k + j] - expected[(i, j)]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn rank_deficient_solve_matches_pseudo_inverse_predictions() {
    // duplicated column: Gram is singular, predictions are still unique
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n, d) = (50, 6);
    let mut x = Tensor::from_fn(&[n, d], |_| rng.gen_range(-1.0..1.0));
    for r in 0..n {
        let v = x.at(r, 0);
        x.row_mut(r)[5] = v;
    }
    let y = Tensor::from_fn(&[n, 2], |_| rng.gen_range(-1.0..1.0));
    let g = Tensor::from_f64(&[d, d], &linalg::matmul_tn_f64(&x, &x).unwrap()).unwrap();
    let c = Tensor::from_f64(&[d, 2], &linalg::matmul_tn_f64(&x, &y).unwrap()).unwrap();
    let w = solve_least_squares(&g, &c, SolveOptions::ridge(0.0)).unwrap();
    let pred = linalg::matmul(&x, &w).unwrap();

    let xm = DMatrix::from_row_slice(n, d, &x.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
    let ym = DMatrix::from_row_slice(n, 2, &y.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
    let w_pinv = xm.clone().pseudo_inverse(1e-10).unwrap() * ym;
    let pred_pinv = xm * w_pinv;
    for r in 0..n {
        for j in 0..2 {
            assert!((pred.at(r, j) as f64 - pred_pinv[(r, j)]).abs() < 1e-3);
        }
    }
}

#[test]
fn zero_gram_is_an_internal_error() {
    let err = solve_normal_equations(&[0.0; 4], &[0.0; 2], 2, 1, SolveOptions::default(), "zero").unwrap_err();
    assert!(matches!(err, Error::Singular { .. }));
    assert!(!err.is_user_error());
}

#[test]
fn fixtures_match_the_generator() {
    for (name, spec) in [("toy-gpt2", ToySpec::gpt2()), ("toy-llama", ToySpec::llama())] {
        let loaded = load_model(&fixture(name)).unwrap();
        assert_eq!(loaded, toy_checkpoint(&spec, 0), "{name}");
    }
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = load_model(&fixture("toy-llama")).unwrap();
    save_model(dir.path(), &ckpt).unwrap();
    for f in ["config.json", "tensors.json", "tensors.bin"] {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(fixture("toy-llama").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn pruned_checkpoint_reloads_with_its_plan() {
    let dense = ModelGraph::from_checkpoint(&load_model(&fixture("toy-gpt2")).unwrap()).unwrap();
    let mut plan = PruningPlan::default();
    plan.insert(ModuleId::attention(1), ModulePlan::from_heads(&[0, 3], 4, 16).unwrap());
    plan.insert(ModuleId::ffn(0), ModulePlan::from_channels(&(0..100).collect::<Vec<_>>(), 256).unwrap());
    let pruned = dense.apply_plan(&plan).unwrap();

    let dir = tempfile::tempdir().unwrap();
    save_model(dir.path(), &pruned.to_checkpoint()).unwrap();
    let back = ModelGraph::from_checkpoint(&load_model(dir.path()).unwrap()).unwrap();
    assert_eq!(back.applied_plan.as_ref(), Some(&plan));
    assert_eq!(back.parameter_count(), pruned.parameter_count());
    assert!(back.apply_plan(&plan).is_err());

    let batch = TokenBatch::new(1, 10, (0..10).collect()).unwrap();
    let (a, _) = pruned.forward(&batch, &TapRequest::none()).unwrap();
    let (b, _) = back.forward(&batch, &TapRequest::none()).unwrap();
    assert_eq!(a, b);

    save_plan(&dir.path().join("p.json"), &plan).unwrap();
    assert_eq!(load_plan(&dir.path().join("p.json")).unwrap(), plan);
    let text = std::fs::read_to_string(dir.path().join("p.json")).unwrap();
    assert!(text.contains("\"blocks.1.attn\""));
    assert!(text.contains("\"granularity\": \"head\""));
}

#[test]
fn mismatched_plan_and_tensors_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let dense = load_model(&fixture("toy-gpt2")).unwrap();
    save_model(dir.path(), &dense).unwrap();
    let mut plan = PruningPlan::default();
    plan.insert(ModuleId::ffn(0), ModulePlan::from_channels(&[0, 1], 256).unwrap());
    save_plan(&dir.path().join("plan.json"), &plan).unwrap();
    let err = load_model(dir.path()).unwrap_err();
    assert!(err.is_user_error(), "{err}");
}

#[test]
fn gpt2_small_shape_has_the_published_parameter_count() {
    let cfg = ModelConfig::gpt2_small();
    let n: usize = d2p_core::checkpoint::expected_tensors(&cfg, None)
        .values()
        .map(|s| s.shape.iter().product::<usize>())
        .sum();
    assert_eq!(n, 124_439_808);
}
