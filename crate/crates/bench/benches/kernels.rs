use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use d2p_core::linalg::{self, solve_normal_equations};
use d2p_core::metrics::{second_moment_ffn, MetricActivation, MetricOptions};
use d2p_core::model::TapRequest;
use d2p_core::stats::{CovarianceEstimate, DivergenceMatrix};
use d2p_core::toy::{toy_checkpoint, ToySpec};
use d2p_core::{ModelGraph, ModuleId, SolveOptions, Tensor, TokenBatch};

fn noise(shape: &[usize], salt: u32) -> Tensor {
    Tensor::from_fn(shape, |i| {
        let x = (i as u32).wrapping_mul(2_654_435_761).wrapping_add(salt.wrapping_mul(40_503));
        (x >> 8) as f32 / (1u32 << 24) as f32 - 0.5
    })
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 256] {
        let a = noise(&[n, n], 1);
        let b = noise(&[n, n], 2);
        g.bench_with_input(BenchmarkId::new("nn", n), &n, |bch, _| bch.iter(|| linalg::matmul(&a, &b).unwrap()));
        g.bench_with_input(BenchmarkId::new("tn_f64", n), &n, |bch, _| {
            bch.iter(|| linalg::matmul_tn_f64(&a, &b).unwrap())
        });
    }
    g.finish();
}

fn cholesky(c: &mut Criterion) {
    let mut g = c.benchmark_group("normal_equations");
    for d in [64, 256] {
        let x = noise(&[4 * d, d], 3);
        let y = noise(&[4 * d, d], 4);
        let gram = linalg::matmul_tn_f64(&x, &x).unwrap();
        let xty = linalg::matmul_tn_f64(&x, &y).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(d), &d, |bch, &d| {
            bch.iter(|| solve_normal_equations(black_box(&gram), &xty, d, d, SolveOptions::default(), "bench").unwrap())
        });
    }
    g.finish();
}

fn divergence(c: &mut Criterion) {
    let (h, s) = (12, 128);
    let logits = noise(&[h * s, s], 5);
    let mut attn = Tensor::zeros(&[h * s, s]);
    for r in 0..h * s {
        let t = r % s;
        let row = &logits.row(r)[..=t];
        let max = row.iter().cloned().fold(f32::MIN, f32::max);
        let z: f32 = row.iter().map(|v| (8.0 * (v - max)).exp()).sum();
        for (j, v) in row.iter().enumerate() {
            attn.row_mut(r)[j] = (8.0 * (v - max)).exp() / z;
        }
    }
    let attn = attn.reshape(vec![h, s, s]).unwrap();
    c.bench_function("divergence_accumulate_12x128", |bch| {
        bch.iter(|| {
            let mut m = DivergenceMatrix::new(h);
            m.accumulate(black_box(&attn)).unwrap();
            m
        })
    });
}

fn second_moment(c: &mut Criterion) {
    let (d, inner) = (256, 1024);
    let wu = noise(&[d, inner], 6);
    let wg = noise(&[d, inner], 7);
    let wd = noise(&[inner, d], 8);
    let mut sigma = CovarianceEstimate::new(d);
    sigma.accumulate(&noise(&[512, d], 9)).unwrap();
    let module = ModuleId::ffn(0);
    let opts = MetricOptions::default();
    c.bench_function("second_moment_ffn_256x1024", |bch| {
        bch.iter(|| second_moment_ffn(module, &wu, None, &wd, &sigma, MetricActivation::Gelu, opts).unwrap())
    });
    c.bench_function("second_moment_gated_256x1024", |bch| {
        bch.iter(|| second_moment_ffn(module, &wu, Some(&wg), &wd, &sigma, MetricActivation::Silu, opts).unwrap())
    });
}

fn forward(c: &mut Criterion) {
    let graph = ModelGraph::from_checkpoint(&toy_checkpoint(&ToySpec::gpt2(), 0)).unwrap();
    let batch = TokenBatch::new(4, 64, (0..256).map(|i| (i * 7) % 128).collect()).unwrap();
    c.bench_function("toy_forward_4x64", |bch| {
        bch.iter(|| graph.forward(black_box(&batch), &TapRequest::none()).unwrap())
    });
}

criterion_group!(benches, matmul, cholesky, divergence, second_moment, forward);
criterion_main!(benches);
