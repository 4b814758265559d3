use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use neuroprune::data::{generate_shapes, GlyphSpec};
use neuroprune::importance::{estimate, Estimator, GradientSource};
use neuroprune::nn::{build_reference, Mode, ReferenceConfig};
use neuroprune::tensor::{conv2d, matmul, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Runs `f` on the global pool ("parallel") and on a one-thread pool
/// ("sequential"); without the `parallel` feature only the latter exists.
fn both(c: &mut Criterion, group: &str, f: impl Fn() + Sync) {
    let mut g = c.benchmark_group(group);
    #[cfg(feature = "parallel")]
    {
        g.bench_function(BenchmarkId::new("parallel", rayon::current_num_threads()), |b| b.iter(&f));
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        g.bench_function(BenchmarkId::new("sequential", 1), |b| b.iter(|| pool.install(&f)));
    }
    #[cfg(not(feature = "parallel"))]
    g.bench_function(BenchmarkId::new("sequential", 1), |b| b.iter(&f));
    g.finish();
}

fn kernels(c: &mut Criterion) {
    let x = random(&[32, 16, 16, 16], 1);
    let w = random(&[32, 16, 3, 3], 2);
    both(c, "conv2d_32x16x16x16", || {
        black_box(conv2d(&x, &w, 1, 1).unwrap());
    });

    let a = random(&[256, 256], 3);
    let b = random(&[256, 256], 4);
    both(c, "matmul_256", || {
        black_box(matmul(&a, &b).unwrap());
    });

    let model = build_reference::<f32>("cnn_small", &ReferenceConfig::default()).unwrap();
    let input = random(&[32, 1, 16, 16], 5);
    let grad = random(&[32, 4], 6);
    both(c, "cnn_small_forward_backward_b32", || {
        let rec = model.forward_pass(&input, Mode::Train, None).unwrap();
        black_box(model.backward_pass(&rec, &grad, true).unwrap());
    });

    let data = generate_shapes(&GlyphSpec { per_class: 16, ..Default::default() }).unwrap();
    let source = GradientSource::random(0, true);
    both(c, "importance_taylorfo_sq_d64", || {
        black_box(estimate(&model, &data, 64, Estimator::TaylorFoSq, &source, 16).unwrap());
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kernels
}
criterion_main!(benches);
