use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use croprot_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    // PSE first layer over a 36-date, 32-pixel draw, and a square case
    for (m, k, n) in [(1152, 10, 32), (1152, 32, 64), (128, 128, 128)] {
        let a = random(m, k, &mut rng);
        let b = random(k, n, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{m}x{k}x{n}")), &(a, b), |bench, (a, b)| {
            bench.iter(|| black_box(a.matmul(b).unwrap()))
        });
    }
    group.finish();
}

fn softmax(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(8, 36, &mut rng);
    c.bench_function("softmax 8x36", |b| b.iter(|| black_box(x.softmax(1).unwrap())));
}

criterion_group!(benches, matmul, softmax);
criterion_main!(benches);
