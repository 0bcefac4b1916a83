use chanprune::diffcore::{Graph, Tensor};
use chanprune::netgraph::{he_init, tiny_vgg};
use chanprune::par::set_parallel;
use chanprune::scoring::score_3sp;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn conv(c: &mut Criterion) {
    let x = random(&[32, 16, 32, 32], 1);
    let k = random(&[32, 16, 3, 3], 2);
    let mut group = c.benchmark_group("conv2d 32x16x32x32 -> 32");
    for (name, on) in MODES {
        set_parallel(on);
        group.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let (xi, ki) = (g.constant(x.clone()), g.constant(k.clone()));
                g.conv2d(xi, ki, None, 1, 1).unwrap()
            })
        });
        group.bench_function(BenchmarkId::new("forward+backward", name), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let (xi, ki) = (g.param(x.clone()), g.param(k.clone()));
                let y = g.conv2d(xi, ki, None, 1, 1).unwrap();
                let l = g.sum(y);
                g.backward(l).unwrap();
            })
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let mut m = tiny_vgg::<f32>(10, 0.25).unwrap();
    he_init(&mut m, 0);
    let x = random(&[64, 3, 32, 32], 3);
    let labels: Vec<usize> = (0..64).map(|i| i % 10).collect();
    let mut group = c.benchmark_group("tiny-vgg batch 64");
    group.sample_size(10);
    for (name, on) in MODES {
        set_parallel(on);
        group.bench_function(BenchmarkId::new("predict", name), |b| b.iter(|| m.predict(&x).unwrap()));
        group.bench_function(BenchmarkId::new("3sp scores", name), |b| b.iter(|| score_3sp(&m, &x, &labels).unwrap()));
    }
    group.finish();
    set_parallel(true);
}

criterion_group!(benches, conv, model);
criterion_main!(benches);
