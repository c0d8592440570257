use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dilated_seg::model::{DilatedSegNet, ModelConfig};
use dilated_seg::tensor::kernels::conv2d_forward;
use dilated_seg::tensor::{ConvGeometry, Execution};
use dilated_seg::{Rng, Shape, Tensor};
use std::hint::black_box;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn random(shape: Shape, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.uniform_in(-1.0, 1.0) as f32)
}

fn conv(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let x = random(Shape::new(4, 32, 32, 32), &mut rng);
    let w = random(Shape::new(32, 32, 3, 3), &mut rng);
    let bias = vec![0.1f32; 32];
    let mut group = c.benchmark_group("conv3x3_32ch");
    for d in [1, 6] {
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, format!("d{d}")), &exec, |b, &exec| {
                b.iter(|| conv2d_forward(black_box(&x), &w, Some(&bias), ConvGeometry::same_3x3(d), exec).unwrap())
            });
        }
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let net = DilatedSegNet::<f32>::new_initialized(ModelConfig::desk(), 1).unwrap();
    let x = random(Shape::new(1, 3, 64, 64), &mut Rng::new(2));
    let mut group = c.benchmark_group("desk_forward_64");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_function(name, |b| b.iter(|| net.predict_full(black_box(&x), exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, conv, forward);
criterion_main!(benches);
