use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use pdas_bench::{matrix, source_sample};
use pdas_core::infer::{default_stride, sliding_window_predict};
use pdas_core::metrics::{aji, connected_components, dice, pq};
use pdas_core::model::{build_attention_mask, ModelConfig, ModelState};
use pdas_core::{Graph, Tensor};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 128, 256] {
        let a = Tensor::new(vec![n, n], matrix(n, n, 1)).unwrap();
        let b = Tensor::new(vec![n, n], matrix(n, n, 2)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (x, y) = (g.param(a.clone()), g.param(b.clone()));
                let z = g.matmul(x, y).unwrap();
                let s = g.sum(z);
                g.backward(s).unwrap();
                black_box(g.grad(x).unwrap()[0])
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let (n_task, n_pcl, n_img, dim) = (4, 12, 64, 64);
    let n = n_task + n_pcl + n_img;
    let mask = build_attention_mask(n_task, n_pcl, n_img);
    let q = Tensor::new(vec![n, dim], matrix(n, dim, 3)).unwrap();
    let k = Tensor::new(vec![n, dim], matrix(n, dim, 4)).unwrap();
    let v = Tensor::new(vec![n, dim], matrix(n, dim, 5)).unwrap();
    c.bench_function("attention_masked_forward_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (q, k, v) = (g.param(q.clone()), g.param(k.clone()), g.param(v.clone()));
            let o = g.attention(q, k, v, 4, Some(&mask)).unwrap();
            let s = g.sum(o);
            g.backward(s).unwrap();
            black_box(g.grad(q).unwrap()[0])
        })
    });
}

fn forward(c: &mut Criterion) {
    let model = ModelState::new(ModelConfig::default(), 0).unwrap();
    let sample = source_sample(0);
    let crop = pdas_core::data::crop_exact(&sample, 0, 0, model.config().image_crop).unwrap();
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("predict_64px", |bench| {
        bench.iter(|| black_box(model.predict(&crop.image, &crop.centers[..1]).unwrap()))
    });
    group.bench_function("sliding_window_128px", |bench| {
        bench.iter(|| {
            black_box(
                sliding_window_predict(&model, &sample.image, default_stride(&model), &[]).unwrap(),
            )
        })
    });
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let gt = source_sample(1);
    let other = source_sample(2);
    let (a, b) = (gt.foreground(), other.foreground());
    c.bench_function("connected_components_128px", |bench| {
        bench.iter(|| black_box(connected_components(&a)))
    });
    c.bench_function("dice_128px", |bench| {
        bench.iter(|| black_box(dice(&a, &b).unwrap()))
    });
    c.bench_function("aji_128px", |bench| {
        bench.iter(|| black_box(aji(&other.instances, &gt.instances).unwrap()))
    });
    c.bench_function("pq_128px", |bench| {
        bench.iter(|| black_box(pq(&other.instances, &gt.instances).unwrap()))
    });
}

criterion_group!(benches, matmul, attention, forward, metrics);
criterion_main!(benches);
