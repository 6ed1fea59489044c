use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use sbfuse_bench::fixture;
use sbfuse_core::detector::predict;
use sbfuse_core::fusion::{fuse_average, fuse_cross_attention, fuse_maxpool, fuse_pmd, AlphaShape};
use sbfuse_core::trainer::{train_step, OptState, StepContext};
use sbfuse_core::world::{camera_to_bev, lidar_to_bev, BevProjector};
use sbfuse_core::{FusionConfig, Tape, Tensor};

fn tape_kernels(c: &mut Criterion) {
    let mut g = c.benchmark_group("tape");
    let x = Tensor::from_fn(&[32, 64, 64], |i| (i % 17) as f32 * 0.01);
    let w = Tensor::from_fn(&[32, 32, 3, 3], |i| (i % 7) as f32 * 0.01 - 0.03);
    let b = Tensor::zeros(&[32]);
    g.bench_function("conv3x3_32ch_64x64", |bench| {
        bench.iter(|| {
            let mut t = Tape::<f32>::new();
            let (xi, wi, bi) = (t.constant(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
            black_box(t.conv2d(xi, wi, bi, 1).unwrap());
        })
    });
    g.bench_function("conv3x3_32ch_64x64_backward", |bench| {
        bench.iter(|| {
            let mut t = Tape::<f32>::new();
            let (xi, wi, bi) = (t.constant(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
            let y = t.conv2d(xi, wi, bi, 1).unwrap();
            let s = t.sum(y);
            t.backward(s).unwrap();
            black_box(t.grad(wi).map(|g| g[0]));
        })
    });
    let a = Tensor::from_fn(&[1024, 32], |i| (i % 13) as f32 * 0.01);
    let bm = Tensor::from_fn(&[1024, 32], |i| (i % 11) as f32 * 0.01);
    g.bench_function("matmul_1024x32_by_32x1024", |bench| {
        bench.iter(|| {
            let mut t = Tape::<f32>::new();
            let (ai, bi) = (t.constant(a.clone()), t.constant(bm.clone()));
            black_box(t.matmul(ai, bi, true).unwrap());
        })
    });
    g.finish();
}

fn fusion_ops(c: &mut Criterion) {
    let mut g = c.benchmark_group("fusion");
    let f = fixture(64, FusionConfig::default());
    g.bench_function("average_64", |b| {
        b.iter(|| black_box(fuse_average(&f.lidar, &f.camera, 0.5).unwrap()))
    });
    g.bench_function("maxpool_64", |b| {
        b.iter(|| black_box(fuse_maxpool(&f.lidar, &f.camera).unwrap()))
    });
    g.bench_function("pmd_64", |b| {
        b.iter(|| black_box(fuse_pmd(&f.lidar, &f.camera, 0.3).unwrap()))
    });
    let xf = fixture(
        32,
        FusionConfig::CrossAttention {
            heads: 4,
            theta: 0.0,
        },
    );
    g.sample_size(10);
    g.bench_function("cross_attention_32", |b| {
        b.iter(|| black_box(fuse_cross_attention(&xf.lidar, &xf.camera, &xf.params, 4).unwrap()))
    });
    g.finish();
}

fn projection(c: &mut Criterion) {
    let mut g = c.benchmark_group("bev");
    let f = fixture(64, FusionConfig::default());
    g.bench_function("lidar_to_bev_64", |b| {
        b.iter(|| black_box(lidar_to_bev(&f.sample.sweep, &f.cfg.grid, 0).unwrap()))
    });
    g.bench_function("camera_to_bev_64", |b| {
        b.iter(|| black_box(camera_to_bev(&f.sample.stream, &f.cfg.grid, 0).unwrap()))
    });
    g.finish();
}

fn detector_and_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("model");
    g.sample_size(10);
    let f = fixture(64, FusionConfig::default());
    let fused = fuse_average(&f.lidar, &f.camera, 0.5).unwrap();
    g.bench_function("predict_64", |b| {
        b.iter(|| black_box(predict(&fused, &f.params).unwrap()))
    });
    for (name, fusion) in [
        ("train_step_avg_64", FusionConfig::default()),
        (
            "train_step_pmd_64",
            FusionConfig::Pmd {
                schedule: AlphaShape::Linear,
            },
        ),
    ] {
        let f = fixture(64, fusion);
        let projector = BevProjector::new(f.cfg.grid.clone());
        let ctx = StepContext {
            cfg: &f.cfg,
            projector: &projector,
        };
        let regimes = f.cfg.train.schedule(&f.cfg.fusion).regimes();
        let batch: Vec<_> = regimes.iter().map(|&r| (0, &f.sample, r)).collect();
        g.bench_function(name, |b| {
            b.iter_batched(
                || (f.params.clone(), OptState::default()),
                |(mut params, mut opt)| {
                    black_box(train_step(&batch, &mut params, &mut opt, 0, 10, &ctx).unwrap())
                },
                BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

criterion_group!(
    benches,
    tape_kernels,
    fusion_ops,
    projection,
    detector_and_step
);
criterion_main!(benches);
