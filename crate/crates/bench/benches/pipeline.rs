use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use vanishnet::candle_core::{DType, Device, Tensor};
use vanishnet::config::desk_model;
use vanishnet::data::{gaussian_target, grid_target, synth_dataset, SynthConfig};
use vanishnet::evaluation::{histogram, norm_dist};
use vanishnet::nn::depthwise_conv2d;
use vanishnet::{decode, GridPrediction, Point, Scale, VpNet};

fn decode_grid(c: &mut Criterion) {
    let mut pred = GridPrediction::filled(160, 160, -3.0, 0.2);
    pred.confidence[160 * 80 + 40] = 4.0;
    c.bench_function("decode_160x160", |b| b.iter(|| decode(black_box(&pred), 2.0).unwrap()));
}

fn targets(c: &mut Criterion) {
    let vp = Point::new(131.7, 97.2);
    c.bench_function("gaussian_target_half_320", |b| {
        b.iter(|| gaussian_target(black_box(vp), Scale::Half, 320, 3.0).unwrap())
    });
    c.bench_function("grid_target", |b| b.iter(|| grid_target(black_box(vp), 2.0, 320).unwrap()));
}

fn metric(c: &mut Criterion) {
    let raws: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.618_033_988_75).fract()).collect();
    c.bench_function("norm_dist_1000", |b| {
        b.iter(|| {
            raws.iter()
                .map(|&r| norm_dist(Point::new(0.0, 0.0), Point::new(r * 400.0, r * 300.0), 320.0, 240.0).unwrap().0)
                .sum::<f64>()
        })
    });
    c.bench_function("histogram_1000", |b| b.iter(|| histogram(black_box(raws.iter().copied()))));
}

fn depthwise(c: &mut Criterion) {
    let dev = Device::Cpu;
    let mut group = c.benchmark_group("depthwise_3x3");
    for &n in &[16usize, 48] {
        let x = Tensor::randn(0f32, 1.0, (1, n, 40, 40), &dev).unwrap();
        let k = Tensor::randn(0f32, 1.0, (n, 1, 3, 3), &dev).unwrap();
        group.bench_with_input(BenchmarkId::new("custom", n), &n, |b, _| {
            b.iter(|| depthwise_conv2d(&x, &k, 1, 1).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("grouped_conv", n), &n, |b, _| {
            b.iter(|| x.conv2d(&k, 1, 1, 1, n).unwrap())
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let net = VpNet::seeded(&desk_model(), DType::F32, 0).unwrap();
    let s = net.config().input_size();
    let x = Tensor::zeros((1, 3, s, s), DType::F32, &Device::Cpu).unwrap();
    c.bench_function("desk_forward_eval", |b| b.iter(|| net.forward_t(&x, false).unwrap()));
}

fn synth(c: &mut Criterion) {
    c.bench_function("synth_8", |b| b.iter(|| synth_dataset(8, black_box(1), SynthConfig::default()).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = decode_grid, targets, metric, depthwise, forward, synth
}
criterion_main!(benches);
