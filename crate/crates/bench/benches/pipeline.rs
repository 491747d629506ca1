use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use popparts_bench::fixture;
use popparts_core::decoder::decode_full;
use popparts_core::encoder::encode;
use popparts_core::loss::{loss_gradients, total_loss};
use popparts_core::pipeline::{run_scene, synth_scene};
use popparts_core::Skeleton;

fn bench_render(c: &mut Criterion) {
    let f = fixture(0);
    c.bench_function("render_scene", |b| b.iter(|| synth_scene(black_box(&f.cfg), 0, 0).unwrap()));
}

fn bench_encode(c: &mut Criterion) {
    let f = fixture(0);
    let k = Skeleton::itop15().k;
    c.bench_function("encode", |b| {
        b.iter(|| encode(black_box(&f.scene.poses), k, black_box(&f.scene.depth), &f.cfg.encoder).unwrap())
    });
}

fn bench_decode(c: &mut Criterion) {
    let f = fixture(0);
    let last = f.pred.final_stage();
    c.bench_function("decode_full", |b| {
        b.iter(|| decode_full(black_box(last), black_box(&f.pred.global), &f.cfg.encoder.anchors, &f.cfg.fusion).unwrap())
    });
}

fn bench_loss(c: &mut Criterion) {
    let f = fixture(0);
    c.bench_function("total_loss", |b| b.iter(|| total_loss(black_box(&f.pred), &f.maps).unwrap()));
    c.bench_function("loss_gradients", |b| b.iter(|| loss_gradients(black_box(&f.pred), &f.maps).unwrap()));
}

fn bench_scene(c: &mut Criterion) {
    let f = fixture(0);
    c.bench_function("run_scene", |b| b.iter(|| run_scene(black_box(&f.cfg), 0, 0).unwrap()));
}

criterion_group!(benches, bench_render, bench_encode, bench_decode, bench_loss, bench_scene);
criterion_main!(benches);
