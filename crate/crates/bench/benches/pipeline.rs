use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};

use segqa_bench::{phantom_fixture, sample_fixture};
use segqa_core::autodiff::{Tape, Tensor};
use segqa_core::distance::signed_distance_transform;
use segqa_core::mesh::{extract_clean_mesh, marching_cubes, CleanupConfig};
use segqa_core::network::{build_spline_graph, init_error_net, predict_logits, ModelConfig};

fn distance(c: &mut Criterion) {
    let (_, _, gt) = phantom_fixture(1).unwrap();
    c.bench_function("sdt_80cubed", |b| b.iter(|| signed_distance_transform(black_box(&gt)).unwrap()));
}

fn meshing(c: &mut Criterion) {
    let (_, sdf, _) = phantom_fixture(1).unwrap();
    c.bench_function("marching_cubes_80cubed", |b| b.iter(|| marching_cubes(black_box(&sdf), 0.0).unwrap()));
    let mut g = c.benchmark_group("cleanup");
    g.sample_size(10);
    g.bench_function("extract_clean_mesh", |b| {
        b.iter(|| extract_clean_mesh(black_box(&sdf), &CleanupConfig::default()).unwrap())
    });
    g.finish();
}

fn network(c: &mut Criterion) {
    let s = sample_fixture(2).unwrap();
    let cfg = ModelConfig::default();
    let graph = Arc::new(build_spline_graph::<f32>(s.num_nodes(), &s.edges, &s.pseudo_coords, 5, 2).unwrap());
    let x = Tensor::full(vec![s.num_nodes(), 32], 0.1f32);
    let w = Tensor::full(vec![125 * 32, 32], 0.01f32);
    c.bench_function("spline_conv_32x32", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            tape.spline_conv(xv, wv, graph.clone()).unwrap()
        })
    });
    let store = init_error_net::<f32>(&cfg, 0).unwrap();
    c.bench_function("error_net_inference", |b| {
        b.iter(|| predict_logits(&store, &cfg, black_box(&s), false).unwrap())
    });
}

criterion_group!(benches, distance, meshing, network);
criterion_main!(benches);
