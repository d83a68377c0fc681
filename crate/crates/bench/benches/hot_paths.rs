use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use keyview::autodiff::backward;
use keyview::geometry::{random_rotation, solve_procrustes, PointSet3D, ProcrustesOptions};
use keyview::meta::{self, AblationSpec, EpisodeTensors, MetaModel};
use keyview::model;
use keyview::rng::stream;
use keyview::synth::{self, draw_sample, generate_category, make_episode};
use keyview::RunConfig;
use rand::Rng;

fn geometry(c: &mut Criterion) {
    let mut rng = stream(1, "bench/procrustes", &[]);
    let pts: Vec<[f64; 3]> = (0..12).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
    let r = random_rotation(&mut rng);
    let canonical = PointSet3D::new(pts.clone());
    let observed = PointSet3D::new(pts.iter().map(|p| r.apply(p)).collect());
    c.bench_function("procrustes_12pts", |b| {
        b.iter(|| solve_procrustes(black_box(&canonical), black_box(&observed), ProcrustesOptions::default()).unwrap())
    });
}

fn data(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let cat = generate_category(0, 3, &cfg.data).unwrap();
    let mut seed = 0u64;
    c.bench_function("render_augmented_sample", |b| {
        b.iter(|| {
            seed += 1;
            draw_sample(&cat, seed, true, &cfg.data).unwrap()
        })
    });
}

fn network(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let fb = model::init_feature_block(&cfg.model, 0);
    let cat = generate_category(0, 3, &cfg.data).unwrap();
    let samples = synth::query_pool(&cat, 1, 8, &cfg.data).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    c.bench_function("feature_block_batch8", |b| b.iter(|| meta::features(&fb, black_box(&refs), &cfg, true).unwrap()));

    let x = meta::features(&fb, &refs, &cfg, true).unwrap();
    let model = MetaModel::init(&cfg, None, true).unwrap();
    let k = cat.num_keypoints();
    let names = meta::keypoint_names(k);
    let t = model::Targets::from_samples(&refs).unwrap();
    c.bench_function("head_forward_backward", |b| {
        b.iter(|| {
            let p = model.category_params(k).unwrap();
            let out = model::head_forward(&x, &p, &names, cfg.model.depth_readout).unwrap();
            let loss = model::loss_support(&out, &t, &cfg.meta.weights, false).unwrap();
            backward(&loss, &p).unwrap()
        })
    });

    let mut rng = stream(2, "bench/episode", &[]);
    let ep = make_episode(&cat, cfg.meta.shot, cfg.meta.query, &mut rng, &cfg.data).unwrap();
    let tensors = EpisodeTensors::build(&fb, &ep, &cfg, true).unwrap();
    let w = meta::stage_weights(&cfg.meta, 2, AblationSpec::default());
    let mut group = c.benchmark_group("meta");
    group.sample_size(20);
    group.bench_function("second_order_outer_step", |b| {
        b.iter(|| meta::outer_gradients(&model, &tensors, &cfg.meta, &w, &cfg.model).unwrap())
    });
    group.finish();
}

criterion_group!(benches, geometry, data, network);
criterion_main!(benches);
