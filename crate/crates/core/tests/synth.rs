use std::collections::HashSet;

use keyview::config::DataConfig;
use keyview::geometry::{rotation_error, solve_procrustes, PointSet3D, ProcrustesOptions, Rotation};
use keyview::rng::stream;
use keyview::synth::{
    apply_transform, draw_sample, generate_category, grid_center, haar_angle_cdf, make_episode, make_split, read_dump,
    render_sample, support_set, write_dump, DatasetManifest, ManifestCategory, Transform2D,
};

fn cfg() -> DataConfig {
    DataConfig::default()
}

#[test]
fn category_invariants_over_many_seeds() {
    let c = cfg();
    let mut seen = HashSet::new();
    for seed in 0..1000u64 {
        let cat = generate_category(seed, seed, &c).unwrap();
        let n = cat.num_keypoints();
        assert!((c.nc_min..=c.nc_max).contains(&n));
        assert_eq!(cat.canonical.covariance_rank(1e-9).unwrap(), 3);
        assert!(cat.canonical.points.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
        // connected wireframe
        let mut reach = vec![false; n];
        reach[0] = true;
        for _ in 0..n {
            for &(a, b) in &cat.edges {
                if reach[a] || reach[b] {
                    reach[a] = true;
                    reach[b] = true;
                }
            }
        }
        assert!(reach.iter().all(|&r| r), "seed {seed} wireframe disconnected");
        let key: Vec<u64> = cat.canonical.points.iter().flatten().map(|v| v.to_bits()).collect();
        assert!(seen.insert(key), "seed {seed} duplicates an earlier category");
    }
    assert_eq!(generate_category(5, 17, &c).unwrap(), generate_category(5, 17, &c).unwrap());
}

#[test]
fn identity_render_lands_at_projection() {
    let c = cfg();
    let cat = generate_category(0, 3, &c).unwrap();
    let s = render_sample(&cat, Rotation::IDENTITY, &mut stream(1, "t", &[]), &c).unwrap();
    let center = grid_center(&c);
    for (k, p) in cat.canonical.points.iter().enumerate() {
        assert_eq!(s.uv[k], [center + c.object_scale * p[0], center + c.object_scale * p[1]]);
        assert_eq!(s.depth[k], p[2]);
    }
}

#[test]
fn label_round_trip_and_bounds() {
    let c = cfg();
    let cat = generate_category(1, 8, &c).unwrap();
    let hi = c.heatmap_size as f64 - 1.0;
    for i in 0..200 {
        let s = draw_sample(&cat, i, true, &c).unwrap();
        let obs = s.observed_points(&c);
        for (k, p) in s.canonical.iter().enumerate() {
            let x = s.rotation.apply(p);
            for (o, e) in obs.points[k].iter().zip(&x) {
                assert!((o - e).abs() < 1e-12);
            }
            assert!((0.0..=hi).contains(&s.uv[k][0]) && (0.0..=hi).contains(&s.uv[k][1]));
        }
        assert_eq!(s.image.len(), c.image_size * c.image_size);
        assert!(s.image.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn augmentation_examples() {
    let c = cfg();
    let cat = generate_category(2, 9, &c).unwrap();
    let s = draw_sample(&cat, 4, false, &c).unwrap();
    assert_eq!(apply_transform(&s, &cat, &Transform2D::default(), &c).unwrap(), s);
    let m = Transform2D { mirror: true, ..Default::default() };
    let once = apply_transform(&s, &cat, &m, &c).unwrap();
    assert_ne!(once, s);
    assert_eq!(apply_transform(&once, &cat, &m, &c).unwrap(), s);
    let t = Transform2D { mirror: true, angle: 0.5, shift_px: [2, -1] };
    let a = apply_transform(&s, &cat, &t, &c).unwrap();
    let fit =
        solve_procrustes(&PointSet3D::new(a.canonical.clone()), &a.observed_points(&c), ProcrustesOptions::default())
            .unwrap();
    assert!(rotation_error(&a.rotation, &fit.rotation) < 1e-9);
}

#[test]
fn episodes_have_requested_sizes_and_nest() {
    let c = cfg();
    let cat = generate_category(4, 10, &c).unwrap();
    let e = make_episode(&cat, 10, 3, &mut stream(3, "episode", &[]), &c).unwrap();
    assert_eq!((e.support.len(), e.query.len()), (10, 3));
    let again = make_episode(&cat, 10, 3, &mut stream(3, "episode", &[]), &c).unwrap();
    assert_eq!(e, again);
    let rotations: Vec<_> = e.support.iter().chain(&e.query).map(|s| s.rotation).collect();
    for i in 0..rotations.len() {
        for j in 0..i {
            assert!(rotation_error(&rotations[i], &rotations[j]) > 1e-6);
        }
    }
    let small = make_episode(&cat, 5, 3, &mut stream(3, "episode", &[]), &c).unwrap();
    assert_eq!(small.support[..], e.support[..5]);
    assert_eq!(support_set(&cat, 99, 1, true, &c).unwrap()[..], support_set(&cat, 99, 10, true, &c).unwrap()[..1]);
}

#[test]
fn split_is_disjoint_and_deterministic() {
    let c = cfg();
    let a = make_split(c.train_categories, c.test_categories, 11, &c).unwrap();
    assert_eq!((a.train.len(), a.test.len()), (40, 10));
    let train_ids: HashSet<u64> = a.train.iter().map(|x| x.id).collect();
    assert!(a.test.iter().all(|x| !train_ids.contains(&x.id)));
    assert_eq!(a, make_split(40, 10, 11, &c).unwrap());
    assert_ne!(a.train[0], make_split(40, 10, 12, &c).unwrap().train[0]);
}

#[test]
fn global_label_consistency_and_rotation_coverage() {
    let c = cfg();
    let split = make_split(10, 1, 5, &c).unwrap();
    let mut angles = Vec::new();
    let mut worst: f64 = 0.0;
    for i in 0..10_000u64 {
        let cat = &split.train[(i % 10) as usize];
        let s = draw_sample(cat, i, true, &c).unwrap();
        let fit = solve_procrustes(
            &PointSet3D::new(s.canonical.clone()),
            &s.observed_points(&c),
            ProcrustesOptions::default(),
        )
        .unwrap();
        worst = worst.max(rotation_error(&s.rotation, &fit.rotation));
        angles.push(rotation_error(&Rotation::IDENTITY, &s.rotation));
    }
    assert!(worst < 1e-9, "worst {worst:e}");
    angles.sort_by(f64::total_cmp);
    let n = angles.len() as f64;
    let ks = angles
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let f = haar_angle_cdf(a);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.02, "KS {ks}");
}

#[test]
fn dump_reloads_exactly_and_is_byte_stable() {
    let c = cfg();
    let split = make_split(2, 1, 6, &c).unwrap();
    let samples: Vec<_> = split
        .train
        .iter()
        .chain(&split.test)
        .flat_map(|cat| (0..3).map(move |i| (cat, i)))
        .map(|(cat, i)| draw_sample(cat, i, true, &c).unwrap())
        .collect();
    let manifest = DatasetManifest {
        format_version: 1,
        tool_version: "test".into(),
        config_hash: "abc".into(),
        seed: 6,
        categories: split
            .train
            .iter()
            .map(|x| (x, "train"))
            .chain(split.test.iter().map(|x| (x, "test")))
            .map(|(x, s)| ManifestCategory {
                id: x.id,
                seed: x.seed,
                split: s.into(),
                num_keypoints: x.num_keypoints(),
            })
            .collect(),
        samples_per_category: 3,
        records_file: "samples.bin".into(),
        record_count: samples.len(),
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_dump(a.path(), &manifest, &samples).unwrap();
    write_dump(b.path(), &manifest, &samples).unwrap();
    for f in ["manifest.json", "samples.bin"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    let (m, back) = read_dump(a.path()).unwrap();
    assert_eq!(m, manifest);
    assert_eq!(back, samples);
}
