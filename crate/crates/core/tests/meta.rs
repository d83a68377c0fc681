use keyview::autodiff::{backward, grad, BackwardOptions, ParamSet, Tensor, UpdateOrder};
use keyview::config::RunConfig;
use keyview::geometry::rotation_error;
use keyview::meta::{
    self, episode_seed, few_shot_finetune, finetune, inner_adapt, keypoint_names, meta_train, predict_viewpoints,
    pretrain, replicate_detector, stage_of, stage_weights, AblationSpec, EpisodeTensors, LogRecord, MetaError,
    MetaModel, TrainState,
};
use keyview::model::{self, loss_query, loss_support, Checkpoint, KeypointOutput, Targets};
use keyview::rng::stream;
use keyview::synth::{self, make_episode, make_split, RenderedSample};

fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.conv1_channels = 4;
    c.model.conv2_channels = 4;
    c.model.feature_channels = 3;
    c.model.category_channels = 3;
    c.pretrain.iterations = 2;
    c.pretrain.batch = 2;
    c.meta.shot = 3;
    c.meta.query = 2;
    c.meta.epochs = 2;
    c.meta.decay_epochs = vec![1];
    c.meta.finetune_steps = 3;
    c.data.train_categories = 3;
    c.data.test_categories = 1;
    c
}

fn episode(cfg: &RunConfig, cat: &synth::SyntheticCategory, seed: u64) -> (ParamSet, EpisodeTensors) {
    let fb = model::init_feature_block(&cfg.model, cfg.seed);
    let mut rng = stream(seed, "tests/meta/episode", &[]);
    let ep = make_episode(cat, cfg.meta.shot, cfg.meta.query, &mut rng, &cfg.data).unwrap();
    let t = EpisodeTensors::build(&fb, &ep, cfg, true).unwrap();
    (fb, t)
}

fn three_keypoint_category(cfg: &mut RunConfig) -> synth::SyntheticCategory {
    cfg.data.nc_min = 3;
    cfg.data.nc_max = 3;
    synth::generate_category(0, 77, &cfg.data).unwrap()
}

/// Post-adaptation query loss built from fresh leaves.
fn query_loss(model: &MetaModel, ep: &EpisodeTensors, cfg: &RunConfig) -> (ParamSet, Tensor) {
    let k = ep.keypoints();
    let leaves = model.category_params(k).unwrap();
    let w = stage_weights(&cfg.meta, 2, AblationSpec::default());
    let (adapted, _) =
        inner_adapt(&leaves, &ep.support_x, &ep.support_t, cfg.meta.alpha, &w.support, &cfg.model, cfg.meta.order)
            .unwrap();
    let out = model::head_forward(&ep.query_x, &adapted, &keypoint_names(k), cfg.model.depth_readout).unwrap();
    (leaves, loss_query(&out, &ep.query_t, &w.query, false).unwrap())
}

#[test]
fn replica_average_matches_per_replica_extraction() {
    let mut cfg = tiny();
    let cat = three_keypoint_category(&mut cfg);
    let (_, ep) = episode(&cfg, &cat, 1);
    let model = MetaModel::init(&cfg, None, true).unwrap();
    let w = stage_weights(&cfg.meta, 2, AblationSpec::default());
    let (folded, _) = meta::outer_gradients(&model, &ep, &cfg.meta, &w, &cfg.model).unwrap();
    let k = ep.keypoints();
    assert_eq!(k, 3);
    for suffix in ["w", "b"] {
        // one independent forward/backward per replica
        let per: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                let (leaves, lq) = query_loss(&model, &ep, &cfg);
                let t = leaves.get(&format!("key{i}.{suffix}")).unwrap();
                grad(&lq, &[t], BackwardOptions::default()).unwrap()[0].to_vec()
            })
            .collect();
        let mean: Vec<f64> = (0..per[0].len()).map(|j| per.iter().map(|g| g[j]).sum::<f64>() / k as f64).collect();
        let got = folded.get(&format!("key.{suffix}")).unwrap().values();
        let worst = got.iter().zip(&mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-12, "key.{suffix}: {worst:e}");
        // distinct targets give distinct replica gradients
        assert!(per[0].iter().zip(&per[1]).any(|(a, b)| (a - b).abs() > 1e-9));
    }
    let (leaves, lq) = query_loss(&model, &ep, &cfg);
    let direct = grad(&lq, &[leaves.get("cat.w").unwrap()], BackwardOptions::default()).unwrap();
    assert!(direct[0].max_abs_diff(folded.get("cat.w").unwrap()) <= 1e-12);
}

#[test]
fn single_replica_average_is_identity() {
    let mut cfg = tiny();
    cfg.data.nc_min = 4;
    cfg.data.nc_max = 4;
    let cat = synth::generate_category(0, 78, &cfg.data).unwrap();
    let (_, ep) = episode(&cfg, &cat, 2);
    let model = MetaModel::init(&cfg, None, true).unwrap();
    let (leaves, lq) = query_loss(&model, &ep, &cfg);
    let g = backward(&lq, &leaves).unwrap();
    let folded = model.fold_gradients(&g, 1).unwrap();
    assert!(folded.get("key.w").unwrap().bit_eq(g.get("key0.w").unwrap()));
}

#[test]
fn inner_step_is_sgd_on_support_loss() {
    let mut cfg = tiny();
    let cat = three_keypoint_category(&mut cfg);
    let (_, ep) = episode(&cfg, &cat, 3);
    let model = MetaModel::init(&cfg, None, true).unwrap();
    let leaves = model.category_params(3).unwrap();
    let w = cfg.meta.weights;
    let (adapted, ls) =
        inner_adapt(&leaves, &ep.support_x, &ep.support_t, 0.01, &w, &cfg.model, UpdateOrder::SecondOrder).unwrap();
    let out = model::head_forward(&ep.support_x, &leaves, &keypoint_names(3), cfg.model.depth_readout).unwrap();
    let loss = loss_support(&out, &ep.support_t, &w, false).unwrap();
    assert_eq!(loss.item().unwrap(), ls);
    let g = backward(&loss, &leaves).unwrap();
    for (name, t) in leaves.iter() {
        let a = adapted.get(name).unwrap();
        let step: Vec<f64> = a.values().iter().zip(t.values()).map(|(x, y)| x - y).collect();
        let want: Vec<f64> = g.get(name).unwrap().values().iter().map(|v| -0.01 * v).collect();
        let worst = step.iter().zip(&want).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-12, "{name}: {worst:e}");
    }
    let (same, _) =
        inner_adapt(&leaves, &ep.support_x, &ep.support_t, 0.0, &w, &cfg.model, UpdateOrder::SecondOrder).unwrap();
    for (name, t) in leaves.iter() {
        assert_eq!(same.get(name).unwrap().values(), t.values());
    }
}

#[test]
fn replication_examples() {
    let cfg = tiny();
    let g = model::init_detector(&cfg.model, 1, meta::GENERIC);
    assert!(matches!(replicate_detector(&g, 0), Err(MetaError::Invalid(_))));
    let one = replicate_detector(&g, 1).unwrap();
    assert!(one.get("key0.w").unwrap().bit_eq(g.get("key.w").unwrap()));
    let eight = replicate_detector(&g, 8).unwrap();
    let mut changed = eight.clone();
    changed.set("key3.w", Tensor::zeros(g.get("key.w").unwrap().shape())).unwrap();
    for i in (0..8).filter(|&i| i != 3) {
        assert!(changed.get(&format!("key{i}.w")).unwrap().bit_eq(g.get("key.w").unwrap()));
    }
}

#[test]
fn meta_siamese_off_uses_fixed_heads() {
    let mut cfg = tiny();
    let cat = three_keypoint_category(&mut cfg);
    let (_, ep) = episode(&cfg, &cat, 4);
    let model = MetaModel::init(&cfg, None, false).unwrap();
    assert_eq!(model.max_keypoints(), cfg.meta.fixed_heads);
    let w = stage_weights(&cfg.meta, 2, AblationSpec::default());
    let (g, _) = meta::outer_gradients(&model, &ep, &cfg.meta, &w, &cfg.model).unwrap();
    assert!(g.get("key0.w").unwrap().values().iter().any(|&v| v != 0.0));
    assert!(g.get("key5.w").unwrap().values().iter().all(|&v| v == 0.0));
    assert!(!g.contains("key.w"));
}

fn pretrained(cfg: &RunConfig) -> (synth::Split, meta::Pretrained) {
    let split = make_split(cfg.data.train_categories, cfg.data.test_categories, cfg.seed, &cfg.data).unwrap();
    let pre = pretrain(&split.train, cfg).unwrap();
    (split, pre)
}

fn run(
    cfg: &RunConfig,
    split: &synth::Split,
    pre: &meta::Pretrained,
    stop: Option<u64>,
) -> (TrainState, Vec<LogRecord>) {
    let mut st = TrainState::new(pre, cfg, AblationSpec::default()).unwrap();
    let mut log = Vec::new();
    meta_train(&split.train, cfg, &mut st, stop, |r| log.push(r.clone())).unwrap();
    (st, log)
}

#[test]
fn training_is_deterministic_and_freezes_features() {
    let cfg = tiny();
    let (split, pre) = pretrained(&cfg);
    let (a, la) = run(&cfg, &split, &pre, Some(4));
    let (b, lb) = run(&cfg, &split, &pre, Some(4));
    assert!(a.model.theta.bit_eq(&b.model.theta));
    assert_eq!(la.len(), 4);
    for (x, y) in la.iter().zip(&lb) {
        assert_eq!(LogRecord { wall_time_s: 0.0, ..x.clone() }, LogRecord { wall_time_s: 0.0, ..y.clone() });
    }
    assert!(a.feature_block.bit_eq(&pre.feature_block));
    assert!(!a.model.theta.bit_eq(&TrainState::new(&pre, &cfg, AblationSpec::default()).unwrap().model.theta));
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let cfg = tiny();
    let (split, pre) = pretrained(&cfg);
    let total = meta::total_iterations(&cfg.meta, split.train.len());
    let (full, full_log) = run(&cfg, &split, &pre, None);
    assert_eq!(full.iteration, total);
    let (half, _) = run(&cfg, &split, &pre, Some(total / 2));
    let bytes = half.to_checkpoint(&cfg).to_bytes();
    let mut resumed = TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap(), &cfg).unwrap();
    let mut tail = Vec::new();
    meta_train(&split.train, &cfg, &mut resumed, None, |r| tail.push(r.clone())).unwrap();
    assert_eq!(resumed.to_checkpoint(&cfg).to_bytes(), full.to_checkpoint(&cfg).to_bytes());
    assert_eq!(tail.len() as u64, total - total / 2);
    assert_eq!(tail[0].category_id, full_log[(total / 2) as usize].category_id);
    let mut other = cfg.clone();
    other.meta.alpha = 0.02;
    assert!(TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap(), &other).is_err());
}

#[test]
fn divergence_reports_replay_seed() {
    let mut cfg = tiny();
    let (split, pre) = pretrained(&cfg);
    cfg.meta.divergence_limit = 1e-3;
    let mut st = TrainState::new(&pre, &cfg, AblationSpec::default()).unwrap();
    match meta_train(&split.train, &cfg, &mut st, None, |_| {}) {
        Err(MetaError::Divergence { iteration, episode_seed: s, category_id, .. }) => {
            assert_eq!(iteration, 0);
            assert_eq!(s, episode_seed(cfg.seed, 0));
            assert!(category_id.is_some());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
    assert!(matches!(meta_train(&split.train[..1], &cfg, &mut st, None, |_| {}), Err(MetaError::EmptyTasks)));
}

#[test]
fn schedule() {
    let m = RunConfig::default().meta;
    assert_eq!(stage_of(&m, 0), 1);
    assert_eq!(stage_of(&m, 14), 1);
    assert_eq!(stage_of(&m, 15), 2);
    let s1 = stage_weights(&m, 1, AblationSpec::default());
    assert_eq!((s1.query.l3d, s1.query.ld, s1.query.l2d, s1.query.lcon), (0.0, 0.0, 50.0, 0.5));
    let off = stage_weights(&m, 2, AblationSpec { concentration: false, ..AblationSpec::default() });
    assert_eq!(off.query.lcon, 0.0);
    assert_eq!(meta::learning_rate(&m, 39), 5e-4);
    assert_eq!(meta::learning_rate(&m, 40), 2.5e-4);
    assert_eq!(meta::learning_rate(&m, 59), 1.25e-4);
}

fn label_output(samples: &[&RenderedSample]) -> KeypointOutput {
    let t = Targets::from_samples(samples).unwrap();
    let k = samples[0].num_keypoints();
    KeypointOutput { h: Tensor::full(&[samples.len(), k, 1, 1], 1.0), u: t.u, v: t.v, d: t.d, x: t.x, y: t.y, z: t.z }
}

#[test]
fn oracle_keypoints_recover_rotation() {
    let cfg = RunConfig::default();
    let cat = synth::generate_category(3, 33, &cfg.data).unwrap();
    let samples: Vec<RenderedSample> =
        (0..50).map(|i| synth::draw_sample(&cat, i, i % 2 == 0, &cfg.data).unwrap()).collect();
    let refs: Vec<&RenderedSample> = samples.iter().collect();
    let preds = predict_viewpoints(&label_output(&refs), None, &cfg.data).unwrap();
    for (p, s) in preds.iter().zip(&samples) {
        assert!(!p.flagged);
        assert!(rotation_error(&s.rotation, &p.rotation) < 1e-9);
    }
    // collinear canonical predictions are flagged
    let line: Vec<[f64; 3]> = (0..cat.num_keypoints()).map(|i| [i as f64, 0.0, 0.0]).collect();
    assert!(predict_viewpoints(&label_output(&refs[..1]), Some(&line), &cfg.data).unwrap()[0].flagged);
}

#[test]
fn finetune_descends_and_zero_steps_is_identity() {
    let mut cfg = tiny();
    let cat = three_keypoint_category(&mut cfg);
    let (_, ep) = episode(&cfg, &cat, 5);
    let model = MetaModel::init(&cfg, None, true).unwrap();
    let names = keypoint_names(3);
    let init = model.category_params(3).unwrap();
    let w = cfg.meta.weights;
    let loss_at = |p: &ParamSet| {
        let out = model::head_forward(&ep.support_x, p, &names, cfg.model.depth_readout).unwrap();
        loss_support(&out, &ep.support_t, &w, false).unwrap().item().unwrap()
    };
    let before = loss_at(&init);
    let mut alpha = cfg.meta.alpha;
    let mut halvings = 0;
    while loss_at(&finetune(&init, &names, &ep.support_x, &ep.support_t, 1, alpha, &w, &cfg.model, 1e6).unwrap())
        > before
    {
        alpha /= 2.0;
        halvings += 1;
        assert!(halvings < 30, "no descent");
    }
    let mut c0 = cfg.clone();
    c0.meta.finetune_steps = 0;
    let same = few_shot_finetune(&model, &ep.support_x, &ep.support_t, &c0).unwrap();
    assert!(same.bit_eq(&init.detach()));
    // an untrained model still yields proper rotations
    let out = model::head_forward(&ep.query_x, &init, &names, cfg.model.depth_readout).unwrap();
    for p in predict_viewpoints(&out, None, &cfg.data).unwrap() {
        let m = p.rotation.matrix();
        assert!((m.det() - 1.0).abs() < 1e-9);
    }
}
