use keyview::config::RunConfig;
use keyview::geometry::Rotation;
use keyview::harness::{
    self, evaluate, run_ablation, run_baseline, BaselineKind, HarnessError, OraclePredictor, Predictions, Predictor,
    RandomPredictor, FLAGGED_ERROR_DEG,
};
use keyview::meta::{meta_train, pretrain, AblationSpec, TrainState, ViewPrediction, TOOL_VERSION};
use keyview::synth::{make_split, RenderedSample, SyntheticCategory};

fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.conv1_channels = 4;
    c.model.conv2_channels = 4;
    c.model.feature_channels = 3;
    c.model.category_channels = 3;
    c.pretrain.iterations = 3;
    c.pretrain.batch = 2;
    c.meta.shot = 3;
    c.meta.query = 2;
    c.meta.epochs = 2;
    c.meta.decay_epochs = vec![1];
    c.meta.finetune_steps = 2;
    c.data.train_categories = 3;
    c.data.test_categories = 3;
    c.eval.repetitions = 2;
    c.eval.query_pool = 4;
    c
}

fn test_categories(cfg: &RunConfig) -> Vec<SyntheticCategory> {
    make_split(cfg.data.train_categories, cfg.data.test_categories, cfg.seed, &cfg.data).unwrap().test
}

struct AlwaysFlagged;

impl Predictor for AlwaysFlagged {
    fn predict(
        &self,
        _: &SyntheticCategory,
        _: &[RenderedSample],
        q: &[RenderedSample],
    ) -> harness::Result<Predictions> {
        Ok(Predictions {
            views: vec![ViewPrediction { rotation: Rotation::IDENTITY, flagged: true }; q.len()],
            spread: None,
        })
    }
}

/// Flags every query of the first category; elsewhere exact with spread 2.
struct PartlyDiverged {
    oracle: OraclePredictor,
    first: u64,
}

impl Predictor for PartlyDiverged {
    fn predict(
        &self,
        cat: &SyntheticCategory,
        s: &[RenderedSample],
        q: &[RenderedSample],
    ) -> harness::Result<Predictions> {
        if cat.id == self.first {
            return AlwaysFlagged.predict(cat, s, q);
        }
        Ok(Predictions { spread: Some(2.0), ..self.oracle.predict(cat, s, q)? })
    }
}

struct WrongCount;

impl Predictor for WrongCount {
    fn predict(
        &self,
        _: &SyntheticCategory,
        _: &[RenderedSample],
        _: &[RenderedSample],
    ) -> harness::Result<Predictions> {
        Ok(Predictions { views: vec![], spread: None })
    }
}

#[test]
fn oracle_scores_perfectly() {
    let cfg = tiny();
    let test = test_categories(&cfg);
    let f = || -> harness::Result<Box<dyn Predictor>> { Ok(Box::new(OraclePredictor { cfg: tiny() })) };
    let r = evaluate(&f, &test, &cfg, "oracle").unwrap();
    assert_eq!(r.acc30_mean, 1.0);
    assert_eq!(r.acc30_std, 0.0);
    assert!(r.mederr_mean < 1e-6, "{}", r.mederr_mean);
    assert_eq!(r.rows.len(), test.len() * cfg.eval.repetitions);
    assert!(r.rows.iter().all(|row| row.flagged_count == 0 && row.n_query == cfg.eval.query_pool));
    assert_eq!(r.categories.iter().map(|c| c.samples).sum::<usize>(), test.len() * 2 * 4);
}

#[test]
fn flagged_predictions_cost_the_maximum() {
    let cfg = tiny();
    let test = test_categories(&cfg);
    let f = || -> harness::Result<Box<dyn Predictor>> { Ok(Box::new(AlwaysFlagged)) };
    let r = evaluate(&f, &test, &cfg, "flagged").unwrap();
    assert_eq!(r.acc30_mean, 0.0);
    assert_eq!(r.mederr_mean, FLAGGED_ERROR_DEG);
    assert!(r.rows.iter().all(|row| row.flagged_count == row.n_query));
    assert_eq!(r.spread_mean, None);
    // spread averages only over rows that produced heatmaps
    let first = test[0].id;
    let f = || -> harness::Result<Box<dyn Predictor>> {
        Ok(Box::new(PartlyDiverged { oracle: OraclePredictor { cfg: tiny() }, first }))
    };
    let r = evaluate(&f, &test, &cfg, "partly").unwrap();
    assert_eq!(r.spread_mean, Some(2.0));
    assert!((r.acc30_mean - (test.len() - 1) as f64 / test.len() as f64).abs() < 1e-12);
    let f = || -> harness::Result<Box<dyn Predictor>> { Ok(Box::new(WrongCount)) };
    assert!(matches!(evaluate(&f, &test, &cfg, "bad"), Err(HarnessError::Invalid(_))));
    assert!(matches!(evaluate(&f, &[], &cfg, "bad"), Err(HarnessError::Empty)));
}

#[test]
fn random_predictor_matches_uniform_rotation_statistics() {
    let mut cfg = tiny();
    cfg.eval.query_pool = 100;
    cfg.eval.repetitions = 4;
    let test = make_split(1, 6, 3, &cfg.data).unwrap().test;
    let f = || -> harness::Result<Box<dyn Predictor>> { Ok(Box::new(RandomPredictor { seed: 11 })) };
    let r = evaluate(&f, &test, &cfg, "random").unwrap();
    // (θ - sin θ)/π at 30° and the median of the same density; 2400 draws
    let p = (30f64.to_radians() - 30f64.to_radians().sin()) / std::f64::consts::PI;
    assert!((r.acc30_mean - p).abs() < 0.01, "{}", r.acc30_mean);
    assert!((r.mederr_mean - 132.35).abs() < 5.0, "{}", r.mederr_mean);
}

#[test]
fn worker_count_does_not_change_results() {
    let mut cfg = tiny();
    let test = test_categories(&cfg);
    let f = || -> harness::Result<Box<dyn Predictor>> { Ok(Box::new(RandomPredictor { seed: 5 })) };
    let one = evaluate(&f, &test, &cfg, "random").unwrap();
    cfg.eval.workers = 3;
    let three = evaluate(&f, &test, &cfg, "random").unwrap();
    cfg.eval.workers = 2;
    let two = evaluate(&f, &test, &cfg, "random").unwrap();
    assert_eq!(one.rows, three.rows);
    assert_eq!(one.rows, two.rows);
    assert_eq!(one.acc30_mean.to_bits(), two.acc30_mean.to_bits());
    assert_eq!(one.mederr_std.to_bits(), three.mederr_std.to_bits());
}

#[test]
fn outputs_carry_run_metadata() {
    let cfg = tiny();
    let test = test_categories(&cfg);
    let f = || -> harness::Result<Box<dyn Predictor>> { Ok(Box::new(RandomPredictor { seed: 1 })) };
    let r = evaluate(&f, &test, &cfg, "random").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("out/rows.csv");
    let json_path = dir.path().join("out/summary.json");
    r.write_csv(&csv_path).unwrap();
    r.write_summary(&json_path).unwrap();
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "category_id,repetition,acc30,mederr_deg,n_query,flagged_count");
    assert_eq!(lines.count(), test.len() * cfg.eval.repetitions);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
    assert_eq!(json["seed"], cfg.seed);
    assert_eq!(json["config_hash"], cfg.hash());
    assert_eq!(json["tool_version"], TOOL_VERSION);
    assert_eq!(json["label"], "random");
    assert_eq!(json["categories"].as_array().unwrap().len(), test.len());
}

#[test]
fn baseline_names_round_trip() {
    for k in BaselineKind::ALL {
        assert_eq!(k.name().parse::<BaselineKind>().unwrap(), k);
    }
    assert!(matches!("fixed-9-keypoints".parse::<BaselineKind>(), Err(HarnessError::Invalid(_))));
}

#[test]
fn baselines_and_ablation_runs() {
    let cfg = tiny();
    let split = make_split(cfg.data.train_categories, cfg.data.test_categories, cfg.seed, &cfg.data).unwrap();
    let pre = pretrain(&split.train, &cfg).unwrap();
    for k in BaselineKind::ALL {
        let r = run_baseline(k, &pre, &split.test, &cfg).unwrap();
        assert_eq!(r.label, k.name());
        assert!((0.0..=1.0).contains(&r.acc30_mean));
        assert!((0.0..=180.0).contains(&r.mederr_mean));
        assert!(r.spread_mean.is_some());
    }
    // a diverged fine-tune is charged as flagged, not an aborted run
    let mut strict = cfg.clone();
    strict.meta.divergence_limit = 1e-12;
    let r = run_baseline(BaselineKind::FinetuneNoMeta, &pre, &split.test, &strict).unwrap();
    assert!(r.rows.iter().all(|row| row.flagged_count == row.n_query));

    // the all-on ablation is the plain meta-trained model
    let (state, ablated) = run_ablation(AblationSpec::default(), &split, &pre, &cfg).unwrap();
    let mut plain = TrainState::new(&pre, &cfg, AblationSpec::default()).unwrap();
    meta_train(&split.train, &cfg, &mut plain, None, |_| {}).unwrap();
    assert!(plain.model.theta.bit_eq(&state.model.theta));
    let f = harness::meta_factory(&plain, &cfg);
    let direct = evaluate(&f, &split.test, &cfg, &AblationSpec::default().label()).unwrap();
    assert_eq!(direct, ablated);
    assert_eq!(ablated.label, "ms-on_lcon-on_kp-on");

    let sweep = harness::shot_sweep(&[1, 3], &split, &pre, &cfg).unwrap();
    assert_eq!(sweep.iter().map(|r| r.shot).collect::<Vec<_>>(), vec![1, 3]);
    assert_eq!(sweep[1].acc30_mean.to_bits(), ablated.acc30_mean.to_bits());
    assert!(harness::shot_sweep(&[0], &split, &pre, &cfg).is_err());
}
