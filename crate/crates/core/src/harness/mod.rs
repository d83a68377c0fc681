//! Experiment layer: metrics, the models under test, the few-shot evaluation
//! protocol, the non-meta baselines, ablations and shot sweeps.

pub mod metrics;

pub use metrics::{acc30, mean_std, mederr, to_degrees, FLAGGED_ERROR_DEG};

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, FlatParams, ParamSet};
use crate::config::RunConfig;
use crate::geometry::{random_rotation, rotation_error, solve_procrustes, PointSet3D, ProcrustesOptions, Vec3};
use crate::meta::{
    self, few_shot_finetune, finetune, predict_viewpoints, slot_assignment, slot_targets, AblationSpec, MetaError,
    MetaModel, Pretrained, TrainState, ViewPrediction, SLOT_PREFIX, TOOL_VERSION,
};
use crate::model::{self, loss_concentration, Targets};
use crate::rng::{derive_seed, stream};
use crate::synth::{self, query_pool, support_set, RenderedSample, Split, SyntheticCategory};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("empty error list")]
    Empty,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Viewpoints for a batch of query images, plus the mean concentration value
/// of the heatmaps that produced them when the model has any.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub views: Vec<ViewPrediction>,
    pub spread: Option<f64>,
}

/// A model under test: adapts to `support`, then predicts `queries`.
pub trait Predictor {
    fn predict(
        &self,
        category: &SyntheticCategory,
        support: &[RenderedSample],
        queries: &[RenderedSample],
    ) -> Result<Predictions>;
}

/// Builds a predictor inside a worker; tensors are thread-confined.
pub type PredictorFactory<'a> = dyn Fn() -> Result<Box<dyn Predictor>> + Sync + 'a;

fn refs(s: &[RenderedSample]) -> Vec<&RenderedSample> {
    s.iter().collect()
}

/// A diverged adaptation is a failed prediction for every query.
fn adapt_or_fail<T>(
    r: std::result::Result<T, MetaError>,
    queries: usize,
) -> Result<std::result::Result<T, Predictions>> {
    match r {
        Ok(p) => Ok(Ok(p)),
        Err(MetaError::Divergence { .. }) => Ok(Err(Predictions {
            views: vec![ViewPrediction { rotation: crate::geometry::Rotation::IDENTITY, flagged: true }; queries],
            spread: None,
        })),
        Err(e) => Err(e.into()),
    }
}

/// Meta-learned model: replicate, fine-tune on the support, predict.
pub struct MetaPredictor {
    pub feature_block: ParamSet,
    pub model: MetaModel,
    pub kp_on: bool,
    pub cfg: RunConfig,
}

impl Predictor for MetaPredictor {
    fn predict(
        &self,
        _: &SyntheticCategory,
        support: &[RenderedSample],
        queries: &[RenderedSample],
    ) -> Result<Predictions> {
        let s = refs(support);
        let xs = meta::features(&self.feature_block, &s, &self.cfg, self.kp_on)?;
        let p = match adapt_or_fail(
            few_shot_finetune(&self.model, &xs, &Targets::from_samples(&s)?, &self.cfg),
            queries.len(),
        )? {
            Ok(p) => p,
            Err(failed) => return Ok(failed),
        };
        let xq = meta::features(&self.feature_block, &refs(queries), &self.cfg, self.kp_on)?;
        let out = model::head_forward(
            &xq,
            &p,
            &meta::keypoint_names(support[0].num_keypoints()),
            self.cfg.model.depth_readout,
        )?;
        Ok(Predictions {
            views: predict_viewpoints(&out, None, &self.cfg.data)?,
            spread: Some(loss_concentration(&out)?.item()?),
        })
    }
}

/// The non-meta baselines, all built on the pre-trained slot bank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    /// Bank evaluated directly on the novel category.
    ZeroShot,
    /// Bank fine-tuned on the support with the meta model's step count and rate.
    FinetuneNoMeta,
    /// Bank evaluated directly, with Procrustes against the category's points
    /// in slot order instead of the network's canonical readouts.
    Fixed8Keypoints,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] =
        [BaselineKind::ZeroShot, BaselineKind::FinetuneNoMeta, BaselineKind::Fixed8Keypoints];

    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::ZeroShot => "zero-shot",
            BaselineKind::FinetuneNoMeta => "finetune-no-meta",
            BaselineKind::Fixed8Keypoints => "fixed-8-keypoints",
        }
    }
}

impl FromStr for BaselineKind {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            HarnessError::Invalid(format!(
                "unknown baseline `{s}` (expected zero-shot, finetune-no-meta or fixed-8-keypoints)"
            ))
        })
    }
}

pub struct BankPredictor {
    pub feature_block: ParamSet,
    pub bank: ParamSet,
    pub anchors: Vec<Vec3>,
    pub kind: BaselineKind,
    pub cfg: RunConfig,
}

impl Predictor for BankPredictor {
    fn predict(
        &self,
        category: &SyntheticCategory,
        support: &[RenderedSample],
        queries: &[RenderedSample],
    ) -> Result<Predictions> {
        let slots = model::detector_names(SLOT_PREFIX, self.anchors.len());
        let params = match self.kind {
            BaselineKind::FinetuneNoMeta => {
                let s = refs(support);
                let xs = meta::features(&self.feature_block, &s, &self.cfg, true)?;
                let t = slot_targets(&s, &self.anchors)?;
                let mc = &self.cfg.meta;
                let r = finetune(
                    &self.bank,
                    &slots,
                    &xs,
                    &t,
                    mc.finetune_steps,
                    mc.finetune_lr,
                    &mc.weights,
                    &self.cfg.model,
                    mc.divergence_limit,
                );
                match adapt_or_fail(r, queries.len())? {
                    Ok(p) => p,
                    Err(failed) => return Ok(failed),
                }
            }
            _ => self.bank.clone(),
        };
        let xq = meta::features(&self.feature_block, &refs(queries), &self.cfg, true)?;
        let out = model::head_forward(&xq, &params, &slots, self.cfg.model.depth_readout)?;
        let template: Option<Vec<Vec3>> = (self.kind == BaselineKind::Fixed8Keypoints).then(|| {
            let pts = &category.canonical.points;
            slot_assignment(pts, &self.anchors).into_iter().map(|i| pts[i]).collect()
        });
        Ok(Predictions {
            views: predict_viewpoints(&out, template.as_deref(), &self.cfg.data)?,
            spread: Some(loss_concentration(&out)?.item()?),
        })
    }
}

/// Reads the query labels: Procrustes on ground truth.
pub struct OraclePredictor {
    pub cfg: RunConfig,
}

impl Predictor for OraclePredictor {
    fn predict(&self, _: &SyntheticCategory, _: &[RenderedSample], queries: &[RenderedSample]) -> Result<Predictions> {
        let views = queries
            .iter()
            .map(|q| {
                let fit = solve_procrustes(
                    &PointSet3D::new(q.canonical.clone()),
                    &q.observed_points(&self.cfg.data),
                    ProcrustesOptions::default(),
                );
                match fit {
                    Ok(f) => ViewPrediction { rotation: f.rotation, flagged: false },
                    Err(_) => ViewPrediction { rotation: crate::geometry::Rotation::IDENTITY, flagged: true },
                }
            })
            .collect();
        Ok(Predictions { views, spread: None })
    }
}

/// Uniform random rotations, seeded by the queries themselves.
pub struct RandomPredictor {
    pub seed: u64,
}

impl Predictor for RandomPredictor {
    fn predict(
        &self,
        category: &SyntheticCategory,
        support: &[RenderedSample],
        queries: &[RenderedSample],
    ) -> Result<Predictions> {
        let tag = support.first().map_or(0, |s| s.render_seed);
        let mut rng = stream(self.seed, "random-predictor", &[category.id, tag]);
        let views =
            queries.iter().map(|_| ViewPrediction { rotation: random_rotation(&mut rng), flagged: false }).collect();
        Ok(Predictions { views, spread: None })
    }
}

/// One (category, repetition) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub category_id: u64,
    pub repetition: usize,
    pub acc30: f64,
    pub mederr_deg: f64,
    pub n_query: usize,
    pub flagged_count: usize,
    #[serde(skip)]
    pub spread: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub category_id: u64,
    pub acc30: f64,
    pub mederr_deg: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub label: String,
    pub seed: u64,
    pub config_hash: String,
    pub tool_version: String,
    pub shot: usize,
    pub repetitions: usize,
    /// Mean over repetitions of the per-repetition category average, and its
    /// standard deviation across repetitions.
    pub acc30_mean: f64,
    pub acc30_std: f64,
    pub mederr_mean: f64,
    pub mederr_std: f64,
    /// Mean concentration value of the query heatmaps over the rows that
    /// produced heatmaps; diverged fine-tunes have none. `None` if no row did.
    pub spread_mean: Option<f64>,
    pub categories: Vec<CategoryResult>,
    #[serde(skip)]
    pub rows: Vec<EvalRow>,
}

/// Per-category query pools are fixed; support sets depend on (category, repetition).
pub fn pool_seed(seed: u64) -> u64 {
    derive_seed(seed, "eval/pool", &[])
}

pub fn support_seed(seed: u64, category_id: u64, repetition: usize) -> u64 {
    derive_seed(seed, "eval/support", &[category_id, repetition as u64])
}

fn evaluate_category(p: &dyn Predictor, cat: &SyntheticCategory, cfg: &RunConfig) -> Result<Vec<EvalRow>> {
    let pool = query_pool(cat, pool_seed(cfg.seed), cfg.eval.query_pool, &cfg.data)?;
    let mut rows = Vec::with_capacity(cfg.eval.repetitions);
    for r in 0..cfg.eval.repetitions {
        let support = support_set(cat, support_seed(cfg.seed, cat.id, r), cfg.meta.shot, true, &cfg.data)?;
        let preds = p.predict(cat, &support, &pool)?;
        if preds.views.len() != pool.len() {
            return Err(HarnessError::Invalid(format!("{} predictions for {} queries", preds.views.len(), pool.len())));
        }
        let mut flagged = 0;
        let errors: Vec<f64> = preds
            .views
            .iter()
            .zip(&pool)
            .map(|(v, q)| {
                if v.flagged {
                    flagged += 1;
                    Ok(FLAGGED_ERROR_DEG)
                } else {
                    Ok(to_degrees(rotation_error(&q.rotation, &v.rotation)))
                }
            })
            .collect::<Result<_>>()?;
        rows.push(EvalRow {
            category_id: cat.id,
            repetition: r,
            acc30: acc30(&errors)?,
            mederr_deg: mederr(&errors)?,
            n_query: errors.len(),
            flagged_count: flagged,
            spread: preds.spread,
        });
    }
    Ok(rows)
}

/// Runs the protocol over `test` with `cfg.eval.workers` threads. Category
/// results are reduced in category order, so any worker count gives the
/// same result.
pub fn evaluate(
    factory: &PredictorFactory,
    test: &[SyntheticCategory],
    cfg: &RunConfig,
    label: &str,
) -> Result<EvalResult> {
    if test.is_empty() || cfg.eval.repetitions == 0 || cfg.eval.query_pool == 0 {
        return Err(HarnessError::Empty);
    }
    let workers = cfg.eval.workers.clamp(1, test.len());
    let mut per_cat: Vec<Option<Result<Vec<EvalRow>>>> = (0..test.len()).map(|_| None).collect();
    if workers == 1 {
        let p = factory()?;
        for (slot, cat) in per_cat.iter_mut().zip(test) {
            *slot = Some(evaluate_category(p.as_ref(), cat, cfg));
        }
    } else {
        let results: Vec<Vec<(usize, Result<Vec<EvalRow>>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    scope.spawn(move || {
                        let p = match factory() {
                            Ok(p) => p,
                            Err(e) => return vec![(w, Err(e))],
                        };
                        (w..test.len())
                            .step_by(workers)
                            .map(|i| (i, evaluate_category(p.as_ref(), &test[i], cfg)))
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        });
        for (i, r) in results.into_iter().flatten() {
            per_cat[i] = Some(r);
        }
    }
    let mut rows = Vec::new();
    for r in per_cat {
        rows.extend(r.ok_or_else(|| HarnessError::Invalid("missing category result".into()))??);
    }
    Ok(summarize(rows, test, cfg, label))
}

fn summarize(rows: Vec<EvalRow>, test: &[SyntheticCategory], cfg: &RunConfig, label: &str) -> EvalResult {
    let reps = cfg.eval.repetitions;
    let mean = |xs: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = xs.collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let categories = test
        .iter()
        .map(|c| {
            let mine: Vec<&EvalRow> = rows.iter().filter(|r| r.category_id == c.id).collect();
            CategoryResult {
                category_id: c.id,
                acc30: mean(&mut mine.iter().map(|r| r.acc30)),
                mederr_deg: mean(&mut mine.iter().map(|r| r.mederr_deg)),
                samples: mine.iter().map(|r| r.n_query).sum(),
            }
        })
        .collect();
    let per_rep = |f: fn(&EvalRow) -> f64| -> Vec<f64> {
        (0..reps).map(|r| mean(&mut rows.iter().filter(|x| x.repetition == r).map(f))).collect()
    };
    let (acc30_mean, acc30_std) = mean_std(&per_rep(|r| r.acc30));
    let (mederr_mean, mederr_std) = mean_std(&per_rep(|r| r.mederr_deg));
    let spreads: Vec<f64> = rows.iter().filter_map(|r| r.spread).collect();
    EvalResult {
        label: label.to_owned(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        tool_version: TOOL_VERSION.into(),
        shot: cfg.meta.shot,
        repetitions: reps,
        acc30_mean,
        acc30_std,
        mederr_mean,
        mederr_std,
        spread_mean: (!spreads.is_empty()).then(|| spreads.iter().sum::<f64>() / spreads.len() as f64),
        categories,
        rows,
    }
}

impl EvalResult {
    /// Per-(category, repetition) rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

/// Factory for the meta-learned model held in `state`.
pub fn meta_factory<'a>(state: &TrainState, cfg: &'a RunConfig) -> impl Fn() -> Result<Box<dyn Predictor>> + Sync + 'a {
    let fb = state.feature_block.to_flat();
    let theta = state.model.theta.to_flat();
    let ms = state.model.meta_siamese;
    let kp_on = state.ablation.general_keypoint;
    move || -> Result<Box<dyn Predictor>> {
        Ok(Box::new(MetaPredictor {
            feature_block: fb.to_params()?,
            model: MetaModel { theta: theta.to_params()?, meta_siamese: ms },
            kp_on,
            cfg: cfg.clone(),
        }))
    }
}

/// Factory for a baseline built on a pre-trained bank.
pub fn bank_factory<'a>(
    feature_block: &ParamSet,
    bank: &ParamSet,
    anchors: &[Vec3],
    kind: BaselineKind,
    cfg: &'a RunConfig,
) -> impl Fn() -> Result<Box<dyn Predictor>> + Sync + 'a {
    let fb: FlatParams = feature_block.to_flat();
    let bank: FlatParams = bank.to_flat();
    let anchors = anchors.to_vec();
    move || -> Result<Box<dyn Predictor>> {
        Ok(Box::new(BankPredictor {
            feature_block: fb.to_params()?,
            bank: bank.to_params()?,
            anchors: anchors.clone(),
            kind,
            cfg: cfg.clone(),
        }))
    }
}

pub fn run_baseline(
    kind: BaselineKind,
    pre: &Pretrained,
    test: &[SyntheticCategory],
    cfg: &RunConfig,
) -> Result<EvalResult> {
    let f = bank_factory(&pre.feature_block, &pre.bank, &pre.anchors, kind, cfg);
    evaluate(&f, test, cfg, kind.name())
}

/// Meta-trains under `spec` from the shared pre-training and evaluates.
pub fn run_ablation(
    spec: AblationSpec,
    split: &Split,
    pre: &Pretrained,
    cfg: &RunConfig,
) -> Result<(TrainState, EvalResult)> {
    let mut state = TrainState::new(pre, cfg, spec)?;
    meta::meta_train(&split.train, cfg, &mut state, None, |_| {})?;
    let result = evaluate(&meta_factory(&state, cfg), &split.test, cfg, &spec.label())?;
    Ok((state, result))
}

/// One meta-train + evaluate per shot value, all other settings and seeds matched.
pub fn shot_sweep(shots: &[usize], split: &Split, pre: &Pretrained, cfg: &RunConfig) -> Result<Vec<EvalResult>> {
    if shots.is_empty() || shots.contains(&0) {
        return Err(HarnessError::Invalid(format!("invalid shot list {shots:?}")));
    }
    shots
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.meta.shot = s;
            let (_, mut r) = run_ablation(AblationSpec::default(), split, pre, &c)?;
            r.label = format!("shot-{s}");
            Ok(r)
        })
        .collect()
}
