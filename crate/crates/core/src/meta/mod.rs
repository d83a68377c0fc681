//! Meta-Siamese MAML: detector replication, the differentiable inner step,
//! replica-averaged outer updates, the two-stage schedule, and the few-shot
//! fine-tune / predict path.

mod adam;
pub mod pretrain;

pub use adam::Adam;
pub use pretrain::{learn_anchors, pretrain, slot_assignment, slot_targets, Pretrained, SLOT_PREFIX};

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    backward, backward_through_update, backward_with, AutodiffError, BackwardOptions, FlatParams, ParamSet, Tensor,
    UpdateOrder,
};
use crate::config::{DataConfig, LossWeights, MetaConfig, ModelConfig, RunConfig};
use crate::geometry::{solve_procrustes, OrthoCamera, PointSet3D, ProcrustesOptions, Rotation, Vec3};
use crate::model::{self, loss_query, loss_support, Checkpoint, CheckpointHeader, KeypointOutput, Targets};
use crate::rng::{derive_seed, stream};
use crate::synth::{self, make_episode, RenderedSample, SyntheticCategory};

pub const GENERIC: &str = "key";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum MetaError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error(transparent)]
    Checkpoint(#[from] model::CheckpointError),
    #[error("no training categories")]
    EmptyTasks,
    #[error("divergence at iteration {iteration} (loss {loss}); replay with episode seed {episode_seed}")]
    Divergence { iteration: u64, loss: f64, episode_seed: u64, category_id: Option<u64> },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, MetaError>;

pub(crate) fn check_loss(
    value: f64,
    limit: f64,
    iteration: u64,
    episode_seed: u64,
    category_id: Option<u64>,
) -> Result<()> {
    if !value.is_finite() || value > limit {
        return Err(MetaError::Divergence { iteration, loss: value, episode_seed, category_id });
    }
    Ok(())
}

/// Component toggles for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub meta_siamese: bool,
    pub concentration: bool,
    pub general_keypoint: bool,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec { meta_siamese: true, concentration: true, general_keypoint: true }
    }
}

impl AblationSpec {
    pub fn label(&self) -> String {
        let flag = |b: bool| if b { "on" } else { "off" };
        format!("ms-{}_lcon-{}_kp-{}", flag(self.meta_siamese), flag(self.concentration), flag(self.general_keypoint))
    }

    fn to_tensor(self) -> (String, Vec<usize>, Vec<f64>) {
        let b = |x: bool| if x { 1.0 } else { 0.0 };
        ("ablation".into(), vec![3], vec![b(self.meta_siamese), b(self.concentration), b(self.general_keypoint)])
    }
}

/// Meta-learned parameters: `cat.*` plus either the generic `key.*`
/// (meta-Siamese) or independent heads `key0.* ..` (meta-Siamese off).
#[derive(Clone, Debug)]
pub struct MetaModel {
    pub theta: ParamSet,
    pub meta_siamese: bool,
}

/// `n` value-identical, independently tracked copies of the generic detector.
pub fn replicate_detector(generic: &ParamSet, n: usize) -> Result<ParamSet> {
    if n == 0 {
        return Err(MetaError::Invalid("cannot replicate a detector zero times".into()));
    }
    Ok(model::replicate(generic, GENERIC, n)?)
}

impl MetaModel {
    /// Fresh detectors; `cat.*` starts from `category` when given.
    pub fn init(cfg: &RunConfig, category: Option<&ParamSet>, meta_siamese: bool) -> Result<MetaModel> {
        let seed = derive_seed(cfg.seed, "meta/init", &[]);
        let mut theta = match category {
            Some(c) => c.filter_prefix("cat.").detach(),
            None => model::init_category(&cfg.model, seed),
        };
        if meta_siamese {
            theta.extend(&model::init_detector(&cfg.model, seed, GENERIC))?;
        } else {
            for name in model::detector_names(GENERIC, cfg.meta.fixed_heads) {
                theta.extend(&model::init_detector(&cfg.model, seed, &name))?;
            }
        }
        Ok(MetaModel { theta: theta.to_leaves(), meta_siamese })
    }

    /// Heads available to a category.
    pub fn max_keypoints(&self) -> usize {
        if self.meta_siamese {
            usize::MAX
        } else {
            self.theta.names().filter(|n| n.ends_with(".w") && n.starts_with(GENERIC) && *n != "key.w").count()
        }
    }

    /// θ̃ for a `k`-keypoint category as fresh tracked leaves: `cat.*` and `key0 .. key{k-1}`.
    pub fn category_params(&self, k: usize) -> Result<ParamSet> {
        let mut p = self.theta.filter_prefix("cat.").to_leaves();
        if self.meta_siamese {
            p.extend(&replicate_detector(&self.theta, k)?)?;
        } else {
            if k > self.max_keypoints() {
                return Err(MetaError::Invalid(format!("{k} keypoints but only {} heads", self.max_keypoints())));
            }
            for name in model::detector_names(GENERIC, k) {
                p.extend(&self.theta.filter_prefix(&format!("{name}.")).to_leaves())?;
            }
        }
        Ok(p)
    }

    /// Maps gradients of θ̃ back onto `theta`: replica gradients are averaged
    /// into the generic detector; unused independent heads get zeros.
    pub fn fold_gradients(&self, g: &ParamSet, k: usize) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, t) in self.theta.iter() {
            let grad = if name.starts_with("cat.") {
                g.get(name)?.detach()
            } else if self.meta_siamese {
                let suffix = name.strip_prefix("key.").ok_or_else(|| AutodiffError::UnknownParam(name.into()))?;
                average_replicas(g, k, suffix)?
            } else if g.contains(name) {
                g.get(name)?.detach()
            } else {
                Tensor::zeros(t.shape())
            };
            out.insert(name, grad)?;
        }
        Ok(out)
    }
}

/// Mean of `key{i}.{suffix}` over the `k` replicas.
pub fn average_replicas(g: &ParamSet, k: usize, suffix: &str) -> Result<Tensor> {
    let first = g.get(&format!("key0.{suffix}"))?;
    let mut acc = first.to_vec();
    for i in 1..k {
        let t = g.get(&format!("key{i}.{suffix}"))?;
        if t.shape() != first.shape() {
            return Err(MetaError::Invalid(format!("replica {i} shape {:?} vs {:?}", t.shape(), first.shape())));
        }
        acc.iter_mut().zip(t.values()).for_each(|(a, b)| *a += b);
    }
    acc.iter_mut().for_each(|a| *a /= k as f64);
    Ok(Tensor::new(first.shape(), acc)?)
}

/// Frozen-block features for a set of samples.
pub fn features(fb: &ParamSet, samples: &[&RenderedSample], cfg: &RunConfig, kp_on: bool) -> Result<Tensor> {
    let images = model::image_batch(samples.iter().map(|s| s.image.as_slice()), cfg.data.image_size)?;
    Ok(model::extract_features(fb, &images, &cfg.model, kp_on)?)
}

/// Network inputs and labels of one episode.
#[derive(Clone, Debug)]
pub struct EpisodeTensors {
    pub support_x: Tensor,
    pub support_t: Targets,
    pub query_x: Tensor,
    pub query_t: Targets,
}

impl EpisodeTensors {
    pub fn build(fb: &ParamSet, ep: &synth::Episode, cfg: &RunConfig, kp_on: bool) -> Result<EpisodeTensors> {
        let s: Vec<&RenderedSample> = ep.support.iter().collect();
        let q: Vec<&RenderedSample> = ep.query.iter().collect();
        Ok(EpisodeTensors {
            support_x: features(fb, &s, cfg, kp_on)?,
            support_t: Targets::from_samples(&s)?,
            query_x: features(fb, &q, cfg, kp_on)?,
            query_t: Targets::from_samples(&q)?,
        })
    }

    pub fn keypoints(&self) -> usize {
        self.support_t.shape()[1]
    }
}

/// Loss weights of one meta-training stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageWeights {
    pub support: LossWeights,
    pub query: LossWeights,
}

/// Stage 1 covers the first `round(stage1_fraction · epochs)` epochs.
pub fn stage_of(meta: &MetaConfig, epoch: usize) -> u8 {
    let stage1 = (meta.stage1_fraction * meta.epochs as f64).round() as usize;
    if epoch < stage1 {
        1
    } else {
        2
    }
}

pub fn stage_weights(meta: &MetaConfig, stage: u8, ablation: AblationSpec) -> StageWeights {
    let mut w = meta.weights;
    if !ablation.concentration {
        w.lcon = 0.0;
    }
    if stage == 1 {
        w.l3d = 0.0;
        w.ld = 0.0;
    }
    StageWeights { support: w, query: w }
}

/// Outer rate after step decay.
pub fn learning_rate(meta: &MetaConfig, epoch: usize) -> f64 {
    let drops = meta.decay_epochs.iter().filter(|&&e| epoch >= e).count();
    meta.outer_lr * meta.decay_factor.powi(drops as i32)
}

pub fn total_iterations(meta: &MetaConfig, num_train: usize) -> u64 {
    (meta.epochs * num_train) as u64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub support: f64,
    pub query: f64,
}

/// One SGD step `θ̃′ = θ̃ − α∇L^s`, recorded for the outer backward when
/// `order` is second order.
pub fn inner_adapt(
    params: &ParamSet,
    x: &Tensor,
    t: &Targets,
    alpha: f64,
    w: &LossWeights,
    model_cfg: &ModelConfig,
    order: UpdateOrder,
) -> Result<(ParamSet, f64)> {
    let names = model::detector_names(GENERIC, t.shape()[1]);
    let out = model::head_forward(x, params, &names, model_cfg.depth_readout)?;
    let ls = loss_support(&out, t, w, model_cfg.unsquared_l2)?;
    let opts = match order {
        UpdateOrder::SecondOrder => BackwardOptions::HIGHER_ORDER,
        UpdateOrder::FirstOrder => BackwardOptions::default(),
    };
    let g = backward_with(&ls, params, opts)?;
    Ok((params.sgd_step(&g, alpha)?, ls.item()?))
}

/// Meta-gradient of the post-adaptation query loss with respect to θ̃, and
/// the losses seen on the way.
pub fn replica_gradients(
    model: &MetaModel,
    ep: &EpisodeTensors,
    meta: &MetaConfig,
    weights: &StageWeights,
    model_cfg: &ModelConfig,
) -> Result<(ParamSet, ParamSet, StepLosses)> {
    let k = ep.keypoints();
    let leaves = model.category_params(k)?;
    let (adapted, ls) =
        inner_adapt(&leaves, &ep.support_x, &ep.support_t, meta.alpha, &weights.support, model_cfg, meta.order)?;
    let names = model::detector_names(GENERIC, k);
    let out = model::head_forward(&ep.query_x, &adapted, &names, model_cfg.depth_readout)?;
    let lq = loss_query(&out, &ep.query_t, &weights.query, model_cfg.unsquared_l2)?;
    let lq_value = lq.item()?;
    let g = backward_through_update(&lq, &leaves, meta.order)?;
    Ok((leaves, g, StepLosses { support: ls, query: lq_value }))
}

/// Gradients aligned with `model.theta` (θ_cat direct, θ_key replica-averaged).
pub fn outer_gradients(
    model: &MetaModel,
    ep: &EpisodeTensors,
    meta: &MetaConfig,
    weights: &StageWeights,
    model_cfg: &ModelConfig,
) -> Result<(ParamSet, StepLosses)> {
    let (_, g, losses) = replica_gradients(model, ep, meta, weights, model_cfg)?;
    Ok((model.fold_gradients(&g, ep.keypoints())?, losses))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub stage: u8,
    pub category_id: u64,
    pub support_loss: f64,
    pub query_loss: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

/// Everything needed to continue meta-training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub feature_block: ParamSet,
    pub bank: Option<(ParamSet, Vec<Vec3>)>,
    pub model: MetaModel,
    pub adam: Adam,
    pub ablation: AblationSpec,
    /// Iterations completed.
    pub iteration: u64,
}

impl TrainState {
    pub fn new(pre: &Pretrained, cfg: &RunConfig, ablation: AblationSpec) -> Result<TrainState> {
        let model = MetaModel::init(cfg, Some(&pre.bank), ablation.meta_siamese)?;
        let adam = Adam::new(&model.theta, cfg.meta.beta1, cfg.meta.beta2, cfg.meta.adam_eps);
        Ok(TrainState {
            feature_block: pre.feature_block.clone(),
            bank: Some((pre.bank.clone(), pre.anchors.clone())),
            model,
            adam,
            ablation,
            iteration: 0,
        })
    }

    pub fn to_checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        let mut entries = Vec::new();
        let mut section = |prefix: &str, f: FlatParams| {
            entries.extend(f.entries.into_iter().map(|(n, s, v)| (format!("{prefix}{n}"), s, v)));
        };
        section("fb/", self.feature_block.to_flat());
        if let Some((bank, anchors)) = &self.bank {
            section("bank/", bank.to_flat());
            let flat: Vec<f64> = anchors.iter().flatten().copied().collect();
            section("anchors/", FlatParams { entries: vec![("slots".into(), vec![anchors.len(), 3], flat)] });
        }
        section("theta/", self.model.theta.to_flat());
        let (m, v) = self.adam.moments();
        section("adam.m/", m.clone());
        section("adam.v/", v.clone());
        section("", FlatParams { entries: vec![self.ablation.to_tensor()] });
        Checkpoint {
            header: CheckpointHeader {
                seed: cfg.seed,
                iteration: self.iteration,
                config_hash: cfg.hash(),
                tool_version: TOOL_VERSION.into(),
            },
            tensors: FlatParams { entries },
        }
    }

    /// Rebuilds the state; fails when the checkpoint was made under another config.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<TrainState> {
        if ckpt.header.config_hash != cfg.hash() {
            return Err(MetaError::Invalid(format!(
                "checkpoint config hash {} does not match config {}",
                ckpt.header.config_hash,
                cfg.hash()
            )));
        }
        let ablation = ckpt
            .tensors
            .entries
            .iter()
            .find(|(n, _, _)| n == "ablation")
            .map(|(_, _, v)| AblationSpec {
                meta_siamese: v[0] != 0.0,
                concentration: v[1] != 0.0,
                general_keypoint: v[2] != 0.0,
            })
            .ok_or_else(|| MetaError::Invalid("checkpoint lacks ablation flags".into()))?;
        let theta = ckpt.section("theta/").to_params()?.to_leaves();
        let bank = ckpt.section("bank/");
        let bank = if bank.entries.is_empty() {
            None
        } else {
            let a = ckpt.section("anchors/");
            let flat = a.entries.first().map(|e| e.2.clone()).unwrap_or_default();
            Some((bank.to_params()?, flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()))
        };
        let adam = Adam::from_state(
            ckpt.section("adam.m/"),
            ckpt.section("adam.v/"),
            ckpt.header.iteration,
            cfg.meta.beta1,
            cfg.meta.beta2,
            cfg.meta.adam_eps,
        )?;
        Ok(TrainState {
            feature_block: ckpt.section("fb/").to_params()?,
            bank,
            model: MetaModel { meta_siamese: theta.contains("key.w"), theta },
            adam,
            ablation,
            iteration: ckpt.header.iteration,
        })
    }
}

/// Seed of the episode drawn at `iteration`; enough to replay it.
pub fn episode_seed(seed: u64, iteration: u64) -> u64 {
    derive_seed(seed, "meta/episode", &[iteration])
}

/// Runs meta-training from `state.iteration` until the schedule ends or
/// `stop_after` iterations have completed in total.
pub fn meta_train(
    train: &[SyntheticCategory],
    cfg: &RunConfig,
    state: &mut TrainState,
    stop_after: Option<u64>,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<()> {
    if train.len() < 2 {
        return Err(MetaError::EmptyTasks);
    }
    let meta = &cfg.meta;
    let total = total_iterations(meta, train.len());
    let end = stop_after.map_or(total, |s| s.min(total));
    let clock = Instant::now();
    while state.iteration < end {
        let it = state.iteration;
        let epoch = (it / train.len() as u64) as usize;
        let stage = stage_of(meta, epoch);
        let lr = learning_rate(meta, epoch);
        let seed = episode_seed(cfg.seed, it);
        let mut rng = stream(seed, "episode", &[]);
        let cat = &train[rng.random_range(0..train.len())];
        let ep = make_episode(cat, meta.shot, meta.query, &mut rng, &cfg.data)?;
        let tensors = EpisodeTensors::build(&state.feature_block, &ep, cfg, state.ablation.general_keypoint)?;
        let weights = stage_weights(meta, stage, state.ablation);
        let (grads, losses) = outer_gradients(&state.model, &tensors, meta, &weights, &cfg.model)?;
        for l in [losses.support, losses.query] {
            check_loss(l, meta.divergence_limit, it, seed, Some(cat.id))?;
        }
        state.model.theta = state.adam.step(&state.model.theta, &grads, lr)?;
        state.iteration += 1;
        on_record(&LogRecord {
            iteration: it,
            epoch,
            stage,
            category_id: cat.id,
            support_loss: losses.support,
            query_loss: losses.query,
            lr,
            wall_time_s: clock.elapsed().as_secs_f64(),
        });
    }
    Ok(())
}

/// Plain SGD on the support loss (no graph kept between steps).
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    params: &ParamSet,
    detectors: &[String],
    x: &Tensor,
    t: &Targets,
    steps: usize,
    lr: f64,
    w: &LossWeights,
    model_cfg: &ModelConfig,
    limit: f64,
) -> Result<ParamSet> {
    let mut p = params.detach();
    for step in 0..steps {
        let leaves = p.to_leaves();
        let out = model::head_forward(x, &leaves, detectors, model_cfg.depth_readout)?;
        let loss = loss_support(&out, t, w, model_cfg.unsquared_l2)?;
        check_loss(loss.item()?, limit, step as u64, 0, None)?;
        let g = backward(&loss, &leaves)?;
        p = p.axpy(-lr, &g)?;
    }
    Ok(p)
}

/// Replicates θ_key* for the support's keypoint count and fine-tunes on it.
pub fn few_shot_finetune(model: &MetaModel, x: &Tensor, t: &Targets, cfg: &RunConfig) -> Result<ParamSet> {
    let k = t.shape()[1];
    let names = model::detector_names(GENERIC, k);
    let init = model.category_params(k)?;
    finetune(
        &init,
        &names,
        x,
        t,
        cfg.meta.finetune_steps,
        cfg.meta.finetune_lr,
        &cfg.meta.weights,
        &cfg.model,
        cfg.meta.divergence_limit,
    )
}

/// A viewpoint estimate; `flagged` marks a degenerate Procrustes problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewPrediction {
    pub rotation: Rotation,
    pub flagged: bool,
}

/// Per-sample Procrustes between canonical points (the network's (x, y, z)
/// readouts, or `template` when given) and backprojected (u, v, d).
pub fn predict_viewpoints(
    out: &KeypointOutput,
    template: Option<&[Vec3]>,
    data: &DataConfig,
) -> Result<Vec<ViewPrediction>> {
    let c = synth::grid_center(data);
    let cam = OrthoCamera::new([c, c], data.object_scale).map_err(|e| MetaError::Invalid(e.to_string()))?;
    let (n, k) = (out.batch(), out.keypoints());
    let at = |t: &Tensor, i: usize, j: usize| t.values()[i * k + j];
    let mut preds = Vec::with_capacity(n);
    for i in 0..n {
        let observed: Vec<Vec3> =
            (0..k).map(|j| cam.backproject(at(&out.u, i, j), at(&out.v, i, j), at(&out.d, i, j))).collect();
        let canonical: Vec<Vec3> = match template {
            Some(tp) => tp.to_vec(),
            None => (0..k).map(|j| [at(&out.x, i, j), at(&out.y, i, j), at(&out.z, i, j)]).collect(),
        };
        let fit =
            solve_procrustes(&PointSet3D::new(canonical), &PointSet3D::new(observed), ProcrustesOptions::default());
        preds.push(match fit {
            Ok(f) => ViewPrediction { rotation: f.rotation, flagged: false },
            Err(_) => ViewPrediction { rotation: Rotation::IDENTITY, flagged: true },
        });
    }
    Ok(preds)
}

/// Forward pass of an adapted category model followed by [`predict_viewpoints`].
pub fn predict_viewpoint(
    params: &ParamSet,
    detectors: &[String],
    x: &Tensor,
    template: Option<&[Vec3]>,
    cfg: &RunConfig,
) -> Result<Vec<ViewPrediction>> {
    let out = model::head_forward(x, params, detectors, cfg.model.depth_readout)?;
    predict_viewpoints(&out, template, &cfg.data)
}

/// Convenience: the sample's own detector names for a `k`-keypoint model.
pub fn keypoint_names(k: usize) -> Vec<String> {
    model::detector_names(GENERIC, k)
}
