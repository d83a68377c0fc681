//! Supervised multi-category pre-training of the feature block together with
//! a fixed bank of slot detectors. The bank doubles as the non-meta baseline.

use rand::Rng;

use super::adam::Adam;
use super::{check_loss, keypoint_names, MetaError};
use crate::autodiff::{backward, ParamSet, Tensor};
use crate::config::RunConfig;
use crate::geometry::{norm, sub, Vec3};
use crate::model::{self, loss_query, Targets};
use crate::rng::{derive_seed, stream};
use crate::synth::{draw_sample, RenderedSample, SyntheticCategory};

pub const SLOT_PREFIX: &str = "slot";
/// Per-training-category heads (`pc{i}.cat.*`, `pc{i}.key{j}.*`), used only
/// here: within a category, blob appearance identifies each keypoint, which
/// gives the feature block a learnable signal the shared slots lack.
pub const HEAD_PREFIX: &str = "pc";
const KMEANS_ROUNDS: usize = 50;

/// Outcome of pre-training. All tensors are untracked.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub feature_block: ParamSet,
    /// `cat.*` and `slot{i}.*`.
    pub bank: ParamSet,
    /// Canonical anchor of each slot.
    pub anchors: Vec<Vec3>,
    /// Training loss per iteration.
    pub losses: Vec<f64>,
}

/// k-means centres of the pooled canonical points of `categories`.
pub fn learn_anchors(categories: &[SyntheticCategory], count: usize, seed: u64) -> Vec<Vec3> {
    let pts: Vec<Vec3> = categories.iter().flat_map(|c| c.canonical.points.iter().copied()).collect();
    if pts.is_empty() || count == 0 {
        return Vec::new();
    }
    let mut rng = stream(seed, "anchors", &[]);
    // k-means++ seeding
    let mut centres = vec![pts[rng.random_range(0..pts.len())]];
    while centres.len() < count {
        let d2: Vec<f64> = pts
            .iter()
            .map(|p| centres.iter().map(|c| norm(&sub(p, c)).powi(2)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            centres.push(pts[centres.len() % pts.len()]);
            continue;
        }
        let mut r = rng.random_range(0.0..total);
        let mut pick = pts.len() - 1;
        for (i, d) in d2.iter().enumerate() {
            if r < *d {
                pick = i;
                break;
            }
            r -= d;
        }
        centres.push(pts[pick]);
    }
    for _ in 0..KMEANS_ROUNDS {
        let mut sums = vec![[0.0; 3]; count];
        let mut counts = vec![0usize; count];
        for p in &pts {
            let j = nearest(p, &centres);
            (0..3).for_each(|a| sums[j][a] += p[a]);
            counts[j] += 1;
        }
        for j in 0..count {
            if counts[j] > 0 {
                centres[j] = sums[j].map(|s| s / counts[j] as f64);
            }
        }
    }
    centres
}

fn nearest(p: &Vec3, set: &[Vec3]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, q) in set.iter().enumerate() {
        let d = norm(&sub(p, q));
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Keypoint index assigned to each anchor: anchors in order take their
/// nearest unused keypoint; once all are used, the nearest overall (padding).
pub fn slot_assignment(canonical: &[Vec3], anchors: &[Vec3]) -> Vec<usize> {
    let mut used = vec![false; canonical.len()];
    anchors
        .iter()
        .map(|a| {
            let mut best = (f64::INFINITY, 0);
            let free = used.iter().any(|u| !u);
            for (i, p) in canonical.iter().enumerate() {
                let d = norm(&sub(p, a));
                if (!free || !used[i]) && d < best.0 {
                    best = (d, i);
                }
            }
            used[best.1] = true;
            best.1
        })
        .collect()
}

/// Targets for the slot bank: slot `j` of sample `i` regresses the keypoint
/// its own labels assign to anchor `j`.
pub fn slot_targets(samples: &[&RenderedSample], anchors: &[Vec3]) -> crate::autodiff::Result<Targets> {
    let parts = samples
        .iter()
        .map(|s| Targets::select(std::slice::from_ref(s), &slot_assignment(&s.canonical, anchors)))
        .collect::<crate::autodiff::Result<Vec<_>>>()?;
    Targets::stack(&parts)
}

/// `[N, 1, H, W]` map with a Gaussian bump (max-composited) on every keypoint.
pub fn keypoint_map(samples: &[&RenderedSample], size: usize, sigma: f64) -> crate::autodiff::Result<Tensor> {
    let mut data = Vec::with_capacity(samples.len() * size * size);
    for s in samples {
        for r in 0..size {
            for c in 0..size {
                let v = s
                    .uv
                    .iter()
                    .map(|p| (-((c as f64 - p[0]).powi(2) + (r as f64 - p[1]).powi(2)) / (2.0 * sigma * sigma)).exp())
                    .fold(0.0, f64::max);
                data.push(v);
            }
        }
    }
    Tensor::new(&[samples.len(), 1, size, size], data)
}

pub fn init_bank(cfg: &RunConfig, seed: u64) -> ParamSet {
    let mut p = model::init_category(&cfg.model, seed);
    for name in model::detector_names(SLOT_PREFIX, cfg.pretrain.slots) {
        p.extend(&model::init_detector(&cfg.model, seed, &name)).expect("distinct slot names");
    }
    p
}

fn category_head(cfg: &RunConfig, seed: u64, index: usize, keypoints: usize) -> Result<ParamSet, MetaError> {
    let hs = derive_seed(seed, "pretrain/heads", &[index as u64]);
    let mut p = model::init_category(&cfg.model, hs);
    for name in keypoint_names(keypoints) {
        p.extend(&model::init_detector(&cfg.model, hs, &name))?;
    }
    Ok(ParamSet::from_pairs(p.iter().map(|(n, t)| (format!("{HEAD_PREFIX}{index}.{n}"), t.clone())))?)
}

/// The heads of training category `index` under their plain names; shares tensors with `params`.
fn head_view(params: &ParamSet, index: usize) -> Result<ParamSet, MetaError> {
    let prefix = format!("{HEAD_PREFIX}{index}.");
    let pairs = params
        .filter_prefix(&prefix)
        .iter()
        .map(|(n, t)| (n[prefix.len()..].to_string(), t.clone()))
        .collect::<Vec<_>>();
    Ok(ParamSet::from_pairs(pairs)?)
}

/// Joint supervised training of feature block and slot bank on `train`.
pub fn pretrain(train: &[SyntheticCategory], cfg: &RunConfig) -> Result<Pretrained, MetaError> {
    if train.is_empty() {
        return Err(MetaError::EmptyTasks);
    }
    let seed = cfg.seed;
    let pc = &cfg.pretrain;
    let anchors = learn_anchors(train, pc.slots, seed);
    let slots = model::detector_names(SLOT_PREFIX, pc.slots);
    let mut params = model::init_feature_block(&cfg.model, seed);
    params.extend(&init_bank(cfg, seed))?;
    for (i, c) in train.iter().enumerate() {
        params.extend(&category_head(cfg, seed, i, c.num_keypoints())?)?;
    }
    let mut params = params.to_leaves();
    let mut adam = Adam::new(&params, cfg.meta.beta1, cfg.meta.beta2, cfg.meta.adam_eps);
    let mut losses = Vec::with_capacity(pc.iterations);
    let hm = cfg.data.heatmap_size;
    for it in 0..pc.iterations {
        let mut rng = stream(seed, "pretrain/batch", &[it as u64]);
        let mut groups: Vec<(usize, Vec<RenderedSample>)> = Vec::new();
        for b in 0..pc.batch {
            let i = rng.random_range(0..train.len());
            let s =
                draw_sample(&train[i], derive_seed(seed, "pretrain/sample", &[it as u64, b as u64]), true, &cfg.data)?;
            match groups.iter_mut().find(|g| g.0 == i) {
                Some(g) => g.1.push(s),
                None => groups.push((i, vec![s])),
            }
        }
        let mut loss = Tensor::scalar(0.0);
        for (i, samples) in &groups {
            let refs: Vec<&RenderedSample> = samples.iter().collect();
            let images = model::image_batch(refs.iter().map(|s| s.image.as_slice()), cfg.data.image_size)?;
            let (feat, kp) = model::feature_block(&params, &images)?;
            let stack = Tensor::concat(&[feat, kp.clone()], 1)?;
            let w = &cfg.meta.weights;
            let out = model::head_forward(&stack, &params, &slots, cfg.model.depth_readout)?;
            let slot_loss = loss_query(&out, &slot_targets(&refs, &anchors)?, w, cfg.model.unsquared_l2)?;
            let view = head_view(&params, *i)?;
            let own = model::head_forward(
                &stack,
                &view,
                &keypoint_names(train[*i].num_keypoints()),
                cfg.model.depth_readout,
            )?;
            let own_loss = loss_query(&own, &Targets::from_samples(&refs)?, w, cfg.model.unsquared_l2)?;
            let diff = kp.sub(&keypoint_map(&refs, hm, cfg.model.kp_sigma)?)?;
            let group = slot_loss.add(&own_loss)?.add(&diff.mul(&diff)?.mean()?.scale(pc.kp_weight)?)?;
            loss = loss.add(&group.scale(refs.len() as f64 / pc.batch as f64)?)?;
        }
        let value = loss.item()?;
        check_loss(
            value,
            cfg.meta.divergence_limit,
            it as u64,
            derive_seed(seed, "pretrain/batch", &[it as u64]),
            None,
        )?;
        losses.push(value);
        let grads = backward(&loss, &params)?;
        params = adam.step(&params, &grads, pc.lr)?;
    }
    let params = params.detach();
    let fb = params.filter_prefix("fb.");
    let mut bank = params.filter_prefix("cat.");
    for s in &slots {
        bank.extend(&params.filter_prefix(&format!("{s}.")))?;
    }
    Ok(Pretrained { feature_block: fb, bank, anchors, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignment_pads_and_truncates() {
        let canonical = vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let anchors = vec![[0.0, 0.9, 0.0], [0.9, 0.0, 0.0], [0.0, 0.8, 0.0], [0.1, 0.0, 0.9], [0.0, 0.7, 0.1]];
        // third anchor finds its nearest (1) used and takes 2; afterwards all are used
        assert_eq!(slot_assignment(&canonical, &anchors), vec![1, 0, 2, 2, 1]);
        assert_eq!(slot_assignment(&canonical, &anchors[..2]), vec![1, 0]);
    }

    #[test]
    fn kmeans_recovers_separated_clusters() {
        let cfg = crate::config::DataConfig::default();
        let cats: Vec<_> = (0..4).map(|i| crate::synth::generate_category(i, 100 + i, &cfg).unwrap()).collect();
        let a = learn_anchors(&cats, 8, 3);
        assert_eq!(a.len(), 8);
        assert_eq!(a, learn_anchors(&cats, 8, 3));
        assert!(a.iter().all(|p| norm(p) <= 1.0 + 1e-12));
    }
}
