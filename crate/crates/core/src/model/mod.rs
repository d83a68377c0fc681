//! The keypoint network: a frozen category-agnostic feature block, the
//! category-specific extractor `θ_cat`, and per-keypoint detectors `θ_key`
//! with spatial-softmax readouts.
//!
//! Feature stacks are `[N, F+1, H, W]`; detector outputs are read as
//! `[N, K, 5, H, W]` with channels (heatmap logit, depth, m^x, m^y, m^z).

mod checkpoint;
mod loss;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, CheckpointHeader};
pub use loss::{loss_concentration, loss_query, loss_support, loss_terms, LossTerms, Targets};

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Conv2dSpec, ParamSet, Result, Tensor};
use crate::config::{DepthReadout, ModelConfig};
use crate::rng::stream;

pub const DETECTOR_CHANNELS: usize = 5;
pub const CAT_W: &str = "cat.w";
pub const CAT_B: &str = "cat.b";

const STRIDE2: Conv2dSpec = Conv2dSpec { stride: 2, pad: 1 };

/// He-uniform weights `U(−b, b)`, `b = √(6 / fan_in)`, drawn from a stream
/// named after the parameter so that adding parameters never shifts others.
pub fn he_uniform(seed: u64, name: &str, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = stream(seed, &format!("init/{name}"), &[]);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("finite init")
}

fn conv_layer(p: &mut ParamSet, seed: u64, name: &str, out: usize, inp: usize) -> Result<()> {
    p.insert(format!("{name}.w"), he_uniform(seed, name, &[out, inp, 3, 3]))?;
    p.insert(format!("{name}.b"), Tensor::zeros(&[out]))
}

/// Convolution plus per-channel bias.
pub fn conv_bias(x: &Tensor, w: &Tensor, b: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
    let y = x.conv2d(w, spec)?;
    let [n, _, h, wd] = [y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]];
    y.add(&b.expand_trailing(&[h, wd])?.tile_leading(n)?)
}

/// Stacks single-channel images into `[N, 1, S, S]`.
pub fn image_batch<'a>(images: impl IntoIterator<Item = &'a [f64]>, size: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        data.extend_from_slice(img);
        n += 1;
    }
    Tensor::new(&[n, 1, size, size], data)
}

/// Parameters of the category-agnostic block (`fb.*`).
pub fn init_feature_block(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let mut p = ParamSet::new();
    conv_layer(&mut p, seed, "fb.conv1", cfg.conv1_channels, 1).unwrap();
    conv_layer(&mut p, seed, "fb.conv2", cfg.conv2_channels, cfg.conv1_channels).unwrap();
    conv_layer(&mut p, seed, "fb.conv3", cfg.feature_channels, cfg.conv2_channels).unwrap();
    conv_layer(&mut p, seed, "fb.kp", 1, cfg.conv2_channels).unwrap();
    p
}

/// Learned features `[N, F, H, W]` and the general-keypoint channel `[N, 1, H, W]`.
pub fn feature_block(params: &ParamSet, images: &Tensor) -> Result<(Tensor, Tensor)> {
    let g = |n: &str| params.get(n);
    let x = conv_bias(images, g("fb.conv1.w")?, g("fb.conv1.b")?, STRIDE2)?.relu()?;
    let x = conv_bias(&x, g("fb.conv2.w")?, g("fb.conv2.b")?, Conv2dSpec::SAME_3X3)?.relu()?;
    let feat = conv_bias(&x, g("fb.conv3.w")?, g("fb.conv3.b")?, Conv2dSpec::SAME_3X3)?.relu()?;
    let kp = conv_bias(&x, g("fb.kp.w")?, g("fb.kp.b")?, Conv2dSpec::SAME_3X3)?;
    Ok((feat, kp))
}

/// The `F + 1` channel stack; `kp_on = false` zeroes the general-keypoint channel.
pub fn extract_features(params: &ParamSet, images: &Tensor, cfg: &ModelConfig, kp_on: bool) -> Result<Tensor> {
    let (feat, kp) = feature_block(params, images)?;
    if feat.shape()[1] != cfg.feature_channels {
        return Err(crate::autodiff::AutodiffError::Shape {
            op: "extract_features",
            detail: format!("{} feature channels, config says {}", feat.shape()[1], cfg.feature_channels),
        });
    }
    let kp = if kp_on { kp } else { Tensor::zeros(kp.shape()) };
    Tensor::concat(&[feat, kp], 1)
}

pub fn init_category(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let mut p = ParamSet::new();
    conv_layer(&mut p, seed, "cat", cfg.category_channels, cfg.feature_channels + 1).unwrap();
    p
}

/// One detector `{name}.w` `[5, C, 3, 3]`, `{name}.b` `[5]`.
pub fn init_detector(cfg: &ModelConfig, seed: u64, name: &str) -> ParamSet {
    let mut p = ParamSet::new();
    conv_layer(&mut p, seed, name, DETECTOR_CHANNELS, cfg.category_channels).unwrap();
    p
}

/// `count` value-identical detectors `key0 .. key{count-1}` copied from `generic`.
pub fn replicate(generic: &ParamSet, from: &str, count: usize) -> Result<ParamSet> {
    let w = generic.get(&format!("{from}.w"))?;
    let b = generic.get(&format!("{from}.b"))?;
    let mut out = ParamSet::new();
    for k in 0..count {
        out.insert(format!("key{k}.w"), Tensor::param(w.shape(), w.to_vec())?)?;
        out.insert(format!("key{k}.b"), Tensor::param(b.shape(), b.to_vec())?)?;
    }
    Ok(out)
}

pub fn detector_names(prefix: &str, count: usize) -> Vec<String> {
    (0..count).map(|k| format!("{prefix}{k}")).collect()
}

/// Per-keypoint readouts, each `[N, K]` except `h` (`[N, K, H, W]`).
#[derive(Clone, Debug)]
pub struct KeypointOutput {
    pub h: Tensor,
    pub u: Tensor,
    pub v: Tensor,
    pub d: Tensor,
    pub x: Tensor,
    pub y: Tensor,
    pub z: Tensor,
}

impl KeypointOutput {
    pub fn batch(&self) -> usize {
        self.h.shape()[0]
    }
    pub fn keypoints(&self) -> usize {
        self.h.shape()[1]
    }
    pub fn grid(&self) -> [usize; 2] {
        [self.h.shape()[2], self.h.shape()[3]]
    }
}

/// Column (`u`) and row (`v`) coordinate maps broadcast to `[N, K, H, W]`.
pub fn coordinate_grids(n: usize, k: usize, h: usize, w: usize) -> (Tensor, Tensor) {
    let mut us = Vec::with_capacity(n * k * h * w);
    let mut vs = Vec::with_capacity(n * k * h * w);
    for _ in 0..n * k {
        for r in 0..h {
            for c in 0..w {
                us.push(c as f64);
                vs.push(r as f64);
            }
        }
    }
    (Tensor::new(&[n, k, h, w], us).unwrap(), Tensor::new(&[n, k, h, w], vs).unwrap())
}

/// Spatial softmax over the trailing two axes.
pub fn spatial_softmax(logits: &Tensor) -> Result<Tensor> {
    logits.softmax_trailing(2)
}

/// `(u, v) = Σ (u, v)·h`.
pub fn expect_2d(h: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = h.shape();
    let (gu, gv) = coordinate_grids(s[0], s[1], s[2], s[3]);
    Ok((h.mul(&gu)?.sum_trailing(2)?, h.mul(&gv)?.sum_trailing(2)?))
}

/// `(d, x, y, z)` from the depth map `c` and coordinate maps `m`.
pub fn expect_depth_and_3d(
    h: &Tensor,
    c: &Tensor,
    m: [&Tensor; 3],
    mode: DepthReadout,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let d = match mode {
        DepthReadout::Weighted => h.mul(c)?.sum_trailing(2)?,
        DepthReadout::Literal => c.sum_trailing(2)?,
    };
    let [x, y, z] = [m[0], m[1], m[2]].map(|t| h.mul(t).and_then(|p| p.sum_trailing(2)));
    Ok((d, x?, y?, z?))
}

/// Index map selecting channel `j` of every detector from `[N, K·5, H, W]`.
fn channel_index(n: usize, k: usize, hw: usize, j: usize) -> Rc<[usize]> {
    let mut idx = Vec::with_capacity(n * k * hw);
    for a in 0..n {
        for b in 0..k {
            let base = ((a * k + b) * DETECTOR_CHANNELS + j) * hw;
            idx.extend(base..base + hw);
        }
    }
    idx.into()
}

/// Category extractor followed by the named detectors, all applied as one
/// concatenated convolution.
pub fn head_forward(
    features: &Tensor,
    params: &ParamSet,
    detectors: &[String],
    mode: DepthReadout,
) -> Result<KeypointOutput> {
    let cat = conv_bias(features, params.get(CAT_W)?, params.get(CAT_B)?, Conv2dSpec::SAME_3X3)?.relu()?;
    let ws = detectors.iter().map(|d| params.get(&format!("{d}.w")).cloned()).collect::<Result<Vec<_>>>()?;
    let bs = detectors.iter().map(|d| params.get(&format!("{d}.b")).cloned()).collect::<Result<Vec<_>>>()?;
    let w = Tensor::concat(&ws, 0)?;
    let b = Tensor::concat(&bs, 0)?;
    let out = conv_bias(&cat, &w, &b, Conv2dSpec::SAME_3X3)?;
    let [n, _, h, wd] = [out.shape()[0], out.shape()[1], out.shape()[2], out.shape()[3]];
    let k = detectors.len();
    let ch = |j: usize| out.gather(channel_index(n, k, h * wd, j), &[n, k, h, wd]);
    readout(&ch(0)?, &ch(1)?, [&ch(2)?, &ch(3)?, &ch(4)?], mode)
}

/// Heatmap, location, depth and canonical-coordinate readouts from raw maps.
pub fn readout(logits: &Tensor, c: &Tensor, m: [&Tensor; 3], mode: DepthReadout) -> Result<KeypointOutput> {
    let heat = spatial_softmax(logits)?;
    let (u, v) = expect_2d(&heat)?;
    let (d, x, y, z) = expect_depth_and_3d(&heat, c, m, mode)?;
    Ok(KeypointOutput { h: heat, u, v, d, x, y, z })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(h: usize, w: usize, cells: &[(usize, usize)]) -> Tensor {
        let mut data = vec![0.0; h * w];
        for &(u, v) in cells {
            data[v * w + u] = 1.0 / cells.len() as f64;
        }
        Tensor::new(&[1, 1, h, w], data).unwrap()
    }

    #[test]
    fn expectation_examples() {
        let (u, v) = expect_2d(&one_hot(16, 16, &[(3, 5)])).unwrap();
        assert_eq!((u.values()[0], v.values()[0]), (3.0, 5.0));
        let uniform = spatial_softmax(&Tensor::zeros(&[1, 1, 16, 16])).unwrap();
        assert!(uniform.values().iter().all(|&p| p == 1.0 / 256.0));
        let (u, v) = expect_2d(&uniform).unwrap();
        assert!((u.values()[0] - 7.5).abs() < 1e-12 && (v.values()[0] - 7.5).abs() < 1e-12);
        let (u, v) = expect_2d(&one_hot(16, 16, &[(0, 0), (0, 10)])).unwrap();
        assert_eq!((u.values()[0], v.values()[0]), (0.0, 5.0));
    }

    #[test]
    fn softmax_saturates() {
        let mut logits = vec![0.0; 256];
        logits[37] = 30.0;
        let h = spatial_softmax(&Tensor::new(&[1, 1, 16, 16], logits).unwrap()).unwrap();
        assert!(h.values()[37] > 0.999);
    }

    #[test]
    fn depth_modes() {
        let h = one_hot(16, 16, &[(4, 9)]);
        let c = Tensor::full(&[1, 1, 16, 16], 0.7);
        let m = Tensor::full(&[1, 1, 16, 16], 2.0);
        let (d, x, _, _) = expect_depth_and_3d(&h, &c, [&m, &m, &m], DepthReadout::Weighted).unwrap();
        assert!((d.values()[0] - 0.7).abs() < 1e-12);
        assert_eq!(x.values()[0], 2.0);
        let (d, _, _, _) = expect_depth_and_3d(&h, &c, [&m, &m, &m], DepthReadout::Literal).unwrap();
        assert!((d.values()[0] - 179.2).abs() < 1e-9);
    }

    #[test]
    fn features_have_f_plus_one_channels() {
        let cfg = ModelConfig::default();
        let fb = init_feature_block(&cfg, 1);
        let img = Tensor::zeros(&[2, 1, 32, 32]);
        let f = extract_features(&fb, &img, &cfg, true).unwrap();
        assert_eq!(f.shape(), &[2, cfg.feature_channels + 1, 16, 16]);
        assert!(f.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn replicas_are_independent_copies() {
        let cfg = ModelConfig::default();
        let g = init_detector(&cfg, 3, "key");
        let r = replicate(&g, "key", 8).unwrap();
        assert_eq!(r.len(), 16);
        for k in 0..8 {
            assert!(r.get(&format!("key{k}.w")).unwrap().bit_eq(g.get("key.w").unwrap()));
            assert!(r.get(&format!("key{k}.w")).unwrap().is_leaf());
        }
        assert!(replicate(&g, "key", 1).unwrap().get("key0.b").unwrap().bit_eq(g.get("key.b").unwrap()));
    }
}
