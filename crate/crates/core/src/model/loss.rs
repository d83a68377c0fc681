use crate::autodiff::{AutodiffError, Result, Tensor};
use crate::config::LossWeights;
use crate::synth::RenderedSample;

use super::{coordinate_grids, KeypointOutput};

/// Ground truth per keypoint, each `[N, K]`.
#[derive(Clone, Debug)]
pub struct Targets {
    pub u: Tensor,
    pub v: Tensor,
    pub x: Tensor,
    pub y: Tensor,
    pub z: Tensor,
    pub d: Tensor,
}

impl Targets {
    /// Every keypoint of every sample, in order.
    pub fn from_samples(samples: &[&RenderedSample]) -> Result<Targets> {
        let k = samples.first().map_or(0, |s| s.num_keypoints());
        let all: Vec<usize> = (0..k).collect();
        Targets::select(samples, &all)
    }

    /// Keypoint `index[j]` of each sample becomes target `j`.
    pub fn select(samples: &[&RenderedSample], index: &[usize]) -> Result<Targets> {
        let n = samples.len();
        let k = index.len();
        let mut cols: [Vec<f64>; 6] = std::array::from_fn(|_| Vec::with_capacity(n * k));
        for s in samples {
            for &i in index {
                if i >= s.num_keypoints() {
                    return Err(AutodiffError::Invalid(format!(
                        "keypoint {i} of a {}-keypoint sample",
                        s.num_keypoints()
                    )));
                }
                let p = s.canonical[i];
                for (c, v) in cols.iter_mut().zip([s.uv[i][0], s.uv[i][1], p[0], p[1], p[2], s.depth[i]]) {
                    c.push(v);
                }
            }
        }
        let [u, v, x, y, z, d] = cols.map(|c| Tensor::new(&[n, k], c));
        Ok(Targets { u: u?, v: v?, x: x?, y: y?, z: z?, d: d? })
    }

    /// Concatenates along the sample axis.
    pub fn stack(parts: &[Targets]) -> Result<Targets> {
        let cat =
            |f: fn(&Targets) -> &Tensor| Tensor::concat(&parts.iter().map(|t| f(t).clone()).collect::<Vec<_>>(), 0);
        Ok(Targets {
            u: cat(|t| &t.u)?,
            v: cat(|t| &t.v)?,
            x: cat(|t| &t.x)?,
            y: cat(|t| &t.y)?,
            z: cat(|t| &t.z)?,
            d: cat(|t| &t.d)?,
        })
    }

    pub fn shape(&self) -> &[usize] {
        self.u.shape()
    }
}

/// Unweighted regression terms, each a mean over keypoints and samples.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub l2d: Tensor,
    pub l3d: Tensor,
    pub ld: Tensor,
}

fn stack_last(parts: &[Tensor]) -> Result<Tensor> {
    let reshaped = parts
        .iter()
        .map(|p| {
            let mut s = p.shape().to_vec();
            s.push(1);
            p.reshape(&s)
        })
        .collect::<Result<Vec<_>>>()?;
    let axis = parts[0].shape().len();
    Tensor::concat(&reshaped, axis)
}

/// Mean over `[N, K]` of the squared (or plain) Euclidean norm of the stacked differences.
fn regression(diffs: &[Tensor], unsquared: bool) -> Result<Tensor> {
    if unsquared {
        stack_last(diffs)?.l2_norm()?.mean()
    } else {
        let mut acc = diffs[0].mul(&diffs[0])?;
        for d in &diffs[1..] {
            acc = acc.add(&d.mul(d)?)?;
        }
        acc.mean()
    }
}

pub fn loss_terms(out: &KeypointOutput, t: &Targets, unsquared: bool) -> Result<LossTerms> {
    if out.u.shape() != t.shape() {
        return Err(AutodiffError::Shape {
            op: "loss",
            detail: format!("predictions {:?} vs targets {:?}", out.u.shape(), t.shape()),
        });
    }
    Ok(LossTerms {
        l2d: regression(&[out.u.sub(&t.u)?, out.v.sub(&t.v)?], unsquared)?,
        l3d: regression(&[out.x.sub(&t.x)?, out.y.sub(&t.y)?, out.z.sub(&t.z)?], unsquared)?,
        ld: regression(&[out.d.sub(&t.d)?], unsquared)?,
    })
}

/// `λ2D·L2D + λ3D·L3D + λd·Ld`; no concentration term.
pub fn loss_support(out: &KeypointOutput, t: &Targets, w: &LossWeights, unsquared: bool) -> Result<Tensor> {
    let terms = loss_terms(out, t, unsquared)?;
    weighted_sum(&[(w.l2d, &terms.l2d), (w.l3d, &terms.l3d), (w.ld, &terms.ld)])
}

fn weighted_sum(parts: &[(f64, &Tensor)]) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for &(w, t) in parts {
        if w == 0.0 {
            continue;
        }
        let term = t.scale(w)?;
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    Ok(acc.unwrap_or_else(|| Tensor::scalar(0.0)))
}

/// `(1/K)·Σ_k Σ_{u,v} h_k(u,v)·‖(u_k, v_k) − (u, v)‖`, averaged over samples.
pub fn loss_concentration(out: &KeypointOutput) -> Result<Tensor> {
    let [h, w] = out.grid();
    let (n, k) = (out.batch(), out.keypoints());
    let (gu, gv) = coordinate_grids(n, k, h, w);
    let du = out.u.expand_trailing(&[h, w])?.sub(&gu)?;
    let dv = out.v.expand_trailing(&[h, w])?.sub(&gv)?;
    let dist = stack_last(&[du, dv])?.l2_norm()?;
    out.h.mul(&dist)?.sum()?.scale(1.0 / (n * k) as f64)
}

/// Support loss plus `λcon·Lcon`.
pub fn loss_query(out: &KeypointOutput, t: &Targets, w: &LossWeights, unsquared: bool) -> Result<Tensor> {
    let s = loss_support(out, t, w, unsquared)?;
    if w.lcon == 0.0 {
        return Ok(s);
    }
    s.add(&loss_concentration(out)?.scale(w.lcon)?)
}
