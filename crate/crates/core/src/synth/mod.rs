//! Procedural rigid categories rendered orthographically with exact labels.
//!
//! Labels live in heatmap-grid units: a keypoint with camera-frame position
//! `X = R·p` sits at `(u, v) = c + s·(X, Y) + offset` with depth `d = Z`, where
//! `c` is the grid center and `s` the configured object scale. Image pixels are
//! `ratio` times finer, so pixel coordinate `= ratio·u + (ratio − 1)/2`.

mod dump;
mod render;

pub use dump::{read_dump, write_dump, DatasetManifest, ManifestCategory, FORMAT_VERSION, MANIFEST_FILE, RECORDS_FILE};
pub use render::render_image;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{AugmentConfig, DataConfig};
use crate::geometry::{norm, random_rotation, rot_z, sub, Mat3, OrthoCamera, PointSet3D, Rotation, Vec3};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("category {0}: no acceptable geometry after {1} draws")]
    RejectionCap(u64, usize),
    #[error("projected keypoint ({u:.3}, {v:.3}) outside the {size}×{size} heatmap grid")]
    OutOfBounds { u: f64, v: f64, size: usize },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, SynthError>;

pub const REJECTION_CAP: usize = 1000;
/// Smallest accepted ratio of the third to the first covariance singular value.
pub const MIN_CONDITION: f64 = 0.05;
pub const MIN_SEPARATION: f64 = 0.3;
pub const AUGMENT_TRIES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCategory {
    pub id: u64,
    pub seed: u64,
    /// Centered, scaled to unit max norm.
    pub canonical: PointSet3D,
    pub edges: Vec<(usize, usize)>,
    pub edge_intensity: Vec<f64>,
    /// Blob radius in input pixels at zero depth.
    pub blob_radius: Vec<f64>,
    pub blob_intensity: Vec<f64>,
}

impl SyntheticCategory {
    pub fn num_keypoints(&self) -> usize {
        self.canonical.len()
    }
}

pub fn generate_category(id: u64, seed: u64, cfg: &DataConfig) -> Result<SyntheticCategory> {
    if cfg.nc_min < 3 || cfg.nc_min > cfg.nc_max {
        return Err(SynthError::Invalid(format!("keypoint range {}..={}", cfg.nc_min, cfg.nc_max)));
    }
    let mut rng = stream(seed, "category", &[]);
    let n = rng.random_range(cfg.nc_min..=cfg.nc_max);
    let canonical = (0..REJECTION_CAP)
        .find_map(|_| {
            let pts: Vec<Vec3> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
            normalize_shape(pts)
        })
        .ok_or(SynthError::RejectionCap(id, REJECTION_CAP))?;

    let edges = wireframe(&canonical.points, &mut rng);
    let edge_intensity = edges.iter().map(|_| rng.random_range(0.15..0.35)).collect();
    // evenly spaced, shuffled: intensity identifies the keypoint
    let mut blob_intensity: Vec<f64> = (0..n).map(|k| 0.45 + 0.55 * k as f64 / (n - 1) as f64).collect();
    blob_intensity.shuffle(&mut rng);
    let blob_radius = (0..n).map(|_| rng.random_range(1.1..1.3)).collect();
    Ok(SyntheticCategory { id, seed, canonical, edges, edge_intensity, blob_radius, blob_intensity })
}

fn normalize_shape(pts: Vec<Vec3>) -> Option<PointSet3D> {
    let raw = PointSet3D::new(pts);
    let c = raw.centroid();
    let centered: Vec<Vec3> = raw.points.iter().map(|p| sub(p, &c)).collect();
    let r = centered.iter().map(norm).fold(0.0, f64::max);
    if !(r > 0.0) {
        return None;
    }
    let set = PointSet3D::new(centered.iter().map(|p| p.map(|v| v / r)).collect());
    let s = crate::geometry::svd3(&set.covariance()).ok()?.s;
    // three points are always planar; require only that they are not collinear
    let weakest = if set.len() == 3 { s[1] } else { s[2] };
    if weakest < MIN_CONDITION * s[0] {
        return None;
    }
    for i in 0..set.len() {
        for j in 0..i {
            if norm(&sub(&set.points[i], &set.points[j])) < MIN_SEPARATION {
                return None;
            }
        }
    }
    Some(set)
}

/// Minimum spanning tree plus a few nearest-neighbor chords.
fn wireframe<R: Rng>(pts: &[Vec3], rng: &mut R) -> Vec<(usize, usize)> {
    let n = pts.len();
    let dist = |i: usize, j: usize| norm(&sub(&pts[i], &pts[j]));
    let mut in_tree = vec![false; n];
    in_tree[0] = true;
    let mut edges = Vec::new();
    for _ in 1..n {
        let (mut best, mut bi, mut bj) = (f64::INFINITY, 0, 0);
        for i in (0..n).filter(|&i| in_tree[i]) {
            for j in (0..n).filter(|&j| !in_tree[j]) {
                if dist(i, j) < best {
                    (best, bi, bj) = (dist(i, j), i, j);
                }
            }
        }
        in_tree[bj] = true;
        edges.push((bi.min(bj), bi.max(bj)));
    }
    for i in 0..n {
        if !rng.random_bool(0.3) {
            continue;
        }
        let nearest = (0..n)
            .filter(|&j| j != i && !edges.contains(&(i.min(j), i.max(j))))
            .min_by(|&a, &b| dist(i, a).total_cmp(&dist(i, b)));
        if let Some(j) = nearest {
            edges.push((i.min(j), i.max(j)));
        }
    }
    edges
}

/// One rendered view with exact ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderedSample {
    pub category_id: u64,
    pub image_size: usize,
    /// Row-major grayscale pixels.
    pub image: Vec<f64>,
    pub rotation: Rotation,
    /// Canonical points this sample's rotation acts on (mirrored when `mirrored`).
    pub canonical: Vec<Vec3>,
    pub mirrored: bool,
    /// In-plane shift of the projection center, heatmap-grid units.
    pub offset: [f64; 2],
    pub uv: Vec<[f64; 2]>,
    pub depth: Vec<f64>,
    pub render_seed: u64,
}

impl RenderedSample {
    pub fn num_keypoints(&self) -> usize {
        self.canonical.len()
    }

    pub fn camera(&self, cfg: &DataConfig) -> OrthoCamera {
        let c = grid_center(cfg);
        OrthoCamera { center: [c + self.offset[0], c + self.offset[1]], scale: cfg.object_scale }
    }

    /// Camera-frame keypoints recovered from the labels.
    pub fn observed_points(&self, cfg: &DataConfig) -> PointSet3D {
        let cam = self.camera(cfg);
        PointSet3D::new(self.uv.iter().zip(&self.depth).map(|(uv, &d)| cam.backproject(uv[0], uv[1], d)).collect())
    }
}

pub fn grid_center(cfg: &DataConfig) -> f64 {
    (cfg.heatmap_size as f64 - 1.0) / 2.0
}

fn compute_labels(
    rotation: &Rotation,
    canonical: &[Vec3],
    offset: [f64; 2],
    cfg: &DataConfig,
) -> (Vec<[f64; 2]>, Vec<f64>) {
    let c = grid_center(cfg);
    let cam = OrthoCamera { center: [c + offset[0], c + offset[1]], scale: cfg.object_scale };
    let mut uv = Vec::with_capacity(canonical.len());
    let mut depth = Vec::with_capacity(canonical.len());
    for p in canonical {
        let q = cam.project(&rotation.apply(p));
        uv.push([q[0], q[1]]);
        depth.push(q[2]);
    }
    (uv, depth)
}

fn in_bounds(uv: &[[f64; 2]], cfg: &DataConfig) -> bool {
    let hi = cfg.heatmap_size as f64 - 1.0;
    uv.iter().all(|p| (0.0..=hi).contains(&p[0]) && (0.0..=hi).contains(&p[1]))
}

fn assemble(
    category: &SyntheticCategory,
    rotation: Rotation,
    canonical: Vec<Vec3>,
    mirrored: bool,
    offset: [f64; 2],
    render_seed: u64,
    cfg: &DataConfig,
) -> Result<RenderedSample> {
    let (uv, depth) = compute_labels(&rotation, &canonical, offset, cfg);
    if let Some(p) = uv.iter().find(|p| !in_bounds(std::slice::from_ref(p), cfg)) {
        return Err(SynthError::OutOfBounds { u: p[0], v: p[1], size: cfg.heatmap_size });
    }
    let image = render_image(category, &uv, &depth, render_seed, cfg);
    Ok(RenderedSample {
        category_id: category.id,
        image_size: cfg.image_size,
        image,
        rotation,
        canonical,
        mirrored,
        offset,
        uv,
        depth,
        render_seed,
    })
}

/// Renders `category` under `rotation`, centered, with clutter drawn from `rng`.
pub fn render_sample<R: Rng>(
    category: &SyntheticCategory,
    rotation: Rotation,
    rng: &mut R,
    cfg: &DataConfig,
) -> Result<RenderedSample> {
    let render_seed = rng.random();
    assemble(category, rotation, category.canonical.points.clone(), false, [0.0, 0.0], render_seed, cfg)
}

/// A concrete augmentation: mirror, then in-plane rotation, then shift.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Transform2D {
    pub mirror: bool,
    /// Radians.
    pub angle: f64,
    /// Input pixels.
    pub shift_px: [i32; 2],
}

impl Transform2D {
    pub fn is_identity(&self) -> bool {
        !self.mirror && self.angle == 0.0 && self.shift_px == [0, 0]
    }
}

const MIRROR: Mat3 = Mat3([[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

/// Applies `t` to the geometry and labels, then re-renders with the sample's clutter seed.
pub fn apply_transform(
    sample: &RenderedSample,
    category: &SyntheticCategory,
    t: &Transform2D,
    cfg: &DataConfig,
) -> Result<RenderedSample> {
    if t.is_identity() {
        return Ok(sample.clone());
    }
    let mut r = *sample.rotation.matrix();
    let mut canonical = sample.canonical.clone();
    let mut offset = sample.offset;
    let mut mirrored = sample.mirrored;
    if t.mirror {
        // X' = M·R·p = (M R M)(M p)
        r = MIRROR.mul(&r).mul(&MIRROR);
        for p in &mut canonical {
            p[0] = -p[0];
        }
        offset[0] = -offset[0];
        mirrored = !mirrored;
    }
    if t.angle != 0.0 {
        let q = rot_z(t.angle);
        r = q.matrix().mul(&r);
        let (s, c) = t.angle.sin_cos();
        offset = [c * offset[0] - s * offset[1], s * offset[0] + c * offset[1]];
    }
    let ratio = (cfg.image_size / cfg.heatmap_size) as f64;
    offset[0] += t.shift_px[0] as f64 / ratio;
    offset[1] += t.shift_px[1] as f64 / ratio;
    let rotation = Rotation::new(r).map_err(|e| SynthError::Invalid(e.to_string()))?;
    assemble(category, rotation, canonical, mirrored, offset, sample.render_seed, cfg)
}

pub fn draw_transform<R: Rng>(rng: &mut R, aug: &AugmentConfig) -> Transform2D {
    let mut t = Transform2D::default();
    if aug.mirror && rng.random_bool(aug.prob) {
        t.mirror = true;
    }
    if aug.rotate && rng.random_bool(aug.prob) {
        let m = aug.max_inplane_deg.to_radians();
        t.angle = rng.random_range(-m..=m);
    }
    if aug.translate && aug.max_translate_px > 0 && rng.random_bool(aug.prob) {
        let m = aug.max_translate_px as i32;
        t.shift_px = [rng.random_range(-m..=m), rng.random_range(-m..=m)];
    }
    t
}

/// Random augmentation; transforms that push a keypoint off the grid are
/// redrawn, and after [`AUGMENT_TRIES`] failures the sample is returned as is.
pub fn augment<R: Rng>(
    sample: &RenderedSample,
    category: &SyntheticCategory,
    rng: &mut R,
    cfg: &DataConfig,
) -> Result<RenderedSample> {
    for _ in 0..AUGMENT_TRIES {
        let t = draw_transform(rng, &cfg.augment);
        match apply_transform(sample, category, &t, cfg) {
            Ok(s) => return Ok(s),
            Err(SynthError::OutOfBounds { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(sample.clone())
}

/// A sample fully determined by `seed`: uniform rotation, optional augmentation.
pub fn draw_sample(
    category: &SyntheticCategory,
    seed: u64,
    augmented: bool,
    cfg: &DataConfig,
) -> Result<RenderedSample> {
    let mut rng = stream(seed, "sample", &[]);
    let rotation = random_rotation(&mut rng);
    let base = render_sample(category, rotation, &mut rng, cfg)?;
    if augmented {
        augment(&base, category, &mut rng, cfg)
    } else {
        Ok(base)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<SyntheticCategory>,
    pub test: Vec<SyntheticCategory>,
}

/// Category `i` (ids `0..train` are training, the rest test) is generated from
/// its own derived seed, so split sizes never perturb each other's geometry.
pub fn make_split(num_train: usize, num_test: usize, seed: u64, cfg: &DataConfig) -> Result<Split> {
    if num_train == 0 || num_test == 0 {
        return Err(SynthError::Invalid("split sizes must be at least 1".into()));
    }
    let gen = |i: usize| generate_category(i as u64, derive_seed(seed, "category", &[i as u64]), cfg);
    Ok(Split {
        train: (0..num_train).map(gen).collect::<Result<_>>()?,
        test: (num_train..num_train + num_test).map(gen).collect::<Result<_>>()?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub category_id: u64,
    pub support: Vec<RenderedSample>,
    pub query: Vec<RenderedSample>,
}

/// Support sample `i` depends only on the base seed and `i`, so episodes built
/// from the same generator state are nested by prefix across shot sizes.
pub fn make_episode<R: Rng>(
    category: &SyntheticCategory,
    shot: usize,
    query: usize,
    rng: &mut R,
    cfg: &DataConfig,
) -> Result<Episode> {
    if shot == 0 || query == 0 {
        return Err(SynthError::Invalid(format!("shot {shot}, query {query}")));
    }
    let base: u64 = rng.random();
    let support = support_set(category, base, shot, true, cfg)?;
    let query = (0..query)
        .map(|i| draw_sample(category, derive_seed(base, "query", &[i as u64]), true, cfg))
        .collect::<Result<_>>()?;
    Ok(Episode { category_id: category.id, support, query })
}

pub fn support_set(
    category: &SyntheticCategory,
    base: u64,
    shot: usize,
    augmented: bool,
    cfg: &DataConfig,
) -> Result<Vec<RenderedSample>> {
    (0..shot).map(|i| draw_sample(category, derive_seed(base, "support", &[i as u64]), augmented, cfg)).collect()
}

/// Fixed unaugmented evaluation views of a category.
pub fn query_pool(
    category: &SyntheticCategory,
    root: u64,
    size: usize,
    cfg: &DataConfig,
) -> Result<Vec<RenderedSample>> {
    (0..size)
        .map(|i| draw_sample(category, derive_seed(root, "query-pool", &[category.id, i as u64]), false, cfg))
        .collect()
}

/// CDF of the rotation angle of a Haar-uniform rotation.
pub fn haar_angle_cdf(theta: f64) -> f64 {
    (theta - theta.sin()) / std::f64::consts::PI
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_error, solve_procrustes, ProcrustesOptions};

    fn cfg() -> DataConfig {
        DataConfig::default()
    }

    #[test]
    fn identity_projection_example() {
        let c = cfg();
        let mut cat = generate_category(0, 1, &c).unwrap();
        cat.canonical.points[0] = [1.0, 0.0, 0.0];
        let s = assemble(&cat, Rotation::IDENTITY, cat.canonical.points.clone(), false, [0.0, 0.0], 0, &c).unwrap();
        assert_eq!(s.uv[0], [grid_center(&c) + c.object_scale, grid_center(&c)]);
        assert_eq!(s.depth[0], 0.0);
    }

    #[test]
    fn labels_recover_rotation() {
        let c = cfg();
        let cat = generate_category(3, 77, &c).unwrap();
        for i in 0..50 {
            let s = draw_sample(&cat, i, true, &c).unwrap();
            let fit = solve_procrustes(
                &PointSet3D::new(s.canonical.clone()),
                &s.observed_points(&c),
                ProcrustesOptions::default(),
            )
            .unwrap();
            assert!(rotation_error(&s.rotation, &fit.rotation) < 1e-9);
        }
    }

    #[test]
    fn mirror_is_an_involution() {
        let c = cfg();
        let cat = generate_category(2, 5, &c).unwrap();
        let s = draw_sample(&cat, 9, false, &c).unwrap();
        let shifted =
            apply_transform(&s, &cat, &Transform2D { mirror: false, angle: 0.3, shift_px: [1, -1] }, &c).unwrap();
        let m = Transform2D { mirror: true, ..Default::default() };
        let twice = apply_transform(&apply_transform(&shifted, &cat, &m, &c).unwrap(), &cat, &m, &c).unwrap();
        assert_eq!(twice, shifted);
        assert_eq!(apply_transform(&s, &cat, &Transform2D::default(), &c).unwrap(), s);
    }

    #[test]
    fn rejection_cap_is_reported() {
        let mut c = cfg();
        c.nc_min = 60;
        c.nc_max = 60;
        assert!(matches!(generate_category(0, 0, &c), Err(SynthError::RejectionCap(0, _))));
    }
}
