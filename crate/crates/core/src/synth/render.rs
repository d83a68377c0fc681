use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::SyntheticCategory;
use crate::config::DataConfig;
use crate::rng::stream;

const LINE_WIDTH: f64 = 0.6;
/// Relative blob radius change per canonical unit of depth; the main depth cue.
const DEPTH_SHRINK: f64 = 0.5;

/// Rasterizes edges, depth-ordered keypoint blobs, distractor strokes and
/// pixel noise. `uv` and `depth` are the sample's labels.
pub fn render_image(
    category: &SyntheticCategory,
    uv: &[[f64; 2]],
    depth: &[f64],
    seed: u64,
    cfg: &DataConfig,
) -> Vec<f64> {
    let size = cfg.image_size;
    let ratio = (cfg.image_size / cfg.heatmap_size) as f64;
    let to_px = |p: &[f64; 2]| [ratio * p[0] + (ratio - 1.0) / 2.0, ratio * p[1] + (ratio - 1.0) / 2.0];
    let px: Vec<[f64; 2]> = uv.iter().map(to_px).collect();
    let mut img = vec![0.0; size * size];
    let mut rng = stream(seed, "render", &[]);

    for _ in 0..cfg.distractors {
        let a = [rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64)];
        let b = [rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64)];
        let level = rng.random_range(0.1..0.4);
        stroke(&mut img, size, a, b, level);
    }
    for (&(i, j), &level) in category.edges.iter().zip(&category.edge_intensity) {
        stroke(&mut img, size, px[i], px[j], level);
    }

    // far to near, so nearer blobs cover farther ones
    let mut order: Vec<usize> = (0..uv.len()).collect();
    order.sort_by(|&a, &b| depth[b].total_cmp(&depth[a]));
    for k in order {
        let r = category.blob_radius[k] * (1.0 - DEPTH_SHRINK * depth[k]);
        let level = category.blob_intensity[k];
        let [cx, cy] = px[k];
        let reach = (3.0 * r).ceil() as isize;
        let (x0, y0) = (cx.round() as isize, cy.round() as isize);
        for y in (y0 - reach).max(0)..=(y0 + reach).min(size as isize - 1) {
            for x in (x0 - reach).max(0)..=(x0 + reach).min(size as isize - 1) {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let a = (-d2 / (2.0 * r * r)).exp();
                let p = &mut img[y as usize * size + x as usize];
                *p = (1.0 - a) * *p + a * level;
            }
        }
    }

    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma is positive");
        for p in &mut img {
            *p += noise.sample(&mut rng);
        }
    }
    img
}

fn stroke(img: &mut [f64], size: usize, a: [f64; 2], b: [f64; 2], level: f64) {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let pad = 3.0 * LINE_WIDTH;
    let xmin = (a[0].min(b[0]) - pad).floor().max(0.0) as usize;
    let xmax = ((a[0].max(b[0]) + pad).ceil() as usize).min(size - 1);
    let ymin = (a[1].min(b[1]) - pad).floor().max(0.0) as usize;
    let ymax = ((a[1].max(b[1]) + pad).ceil() as usize).min(size - 1);
    for y in ymin..=ymax {
        for x in xmin..=xmax {
            let (px, py) = (x as f64 - a[0], y as f64 - a[1]);
            let t = if len2 > 0.0 { ((px * dx + py * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let d2 = (px - t * dx).powi(2) + (py - t * dy).powi(2);
            let v = level * (-d2 / (2.0 * LINE_WIDTH * LINE_WIDTH)).exp();
            let p = &mut img[y * size + x];
            *p = p.max(v);
        }
    }
}
