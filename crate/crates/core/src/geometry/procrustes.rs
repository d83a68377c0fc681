use serde::{Deserialize, Serialize};

use super::{norm, sub, svd3, GeometryError, Mat3, PointSet3D, Result, Rotation, Vec3};

/// Relative singular-value tolerance below which the canonical set counts as
/// lower rank.
pub const DEGENERATE_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcrustesOptions {
    /// Fit an isotropic scale (norm ratio of the centered sets).
    pub scale: bool,
}

impl Default for ProcrustesOptions {
    fn default() -> Self {
        ProcrustesOptions { scale: true }
    }
}

/// `observed ≈ scale · R · canonical + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcrustesFit {
    pub rotation: Rotation,
    pub scale: f64,
    pub translation: Vec3,
    /// Root-mean-square residual over points.
    pub rms: f64,
}

impl ProcrustesFit {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        let r = self.rotation.apply(p);
        [
            self.scale * r[0] + self.translation[0],
            self.scale * r[1] + self.translation[1],
            self.scale * r[2] + self.translation[2],
        ]
    }
}

/// Least-squares similarity alignment of `canonical` onto `observed`
/// (Kabsch with a determinant sign fix, so the result is a proper rotation).
pub fn solve_procrustes(
    canonical: &PointSet3D,
    observed: &PointSet3D,
    opts: ProcrustesOptions,
) -> Result<ProcrustesFit> {
    let n = canonical.len();
    if n != observed.len() {
        return Err(GeometryError::CountMismatch(n, observed.len()));
    }
    if n < 3 {
        return Err(GeometryError::TooFewPoints(n));
    }
    if canonical.points.iter().chain(&observed.points).flatten().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let cp = canonical.centroid();
    let cq = observed.centroid();
    let p: Vec<Vec3> = canonical.points.iter().map(|x| sub(x, &cp)).collect();
    let q: Vec<Vec3> = observed.points.iter().map(|x| sub(x, &cq)).collect();

    let cov = svd3(&canonical.covariance())?.s;
    if !(cov[0] > 0.0) || cov[1] <= DEGENERATE_TOL * cov[0] {
        return Err(GeometryError::Degenerate);
    }

    // H = Σ p qᵀ, R = V diag(1, 1, d) Uᵀ
    let mut h = [[0.0; 3]; 3];
    for (a, b) in p.iter().zip(&q) {
        for i in 0..3 {
            for j in 0..3 {
                h[i][j] += a[i] * b[j];
            }
        }
    }
    let d = svd3(&Mat3(h))?;
    let vu = d.v.mul(&d.u.transpose());
    let sign = if vu.det() < 0.0 { -1.0 } else { 1.0 };
    let r = d.v.mul(&Mat3::diag([1.0, 1.0, sign])).mul(&d.u.transpose());
    let rotation = Rotation::from_matrix_unchecked(r);

    let scale = if opts.scale {
        let np: f64 = p.iter().map(|x| norm(x).powi(2)).sum();
        let nq: f64 = q.iter().map(|x| norm(x).powi(2)).sum();
        (nq / np).sqrt()
    } else {
        1.0
    };
    let rcp = rotation.apply(&cp);
    let translation = [cq[0] - scale * rcp[0], cq[1] - scale * rcp[1], cq[2] - scale * rcp[2]];
    let mut fit = ProcrustesFit { rotation, scale, translation, rms: 0.0 };
    let sq: f64 =
        canonical.points.iter().zip(&observed.points).map(|(a, b)| norm(&sub(&fit.apply(a), b)).powi(2)).sum();
    fit.rms = (sq / n as f64).sqrt();
    Ok(fit)
}
