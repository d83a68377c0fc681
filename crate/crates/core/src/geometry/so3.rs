use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{dot, norm, GeometryError, Mat3, Result, Vec3};

/// Tolerance for the orthonormality and determinant invariants.
pub const ROTATION_TOL: f64 = 1e-9;

/// A proper rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation(Mat3);

impl Rotation {
    pub const IDENTITY: Rotation = Rotation(Mat3::IDENTITY);

    pub fn new(m: Mat3) -> Result<Rotation> {
        if !m.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        let orth = m.orthonormality_error();
        let det = m.det();
        if orth > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::NotRotation { orth, det });
        }
        Ok(Rotation(m))
    }

    pub(crate) fn from_matrix_unchecked(m: Mat3) -> Rotation {
        Rotation(m)
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0.mul(&other.0))
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0.mul_vec(v)
    }

    /// Unit quaternion `(w, x, y, z)` to matrix.
    pub fn from_quaternion(q: [f64; 4]) -> Rotation {
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let [w, x, y, z] = q.map(|v| v / n);
        Rotation(Mat3([
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]))
    }
}

/// Vector of a skew-symmetric matrix, `vee([w]x) = w`.
pub fn vee(m: &Mat3) -> Vec3 {
    let m = &m.0;
    [0.5 * (m[2][1] - m[1][2]), 0.5 * (m[0][2] - m[2][0]), 0.5 * (m[1][0] - m[0][1])]
}

/// Rotation angle from the trace alone: `arccos(clamp((tr − 1)/2))`.
///
/// Loses precision near 0 and π where the cosine is flat; [`rotation_error`]
/// is the robust equivalent.
pub fn trace_angle(r: &Rotation) -> f64 {
    ((r.0.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Angle of a rotation from both its symmetric (trace) and skew parts.
fn angle(r: &Mat3) -> f64 {
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let s = norm(&vee(r)).min(1.0);
    s.atan2(c)
}

/// Geodesic distance between two rotations, in radians within `[0, π]`.
///
/// Equal to `‖log(R_gtᵀ R)‖_F / √2`. The angle is taken as `atan2(sin, cos)`
/// of the relative rotation rather than `arccos` of its trace, which keeps
/// full precision for nearly equal rotations.
pub fn rotation_error(r_gt: &Rotation, r: &Rotation) -> f64 {
    angle(&r_gt.0.transpose().mul(&r.0))
}

/// Principal matrix logarithm of a rotation (a skew-symmetric matrix).
pub fn matrix_log_so3(r: &Rotation) -> Result<Mat3> {
    let m = &r.0;
    let theta = angle(m);
    let skew = m.sub(&m.transpose()).scale(0.5);
    if theta < 1e-8 {
        // log R = (R − Rᵀ)/2 + O(θ³)
        return Ok(skew);
    }
    if theta < PI - 1e-6 {
        return Ok(skew.scale(theta / theta.sin()));
    }
    // Near π the skew part vanishes; read the axis off (R + Rᵀ)/2 = cos θ I + (1 − cos θ) n nᵀ.
    let sym = m.add(&m.transpose()).scale(0.5);
    let cos = theta.cos();
    let outer = sym.sub(&Mat3::IDENTITY.scale(cos)).scale(1.0 / (1.0 - cos));
    let k = (0..3).max_by(|&i, &j| outer.0[i][i].total_cmp(&outer.0[j][j])).unwrap();
    let col = outer.col(k);
    let n = norm(&col);
    if !(n > 0.0) {
        return Err(GeometryError::LogNearPi);
    }
    let mut axis = col.map(|v| v / n);
    if dot(&axis, &vee(&skew)) < 0.0 {
        axis = axis.map(|v| -v);
    }
    Ok(Mat3::skew(axis.map(|v| v * theta)))
}

/// Rodrigues exponential of a rotation vector.
pub fn exp_so3(w: &Vec3) -> Rotation {
    let theta = norm(w);
    let k = Mat3::skew(*w);
    let k2 = k.mul(&k);
    let (a, b) = if theta < 1e-6 {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    };
    Rotation(Mat3::IDENTITY.add(&k.scale(a)).add(&k2.scale(b)))
}

/// Uniform (Haar) sample from SO(3) via a normalized Gaussian quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        if q.iter().map(|v| v * v).sum::<f64>() > 1e-12 {
            return Rotation::from_quaternion(q);
        }
    }
}
