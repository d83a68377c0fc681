//! SO(3) machinery: small dense 3×3 algebra, SVD, Procrustes alignment,
//! rotation sampling, and the geodesic rotation error.

mod camera;
mod procrustes;
mod so3;
mod svd;

pub use camera::OrthoCamera;
pub use procrustes::{solve_procrustes, ProcrustesFit, ProcrustesOptions};
pub use so3::{exp_so3, matrix_log_so3, random_rotation, rotation_error, trace_angle, vee, Rotation};
pub use svd::{svd3, Svd3};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = [f64; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("SVD did not converge within {0} sweeps")]
    NonConvergence(usize),
    #[error("non-finite matrix entry")]
    NonFinite,
    #[error("point sets have different sizes ({0} vs {1})")]
    CountMismatch(usize, usize),
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("canonical point set is degenerate (covariance rank < 2)")]
    Degenerate,
    #[error("matrix is not a rotation: orthonormality error {orth:.3e}, det {det:.6}")]
    NotRotation { orth: f64, det: f64 },
    #[error("rotation angle within 1e-6 of pi and axis extraction failed")]
    LogNearPi,
    #[error("camera scale must be positive, got {0}")]
    NonPositiveScale(f64),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Row-major 3×3 matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    pub const ZERO: Mat3 = Mat3([[0.0; 3]; 3]);

    pub fn diag(d: Vec3) -> Mat3 {
        Mat3([[d[0], 0.0, 0.0], [0.0, d[1], 0.0], [0.0, 0.0, d[2]]])
    }

    pub fn from_cols(c0: Vec3, c1: Vec3, c2: Vec3) -> Mat3 {
        Mat3([[c0[0], c1[0], c2[0]], [c0[1], c1[1], c2[1]], [c0[2], c1[2], c2[2]]])
    }

    pub fn col(&self, j: usize) -> Vec3 {
        [self.0[0][j], self.0[1][j], self.0[2][j]]
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([[m[0][0], m[1][0], m[2][0]], [m[0][1], m[1][1], m[2][1]], [m[0][2], m[1][2], m[2][2]]])
    }

    pub fn mul(&self, o: &Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(r)
    }

    pub fn mul_vec(&self, v: &Vec3) -> Vec3 {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn add(&self, o: &Mat3) -> Mat3 {
        let mut r = self.0;
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += o.0[i][j];
            }
        }
        Mat3(r)
    }

    pub fn sub(&self, o: &Mat3) -> Mat3 {
        self.add(&o.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> Mat3 {
        Mat3(self.0.map(|row| row.map(|v| v * s)))
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1] + self.0[2][2]
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn frobenius(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    /// Skew-symmetric matrix `[w]x` with `[w]x v = w × v`.
    pub fn skew(w: Vec3) -> Mat3 {
        Mat3([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    }

    /// `‖MᵀM − I‖_F`.
    pub fn orthonormality_error(&self) -> f64 {
        self.transpose().mul(self).sub(&Mat3::IDENTITY).frobenius()
    }
}

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Points in canonical object units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSet3D {
    pub points: Vec<Vec3>,
}

impl PointSet3D {
    pub fn new(points: Vec<Vec3>) -> PointSet3D {
        PointSet3D { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.points.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for i in 0..3 {
                c[i] += p[i];
            }
        }
        c.map(|v| v / n)
    }

    /// Scatter matrix of the centered points.
    pub fn covariance(&self) -> Mat3 {
        let c = self.centroid();
        let mut m = [[0.0; 3]; 3];
        for p in &self.points {
            let d = sub(p, &c);
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += d[i] * d[j];
                }
            }
        }
        Mat3(m)
    }

    /// Numerical rank of the covariance at relative tolerance `tol`.
    pub fn covariance_rank(&self, tol: f64) -> Result<usize> {
        let s = svd3(&self.covariance())?.s;
        if s[0] <= 0.0 {
            return Ok(0);
        }
        Ok(s.iter().filter(|&&v| v > tol * s[0]).count())
    }

    pub fn transformed(&self, r: &Mat3) -> PointSet3D {
        PointSet3D { points: self.points.iter().map(|p| r.mul_vec(p)).collect() }
    }
}

/// Rotation by `angle` radians about the x axis.
pub fn rot_x(angle: f64) -> Rotation {
    let (s, c) = angle.sin_cos();
    Rotation::from_matrix_unchecked(Mat3([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]))
}

pub fn rot_y(angle: f64) -> Rotation {
    let (s, c) = angle.sin_cos();
    Rotation::from_matrix_unchecked(Mat3([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]))
}

pub fn rot_z(angle: f64) -> Rotation {
    let (s, c) = angle.sin_cos();
    Rotation::from_matrix_unchecked(Mat3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]))
}
