use serde::{Deserialize, Serialize};

use super::{GeometryError, Result, Vec3};

/// Scaled orthographic camera: `(u, v) = center + scale · (X, Y)`, depth `Z`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthoCamera {
    pub center: [f64; 2],
    pub scale: f64,
}

impl OrthoCamera {
    pub fn new(center: [f64; 2], scale: f64) -> Result<OrthoCamera> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(GeometryError::NonPositiveScale(scale));
        }
        Ok(OrthoCamera { center, scale })
    }

    /// Camera-frame point to `(u, v, depth)`.
    pub fn project(&self, p: &Vec3) -> Vec3 {
        [self.center[0] + self.scale * p[0], self.center[1] + self.scale * p[1], p[2]]
    }

    /// Inverse of [`project`](Self::project).
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        [(u - self.center[0]) / self.scale, (v - self.center[1]) / self.scale, depth]
    }
}
