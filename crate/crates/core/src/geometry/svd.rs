use super::{cross, norm, GeometryError, Mat3, Result, Vec3};

pub const MAX_SWEEPS: usize = 60;

/// `m = U · diag(s) · Vᵀ` with `s` descending and non-negative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Svd3 {
    pub u: Mat3,
    pub s: Vec3,
    pub v: Mat3,
}

impl Svd3 {
    pub fn reconstruct(&self) -> Mat3 {
        self.u.mul(&Mat3::diag(self.s)).mul(&self.v.transpose())
    }
}

/// Cyclic one-sided Jacobi SVD of a 3×3 matrix.
///
/// Columns of a working copy of `m` are orthogonalized by plane rotations that
/// are accumulated into `V`; the final column norms are the singular values.
pub fn svd3(m: &Mat3) -> Result<Svd3> {
    if !m.is_finite() {
        return Err(GeometryError::NonFinite);
    }
    let mut a = m.0;
    let mut v = Mat3::IDENTITY.0;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
            for row in &a {
                alpha += row[p] * row[p];
                beta += row[q] * row[q];
                gamma += row[p] * row[q];
            }
            if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for row in a.iter_mut().chain(v.iter_mut()) {
                let (xp, xq) = (row[p], row[q]);
                row[p] = c * xp - s * xq;
                row[q] = s * xp + c * xq;
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GeometryError::NonConvergence(MAX_SWEEPS));
    }

    let a = Mat3(a);
    let v = Mat3(v);
    let mut order = [0usize, 1, 2];
    let sigma: Vec3 = [norm(&a.col(0)), norm(&a.col(1)), norm(&a.col(2))];
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));
    let s = order.map(|i| sigma[i]);
    let v_sorted = Mat3::from_cols(v.col(order[0]), v.col(order[1]), v.col(order[2]));

    // Left singular vectors: normalized columns, completed to an orthonormal
    // basis where the singular value vanishes.
    let tiny = s[0] * 1e-13;
    let mut u_cols: Vec<Vec3> = Vec::with_capacity(3);
    for (k, &i) in order.iter().enumerate() {
        if s[k] > tiny && s[k] > 0.0 {
            u_cols.push(a.col(i).map(|x| x / s[k]));
        }
    }
    complete_basis(&mut u_cols);
    Ok(Svd3 { u: Mat3::from_cols(u_cols[0], u_cols[1], u_cols[2]), s, v: v_sorted })
}

fn complete_basis(cols: &mut Vec<Vec3>) {
    if cols.is_empty() {
        cols.push([1.0, 0.0, 0.0]);
    }
    if cols.len() == 1 {
        let a = cols[0];
        // least-aligned coordinate axis
        let mut axis = [0.0; 3];
        let k = (0..3).min_by(|&i, &j| a[i].abs().total_cmp(&a[j].abs())).unwrap();
        axis[k] = 1.0;
        let b = cross(&a, &axis);
        let n = norm(&b);
        cols.push(b.map(|x| x / n));
    }
    if cols.len() == 2 {
        let c = cross(&cols[0], &cols[1]);
        let n = norm(&c);
        cols.push(c.map(|x| x / n));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn check(m: &Mat3) -> Svd3 {
        let d = svd3(m).unwrap();
        assert!(d.reconstruct().sub(m).frobenius() < 1e-10 * (1.0 + m.frobenius()));
        assert!(d.u.orthonormality_error() < 1e-10);
        assert!(d.v.orthonormality_error() < 1e-10);
        assert!(d.s[0] >= d.s[1] && d.s[1] >= d.s[2] && d.s[2] >= 0.0);
        d
    }

    #[test]
    fn identity() {
        let d = check(&Mat3::IDENTITY);
        assert_eq!(d.s, [1.0, 1.0, 1.0]);
        assert_eq!(d.u, Mat3::IDENTITY);
        assert_eq!(d.v, Mat3::IDENTITY);
    }

    #[test]
    fn diagonal() {
        assert_eq!(check(&Mat3::diag([3.0, 2.0, 1.0])).s, [3.0, 2.0, 1.0]);
        assert_eq!(check(&Mat3::diag([1.0, 3.0, 2.0])).s, [3.0, 2.0, 1.0]);
        assert_eq!(check(&Mat3::diag([-2.0, 0.5, 0.0])).s, [2.0, 0.5, 0.0]);
    }

    #[test]
    fn random_matrices_reconstruct() {
        let mut rng = stream(1, "test/svd", &[]);
        for _ in 0..2000 {
            let m = Mat3([[0.0; 3]; 3].map(|r: [f64; 3]| r.map(|_| rng.random_range(-5.0..5.0))));
            check(&m);
        }
    }

    #[test]
    fn rank_deficient_and_zero() {
        check(&Mat3::ZERO);
        check(&Mat3([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [-1.0, -2.0, -3.0]]));
        check(&Mat3([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 2.0]]));
    }

    #[test]
    fn non_finite_rejected() {
        let mut m = Mat3::IDENTITY;
        m.0[1][2] = f64::NAN;
        assert_eq!(svd3(&m).unwrap_err(), GeometryError::NonFinite);
    }
}
