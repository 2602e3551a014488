//! Three-component vectors and the small fixed matrices built on them.

use crate::error::{Error, Result};
use std::ops::{Add, Mul, Neg, Sub};

/// Norm below which a vector cannot be normalized.
pub const DEGENERACY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        debug_assert!(x.is_finite() && y.is_finite() && z.is_finite());
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn dot(&self, o: &Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, c: f64) -> Vec3 {
        Vec3::new(self.x * c, self.y * c, self.z * c)
    }

    /// Unit vector with the same direction. Errors on near-zero input.
    pub fn normalize(&self) -> Result<UnitVec3> {
        let n = self.norm();
        if n <= DEGENERACY_EPS {
            return Err(Error::DegenerateVector { norm: n });
        }
        Ok(UnitVec3(self.scale(1.0 / n)))
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, c: f64) -> Vec3 {
        self.scale(c)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        self.scale(-1.0)
    }
}

/// A vector of unit length (within 1e-6 at construction).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVec3(Vec3);

impl UnitVec3 {
    /// Wraps a vector already known to have unit length.
    pub fn from_unit(v: Vec3) -> Result<Self> {
        let n = v.norm();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::DegenerateVector { norm: n });
        }
        Ok(UnitVec3(v))
    }

    pub fn z_axis() -> Self {
        UnitVec3(Vec3::new(0.0, 0.0, 1.0))
    }

    pub fn as_vec(&self) -> Vec3 {
        self.0
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }
    pub fn y(&self) -> f64 {
        self.0.y
    }
    pub fn z(&self) -> f64 {
        self.0.z
    }

    pub fn dot(&self, o: &UnitVec3) -> f64 {
        self.0.dot(&o.0)
    }

    /// Angle between two unit vectors in degrees.
    pub fn angle_deg(&self, o: &UnitVec3) -> f64 {
        self.dot(o).clamp(-1.0, 1.0).acos().to_degrees()
    }

    /// Rotates this vector about `axis` by `angle_rad` (Rodrigues).
    pub fn rotate_about(&self, axis: &UnitVec3, angle_rad: f64) -> UnitVec3 {
        let v = self.0;
        let k = axis.0;
        let cos = angle_rad.cos();
        let sin = angle_rad.sin();
        let cross = Vec3::new(
            k.y * v.z - k.z * v.y,
            k.z * v.x - k.x * v.z,
            k.x * v.y - k.y * v.x,
        );
        let rotated = v.scale(cos) + cross.scale(sin) + k.scale(k.dot(&v) * (1.0 - cos));
        // Renormalize to undo rounding drift.
        rotated.normalize().expect("rotation preserves norm")
    }
}

/// Column-major-free 3x3 matrix stored as rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3 {
    pub rows: [[f64; 3]; 3],
}

impl Mat3 {
    pub fn identity() -> Self {
        Mat3 {
            rows: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn mul_vec(&self, v: &Vec3) -> Vec3 {
        let r = &self.rows;
        Vec3::new(
            r[0][0] * v.x + r[0][1] * v.y + r[0][2] * v.z,
            r[1][0] * v.x + r[1][1] * v.y + r[1][2] * v.z,
            r[2][0] * v.x + r[2][1] * v.y + r[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| self.rows[i][k] * o.rows[k][j]).sum();
            }
        }
        Mat3 { rows: out }
    }

    pub fn transpose(&self) -> Mat3 {
        let r = &self.rows;
        Mat3 {
            rows: [
                [r[0][0], r[1][0], r[2][0]],
                [r[0][1], r[1][1], r[2][1]],
                [r[0][2], r[1][2], r[2][2]],
            ],
        }
    }

    pub fn det(&self) -> f64 {
        let r = &self.rows;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    /// Inverse via the adjugate. Returns None when |det| is below `eps`.
    pub fn inverse(&self, eps: f64) -> Option<Mat3> {
        let d = self.det();
        if d.abs() <= eps {
            return None;
        }
        let r = &self.rows;
        let cof = |i: usize, j: usize| {
            let (a, b) = ((i + 1) % 3, (i + 2) % 3);
            let (c, e) = ((j + 1) % 3, (j + 2) % 3);
            r[a][c] * r[b][e] - r[a][e] * r[b][c]
        };
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                // adjugate: transpose of cofactor matrix
                out[j][i] = cof(i, j) / d;
            }
        }
        Some(Mat3 { rows: out })
    }

    /// Solves A x = b. None when singular relative to `eps`.
    pub fn solve(&self, b: &Vec3, eps: f64) -> Option<Vec3> {
        self.inverse(eps).map(|inv| inv.mul_vec(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_scaling() {
        let u = Vec3::new(0.0, 0.0, 2.0).normalize().unwrap();
        assert_eq!(u.as_vec(), Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn normalize_identity() {
        let u = Vec3::new(0.0, 0.0, 1.0).normalize().unwrap();
        assert_eq!(u.as_vec(), Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn normalize_3_4_5() {
        let u = Vec3::new(3.0, 0.0, 4.0).normalize().unwrap();
        assert!((u.x() - 0.6).abs() < 1e-15);
        assert!((u.y() - 0.0).abs() < 1e-15);
        assert!((u.z() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_degenerate() {
        let r = Vec3::new(0.0, 0.0, 1e-13).normalize();
        assert!(matches!(r, Err(Error::DegenerateVector { .. })));
    }

    #[test]
    fn normalize_idempotent() {
        let mut rng = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        for _ in 0..100 {
            let v = Vec3::new(next() * 5.0, next() * 5.0, next() * 5.0);
            if v.norm() <= 1e-6 {
                continue;
            }
            let once = v.normalize().unwrap();
            let twice = once.as_vec().normalize().unwrap();
            assert!((once.as_vec() - twice.as_vec()).norm() < 1e-12);
        }
    }

    #[test]
    fn mat3_inverse_roundtrip() {
        let m = Mat3 {
            rows: [[1.0, 2.0, 0.5], [0.0, 1.0, -1.0], [3.0, 0.0, 2.0]],
        };
        let inv = m.inverse(1e-12).unwrap();
        let prod = m.mul_mat(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod.rows[i][j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotate_preserves_angle_bound() {
        let axis = Vec3::new(1.0, 1.0, 0.2).normalize().unwrap();
        let v = UnitVec3::z_axis();
        let r = v.rotate_about(&axis, 0.3);
        assert!((r.as_vec().norm() - 1.0).abs() < 1e-12);
        assert!(v.angle_deg(&r) <= 0.3f64.to_degrees() + 1e-9);
    }
}
