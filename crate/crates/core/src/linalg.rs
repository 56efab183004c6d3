//! Fixed-size 3x3 helpers for SE(2) covariances and Jacobians.

use core::ops::{Add, Mul};

use crate::math::sqrt;

pub type Vec3 = [f64; 3];

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const ZERO: Mat3 = Mat3([[0.0; 3]; 3]);
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn diag(d: Vec3) -> Mat3 {
        Mat3([[d[0], 0.0, 0.0], [0.0, d[1], 0.0], [0.0, 0.0, d[2]]])
    }

    /// Diagonal covariance from per-axis standard deviations.
    pub fn from_sigmas(s: Vec3) -> Mat3 {
        Mat3::diag([s[0] * s[0], s[1] * s[1], s[2] * s[2]])
    }

    pub fn diagonal(&self) -> Vec3 {
        [self.0[0][0], self.0[1][1], self.0[2][2]]
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn scale(&self, s: f64) -> Mat3 {
        let mut out = *self;
        for row in out.0.iter_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &Vec3) -> Vec3 {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    /// `J * self * J^T`.
    pub fn congruent(&self, j: &Mat3) -> Mat3 {
        *j * *self * j.transpose()
    }

    pub fn symmetrized(&self) -> Mat3 {
        let t = self.transpose();
        (*self + t).scale(0.5)
    }

    pub fn frobenius(&self) -> f64 {
        sqrt(self.0.iter().flatten().map(|v| v * v).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    /// Lower Cholesky factor, `None` unless symmetric positive definite.
    pub fn cholesky(&self) -> Option<Mat3> {
        let a = &self.0;
        if !self.is_finite() {
            return None;
        }
        let tol = 1e-9 * (1.0 + self.frobenius());
        for i in 0..3 {
            for j in 0..i {
                if (a[i][j] - a[j][i]).abs() > tol {
                    return None;
                }
            }
        }
        let mut l = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..=i {
                let mut s = a[i][j];
                for k in 0..j {
                    s -= l[i][k] * l[j][k];
                }
                if i == j {
                    if s <= 0.0 {
                        return None;
                    }
                    l[i][i] = sqrt(s);
                } else {
                    l[i][j] = s / l[j][j];
                }
            }
        }
        Some(Mat3(l))
    }

    pub fn is_spd(&self) -> bool {
        self.cholesky().is_some()
    }

    /// Inverse of a symmetric positive-definite matrix.
    pub fn inverse_spd(&self) -> Option<Mat3> {
        let l = self.cholesky()?;
        let mut inv = [[0.0; 3]; 3];
        for col in 0..3 {
            let mut e = [0.0; 3];
            e[col] = 1.0;
            let x = l.solve_cholesky(&e);
            for row in 0..3 {
                inv[row][col] = x[row];
            }
        }
        Some(Mat3(inv).symmetrized())
    }

    /// Solves `L L^T x = b` where `self` is the lower factor.
    fn solve_cholesky(&self, b: &Vec3) -> Vec3 {
        let l = &self.0;
        let mut y = [0.0; 3];
        for i in 0..3 {
            let mut s = b[i];
            for k in 0..i {
                s -= l[i][k] * y[k];
            }
            y[i] = s / l[i][i];
        }
        let mut x = [0.0; 3];
        for i in (0..3).rev() {
            let mut s = y[i];
            for k in i + 1..3 {
                s -= l[k][i] * x[k];
            }
            x[i] = s / l[i][i];
        }
        x
    }

    /// `v^T self^{-1} v` for an SPD matrix.
    pub fn mahalanobis_sq(&self, v: &Vec3) -> Option<f64> {
        let l = self.cholesky()?;
        let x = l.solve_cholesky(v);
        Some(dot(v, &x))
    }
}

impl Add for Mat3 {
    type Output = Mat3;

    fn add(self, rhs: Mat3) -> Mat3 {
        let mut out = self;
        for i in 0..3 {
            for j in 0..3 {
                out.0[i][j] += rhs.0[i][j];
            }
        }
        out
    }
}

impl Mul for Mat3 {
    type Output = Mat3;

    fn mul(self, rhs: Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| self.0[i][k] * rhs.0[k][j]).sum();
            }
        }
        Mat3(out)
    }
}

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spd_inverse_roundtrip() {
        let m = Mat3([[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]]);
        let inv = m.inverse_spd().unwrap();
        let p = m * inv;
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((p.0[i][j] - expect).abs() < 1e-12);
            }
        }
        let v = [1.0, -2.0, 0.5];
        let direct = dot(&v, &inv.mul_vec(&v));
        assert!((m.mahalanobis_sq(&v).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn rejects_indefinite_and_asymmetric() {
        assert!(!Mat3::diag([1.0, -1.0, 1.0]).is_spd());
        assert!(!Mat3::ZERO.is_spd());
        let mut m = Mat3::IDENTITY;
        m.0[0][1] = 0.5;
        assert!(!m.is_spd());
    }
}
