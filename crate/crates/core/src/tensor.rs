//! Small fixed-size 3×3 tensor algebra generic over the scalar type.
//!
//! The return mapping is written once over [`Real`] and evaluated with plain
//! `f64` or with forward-mode dual numbers (for the local Jacobian and the
//! consistent tangent). Symmetric tensors are exchanged as six components in
//! the order `(11, 22, 33, 12, 23, 13)`.

use nalgebra::{Matrix3, SymmetricEigen};
use num_dual::DualNum;

/// Scalar usable in the constitutive kernels: `f64` or a dual number over it.
pub trait Real: DualNum<Primitive = f64> + Copy {}
impl<T: DualNum<Primitive = f64> + Copy> Real for T {}

/// Real part of a (possibly dual) scalar.
#[inline]
pub fn re<T: Real>(x: T) -> f64 {
    x.re()
}

#[inline]
pub fn lift<T: Real>(x: f64) -> T {
    T::from(x)
}

/// Index pairs of the six symmetric components.
pub const SYM_INDEX: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (0, 1), (1, 2), (0, 2)];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3<T>(pub [[T; 3]; 3]);

impl<T: Real> Mat3<T> {
    pub fn zero() -> Self {
        Mat3([[lift(0.0); 3]; 3])
    }

    pub fn identity() -> Self {
        let mut m = Self::zero();
        for i in 0..3 {
            m.0[i][i] = lift(1.0);
        }
        m
    }

    pub fn from_sym(v: &[T; 6]) -> Self {
        let mut m = Self::zero();
        for (k, &(i, j)) in SYM_INDEX.iter().enumerate() {
            m.0[i][j] = v[k];
            m.0[j][i] = v[k];
        }
        m
    }

    /// Symmetric part packed into six components.
    pub fn to_sym(&self) -> [T; 6] {
        let mut v = [lift(0.0); 6];
        for (k, &(i, j)) in SYM_INDEX.iter().enumerate() {
            v[k] = if i == j {
                self.0[i][i]
            } else {
                (self.0[i][j] + self.0[j][i]) * 0.5
            };
        }
        v
    }

    pub fn from_f64(m: &Mat3<f64>) -> Self {
        let mut out = Self::zero();
        for i in 0..3 {
            for j in 0..3 {
                out.0[i][j] = lift(m.0[i][j]);
            }
        }
        out
    }

    pub fn re(&self) -> Mat3<f64> {
        let mut out = Mat3::<f64>::zero();
        for i in 0..3 {
            for j in 0..3 {
                out.0[i][j] = self.0[i][j].re();
            }
        }
        out
    }

    pub fn add(&self, o: &Self) -> Self {
        let mut m = *self;
        for i in 0..3 {
            for j in 0..3 {
                m.0[i][j] += o.0[i][j];
            }
        }
        m
    }

    pub fn sub(&self, o: &Self) -> Self {
        let mut m = *self;
        for i in 0..3 {
            for j in 0..3 {
                m.0[i][j] -= o.0[i][j];
            }
        }
        m
    }

    pub fn scale(&self, s: T) -> Self {
        let mut m = *self;
        for i in 0..3 {
            for j in 0..3 {
                m.0[i][j] *= s;
            }
        }
        m
    }

    pub fn scale_f(&self, s: f64) -> Self {
        let mut m = *self;
        for i in 0..3 {
            for j in 0..3 {
                m.0[i][j] *= s;
            }
        }
        m
    }

    pub fn mul(&self, o: &Self) -> Self {
        let mut m = Self::zero();
        for i in 0..3 {
            for j in 0..3 {
                m.0[i][j] = self.0[i][0] * o.0[0][j] + self.0[i][1] * o.0[1][j] + self.0[i][2] * o.0[2][j];
            }
        }
        m
    }

    /// Product with a constant (`f64`) right factor; skips dual work on zeros.
    pub fn mul_f(&self, o: &Mat3<f64>) -> Self {
        let mut m = Self::zero();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = lift::<T>(0.0);
                for k in 0..3 {
                    if o.0[k][j] != 0.0 {
                        acc += self.0[i][k] * o.0[k][j];
                    }
                }
                m.0[i][j] = acc;
            }
        }
        m
    }

    /// Product with a constant (`f64`) left factor.
    pub fn f_mul(a: &Mat3<f64>, o: &Self) -> Self {
        let mut m = Self::zero();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = lift::<T>(0.0);
                for k in 0..3 {
                    if a.0[i][k] != 0.0 {
                        acc += o.0[k][j] * a.0[i][k];
                    }
                }
                m.0[i][j] = acc;
            }
        }
        m
    }

    pub fn trace(&self) -> T {
        self.0[0][0] + self.0[1][1] + self.0[2][2]
    }

    /// Trace of the product `self · o` without forming it.
    pub fn trace_mul(&self, o: &Self) -> T {
        let mut t = lift::<T>(0.0);
        for i in 0..3 {
            for k in 0..3 {
                t += self.0[i][k] * o.0[k][i];
            }
        }
        t
    }

    pub fn det(&self) -> T {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Self {
        let m = &self.0;
        let det = self.det();
        let inv_det = det.recip();
        let mut r = Self::zero();
        r.0[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
        r.0[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
        r.0[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
        r.0[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
        r.0[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
        r.0[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
        r.0[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det;
        r.0[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det;
        r.0[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;
        r
    }

    /// Deviatoric part `A − tr(A)/3 · I`.
    pub fn dev(&self) -> Self {
        let t = self.trace() / 3.0;
        let mut m = *self;
        for i in 0..3 {
            m.0[i][i] -= t;
        }
        m
    }

    /// Matrix exponential by scaling and squaring with a truncated Taylor
    /// series. The scaling exponent is chosen from the real part only, so the
    /// map is smooth in the dual directions.
    pub fn exp(&self) -> Self {
        let mut norm = 0.0f64;
        for i in 0..3 {
            let row: f64 = (0..3).map(|j| self.0[i][j].re().abs()).sum();
            norm = norm.max(row);
        }
        let mut squarings = 0u32;
        while norm > 0.125 {
            norm *= 0.5;
            squarings += 1;
        }
        let a = self.scale_f(0.5f64.powi(squarings as i32));
        // Taylor series, truncated once the (real) term is below round-off.
        let mut acc = Self::identity();
        let mut term = Self::identity();
        let mut bound = 1.0;
        for k in 1..=12 {
            term = term.mul(&a).scale_f(1.0 / k as f64);
            acc = acc.add(&term);
            bound *= norm / k as f64;
            if bound < 1e-17 {
                break;
            }
        }
        for _ in 0..squarings {
            acc = acc.mul(&acc);
        }
        acc
    }
}

impl Mat3<f64> {
    pub fn to_nalgebra(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.0[i][j])
    }

    pub fn from_nalgebra(m: &Matrix3<f64>) -> Self {
        let mut out = Self::zero();
        for i in 0..3 {
            for j in 0..3 {
                out.0[i][j] = m[(i, j)];
            }
        }
        out
    }

    /// Square root and inverse square root of a symmetric positive definite
    /// tensor. Returns `None` if an eigenvalue is not strictly positive.
    pub fn spd_sqrt_pair(&self) -> Option<(Self, Self)> {
        let eig = SymmetricEigen::new(self.to_nalgebra());
        if eig.eigenvalues.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return None;
        }
        let q = eig.eigenvectors;
        let s = Matrix3::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
        let si = Matrix3::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
        let root = q * s * q.transpose();
        let inv_root = q * si * q.transpose();
        Some((Self::from_nalgebra(&root), Self::from_nalgebra(&inv_root)))
    }

    pub fn is_spd(&self) -> bool {
        let m = self.to_nalgebra();
        if (m - m.transpose()).abs().max() > 1e-10 * (1.0 + m.abs().max()) {
            return false;
        }
        SymmetricEigen::new(m).eigenvalues.iter().all(|&l| l > 0.0 && l.is_finite())
    }
}

pub fn sym_identity() -> [f64; 6] {
    [1.0, 1.0, 1.0, 0.0, 0.0, 0.0]
}
