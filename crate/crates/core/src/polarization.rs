//! Jones calculus on the single-photon polarization qubit.
//!
//! Vectors are written in the (H, V) basis. [`PolarizationTransform`] is the
//! SU(2) element used for fiber drift and for the action of a retarder stack.

use std::f64::consts::FRAC_1_SQRT_2;
use std::ops::Mul;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JonesVector(pub [Complex64; 2]);

impl JonesVector {
    pub fn new(h: Complex64, v: Complex64) -> Self {
        JonesVector([h, v])
    }

    pub fn h() -> Self {
        JonesVector([ONE, ZERO])
    }

    pub fn v() -> Self {
        JonesVector([ZERO, ONE])
    }

    pub fn d() -> Self {
        JonesVector([Complex64::new(FRAC_1_SQRT_2, 0.0), Complex64::new(FRAC_1_SQRT_2, 0.0)])
    }

    pub fn a() -> Self {
        JonesVector([Complex64::new(FRAC_1_SQRT_2, 0.0), Complex64::new(-FRAC_1_SQRT_2, 0.0)])
    }

    /// Right-hand circular, `(H + iV)/√2`.
    pub fn r() -> Self {
        JonesVector([Complex64::new(FRAC_1_SQRT_2, 0.0), Complex64::new(0.0, FRAC_1_SQRT_2)])
    }

    /// Left-hand circular, `(H - iV)/√2`.
    pub fn l() -> Self {
        JonesVector([Complex64::new(FRAC_1_SQRT_2, 0.0), Complex64::new(0.0, -FRAC_1_SQRT_2)])
    }

    /// `⟨self|other⟩`
    pub fn inner(&self, other: &JonesVector) -> Complex64 {
        self.0[0].conj() * other.0[0] + self.0[1].conj() * other.0[1]
    }

    pub fn norm_sqr(&self) -> f64 {
        self.0[0].norm_sqr() + self.0[1].norm_sqr()
    }

    pub fn scale(&self, k: Complex64) -> Self {
        JonesVector([self.0[0] * k, self.0[1] * k])
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm_sqr().sqrt();
        JonesVector([self.0[0] / n, self.0[1] / n])
    }

    /// The state orthogonal to `self`, `(-v*, h*)`.
    pub fn orthogonal(&self) -> Self {
        JonesVector([-self.0[1].conj(), self.0[0].conj()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JonesMatrix(pub [[Complex64; 2]; 2]);

impl JonesMatrix {
    pub fn identity() -> Self {
        JonesMatrix([[ONE, ZERO], [ZERO, ONE]])
    }

    /// Matrix whose rows are `⟨first|` and `⟨second|`; it maps `first` to H
    /// and `second` to V when the pair is orthonormal.
    pub fn from_bras(first: &JonesVector, second: &JonesVector) -> Self {
        JonesMatrix([
            [first.0[0].conj(), first.0[1].conj()],
            [second.0[0].conj(), second.0[1].conj()],
        ])
    }

    pub fn apply(&self, v: &JonesVector) -> JonesVector {
        let m = &self.0;
        JonesVector([
            m[0][0] * v.0[0] + m[0][1] * v.0[1],
            m[1][0] * v.0[0] + m[1][1] * v.0[1],
        ])
    }

    pub fn adjoint(&self) -> Self {
        let m = &self.0;
        JonesMatrix([
            [m[0][0].conj(), m[1][0].conj()],
            [m[0][1].conj(), m[1][1].conj()],
        ])
    }

    pub fn det(&self) -> Complex64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    /// Max-norm distance between matrices.
    pub fn distance(&self, other: &JonesMatrix) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                d = d.max((self.0[i][j] - other.0[i][j]).norm());
            }
        }
        d
    }
}

impl Mul for JonesMatrix {
    type Output = JonesMatrix;

    fn mul(self, rhs: JonesMatrix) -> JonesMatrix {
        let a = &self.0;
        let b = &rhs.0;
        let mut out = [[ZERO; 2]; 2];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        JonesMatrix(out)
    }
}

/// Unit-determinant polarization rotation `exp(-i θ·σ/2)` parameterised by a
/// rotation vector `θ` (radians on the Poincaré sphere). Components follow
/// the Pauli matrices in the (H, V) basis: σx is the D/A axis, σy the R/L
/// axis and σz the H/V axis.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PolarizationTransform {
    pub angles: [f64; 3],
}

impl PolarizationTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_angles(angles: [f64; 3]) -> Self {
        PolarizationTransform { angles }
    }

    /// Rotation angle away from the identity, folded into `[0, 2π]`.
    pub fn rotation_angle(&self) -> f64 {
        let m = self.matrix();
        // |tr U| / 2 = |cos(θ/2)|
        let half_trace = ((m.0[0][0] + m.0[1][1]) * 0.5).norm().min(1.0);
        2.0 * half_trace.acos()
    }

    pub fn matrix(&self) -> JonesMatrix {
        let [x, y, z] = self.angles;
        let theta = (x * x + y * y + z * z).sqrt();
        if theta == 0.0 {
            return JonesMatrix::identity();
        }
        let (s, c) = (theta / 2.0).sin_cos();
        let (nx, ny, nz) = (x / theta, y / theta, z / theta);
        // n·σ = [[nz, nx - i ny], [nx + i ny, -nz]]
        JonesMatrix([
            [Complex64::new(c, -s * nz), Complex64::new(-s * ny, -s * nx)],
            [Complex64::new(s * ny, -s * nx), Complex64::new(c, s * nz)],
        ])
    }

    /// Recovers the rotation vector of an SU(2) matrix. Global phase is
    /// removed first so any unitary is accepted.
    pub fn from_matrix(m: &JonesMatrix) -> Self {
        let det = m.det();
        let phase = Complex64::from_polar(1.0, -det.arg() / 2.0);
        let u11 = m.0[0][0] * phase;
        let u21 = m.0[1][0] * phase;
        let c = u11.re;
        let (sx, sy, sz) = (-u21.im, u21.re, -u11.im);
        let s = (sx * sx + sy * sy + sz * sz).sqrt();
        if s < 1e-300 {
            return if c >= 0.0 {
                Self::identity()
            } else {
                // -I is a 2π rotation about any axis
                Self::from_angles([0.0, 0.0, 2.0 * std::f64::consts::PI])
            };
        }
        let theta = 2.0 * s.atan2(c);
        PolarizationTransform {
            angles: [theta * sx / s, theta * sy / s, theta * sz / s],
        }
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &PolarizationTransform) -> Self {
        Self::from_matrix(&(self.matrix() * first.matrix()))
    }

    pub fn inverse(&self) -> Self {
        let [x, y, z] = self.angles;
        PolarizationTransform { angles: [-x, -y, -z] }
    }

    pub fn is_identity(&self) -> bool {
        self.angles == [0.0; 3]
    }
}
