//! Points in R^3, the stable/unstable projections, the linearized flow
//! `T(t)`, and the reference boxes `B_1` and `B`.

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// Default absolute tolerance for geometric identities.
pub const DEFAULT_TOL: f64 = 1e-10;

/// A point or vector in R^3. Components carry lower indices; `x1`, `x2` span
/// the stable plane `L` and `x3` the unstable axis `U`.
#[derive(Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
}

impl fmt::Debug for Vec3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6e}, {:.6e}, {:.6e})", self.x1, self.x2, self.x3)
    }
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x1: 0.0,
        x2: 0.0,
        x3: 0.0,
    };

    pub fn new(x1: f64, x2: f64, x3: f64) -> Self {
        Vec3 { x1, x2, x3 }
    }

    pub fn e1() -> Self {
        Vec3::new(1.0, 0.0, 0.0)
    }

    pub fn e2() -> Self {
        Vec3::new(0.0, 1.0, 0.0)
    }

    pub fn e3() -> Self {
        Vec3::new(0.0, 0.0, 1.0)
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x1 * other.x1 + self.x2 * other.x2 + self.x3 * other.x3
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x1.is_finite() && self.x2.is_finite() && self.x3.is_finite()
    }

    /// Projection onto the stable plane `L` (zeroes `x3`).
    pub fn project_l(self) -> Vec3 {
        Vec3::new(self.x1, self.x2, 0.0)
    }

    /// Projection onto the unstable axis `U` (zeroes `x1`, `x2`).
    pub fn project_u(self) -> Vec3 {
        Vec3::new(0.0, 0.0, self.x3)
    }

    /// In-plane rotation by a quarter turn: `(-x2, x1, 0)`.
    pub fn perp_l(self) -> Vec3 {
        Vec3::new(-self.x2, self.x1, 0.0)
    }

    /// Planar argument of the `L`-projection, in `(-pi, pi]`.
    pub fn angle_l(self) -> f64 {
        self.x2.atan2(self.x1)
    }

    pub fn normalized(self) -> Result<Vec3> {
        let n = self.norm();
        if n < 1e-300 {
            return Err(Error::DegenerateTangent { norm: n });
        }
        Ok(self / n)
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x1 + o.x1, self.x2 + o.x2, self.x3 + o.x3)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x1 - o.x1, self.x2 - o.x2, self.x3 - o.x3)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x1 * s, self.x2 * s, self.x3 * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x1 / s, self.x2 / s, self.x3 / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x1, -self.x2, -self.x3)
    }
}

/// Dense 3x3 matrix, row major.
#[derive(Clone, Copy, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl fmt::Debug for Mat3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[")?;
        for row in &self.0 {
            writeln!(f, "  [{:.6e}, {:.6e}, {:.6e}]", row[0], row[1], row[2])?;
        }
        write!(f, "]")
    }
}

impl Mat3 {
    pub const ZERO: Mat3 = Mat3([[0.0; 3]; 3]);

    pub fn identity() -> Mat3 {
        Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn from_columns(c1: Vec3, c2: Vec3, c3: Vec3) -> Mat3 {
        Mat3([
            [c1.x1, c2.x1, c3.x1],
            [c1.x2, c2.x2, c3.x2],
            [c1.x3, c2.x3, c3.x3],
        ])
    }

    pub fn column(&self, j: usize) -> Vec3 {
        Vec3::new(self.0[0][j], self.0[1][j], self.0[2][j])
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v.x1 + m[0][1] * v.x2 + m[0][2] * v.x3,
            m[1][0] * v.x1 + m[1][1] * v.x2 + m[1][2] * v.x3,
            m[2][0] * v.x1 + m[2][1] * v.x2 + m[2][2] * v.x3,
        )
    }

    pub fn mul(&self, o: &Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for (k, row) in o.0.iter().enumerate() {
                    r[i][j] += self.0[i][k] * row[j];
                }
            }
        }
        Mat3(r)
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn add(&self, o: &Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = self.0[i][j] + o.0[i][j];
            }
        }
        Mat3(r)
    }

    pub fn sub(&self, o: &Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = self.0[i][j] - o.0[i][j];
            }
        }
        Mat3(r)
    }

    pub fn scale(&self, s: f64) -> Mat3 {
        let mut r = self.0;
        for row in &mut r {
            for v in row {
                *v *= s;
            }
        }
        Mat3(r)
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<Mat3> {
        let m = &self.0;
        let d = self.det();
        if !d.is_finite() || d.abs() < 1e-300 {
            return Err(Error::SingularMatrix(format!("det = {d:.3e}")));
        }
        let c = [
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
            ],
            [
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
            ],
            [
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ];
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = c[i][j] / d;
            }
        }
        Ok(Mat3(r))
    }

    pub fn frobenius(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Operator 2-norm: square root of the largest eigenvalue of `M^T M`,
    /// computed with the closed-form symmetric 3x3 eigenvalue formula.
    pub fn op_norm(&self) -> f64 {
        let s = self.transpose().mul(self);
        symmetric_max_eigenvalue(&s).max(0.0).sqrt()
    }
}

/// Largest eigenvalue of a symmetric 3x3 matrix (trigonometric formula).
fn symmetric_max_eigenvalue(a: &Mat3) -> f64 {
    let m = &a.0;
    let p1 = m[0][1] * m[0][1] + m[0][2] * m[0][2] + m[1][2] * m[1][2];
    let tr = m[0][0] + m[1][1] + m[2][2];
    if p1 <= 1e-300 {
        return m[0][0].max(m[1][1]).max(m[2][2]);
    }
    let q = tr / 3.0;
    let p2 = (m[0][0] - q).powi(2) + (m[1][1] - q).powi(2) + (m[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut b = *a;
    for i in 0..3 {
        b.0[i][i] -= q;
    }
    let b = b.scale(1.0 / p);
    let r = (b.det() / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    q + 2.0 * p * phi.cos()
}

/// Eigenvalue data of the hyperbolic equilibrium: complex stable pair
/// `sigma +- i mu` and real unstable rate `u`, with the saddle condition
/// `sigma + u > 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StabilityParams {
    pub sigma: f64,
    pub mu: f64,
    pub u: f64,
}

impl StabilityParams {
    pub fn new(sigma: f64, mu: f64, u: f64) -> Result<Self> {
        if !(sigma.is_finite() && mu.is_finite() && u.is_finite()) {
            return Err(Error::InvalidParameter(
                "non-finite stability parameters".into(),
            ));
        }
        if !(sigma < 0.0 && mu > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "need sigma < 0 < mu, got sigma = {sigma}, mu = {mu}"
            )));
        }
        if u <= 0.0 {
            return Err(Error::InvalidParameter(format!("need u > 0, got u = {u}")));
        }
        if sigma + u <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "saddle condition sigma + u > 0 fails: {sigma} + {u} = {}",
                sigma + u
            )));
        }
        Ok(StabilityParams { sigma, mu, u })
    }

    pub fn saddle_quantity(&self) -> f64 {
        self.sigma + self.u
    }

    /// The block matrix generating `T(t)`.
    pub fn a_matrix(&self) -> Mat3 {
        Mat3([
            [self.sigma, self.mu, 0.0],
            [-self.mu, self.sigma, 0.0],
            [0.0, 0.0, self.u],
        ])
    }
}

/// `T(t) x`: contracting rotation on `L`, pure expansion on `U`.
pub fn linear_flow(p: &StabilityParams, t: f64, x: Vec3) -> Vec3 {
    let es = (p.sigma * t).exp();
    let (s, c) = (p.mu * t).sin_cos();
    Vec3::new(
        es * (c * x.x1 + s * x.x2),
        es * (-s * x.x1 + c * x.x2),
        (p.u * t).exp() * x.x3,
    )
}

/// `T(t)` as a matrix.
pub fn linear_flow_matrix(p: &StabilityParams, t: f64) -> Mat3 {
    let es = (p.sigma * t).exp();
    let (s, c) = (p.mu * t).sin_cos();
    Mat3([
        [es * c, es * s, 0.0],
        [-es * s, es * c, 0.0],
        [0.0, 0.0, (p.u * t).exp()],
    ])
}

/// `|T(t)|`: the rotation factor is an isometry, so the operator norm is the
/// larger of the two exponential rates.
pub fn t_op_norm(p: &StabilityParams, t: f64) -> f64 {
    (p.sigma * t).exp().max((p.u * t).exp())
}

/// Radius of the outer box `B`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxConstants {
    pub r_outer: f64,
}

impl BoxConstants {
    pub fn in_outer(&self, x: Vec3) -> bool {
        x.norm() <= self.r_outer
    }
}

/// Unit box membership: `|P_L x| <= 1` and `|P_U x| <= 1`.
pub fn in_b1(x: Vec3) -> bool {
    x.project_l().norm() <= 1.0 && x.x3.abs() <= 1.0
}

/// `r_B = 2 (max_{0<=t<=1} |T(t)| + e^u + 2)`. The maximum is evaluated on a
/// dense grid and cross-checked against the analytic value
/// `max(1, e^u)`; the two must agree to 1e-12.
pub fn box_constants(p: &StabilityParams) -> BoxConstants {
    let analytic = 1f64.max(p.u.exp());
    let mut grid_max = 0.0f64;
    for i in 0..=1000 {
        let t = i as f64 / 1000.0;
        grid_max = grid_max.max(t_op_norm(p, t));
    }
    debug_assert!((grid_max - analytic).abs() <= 1e-12 * analytic.max(1.0));
    BoxConstants {
        r_outer: 2.0 * (grid_max.max(analytic) + p.u.exp() + 2.0),
    }
}
