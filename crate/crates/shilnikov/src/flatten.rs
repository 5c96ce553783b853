//! From a raw vector field to a flow with flat invariant manifolds.
//!
//! Given a C^1 field with a hyperbolic equilibrium of the right spectrum,
//! the pipeline runs: eigenframe (conjugate the linear part to the block
//! matrix), local stable/unstable manifold graphs fitted from trajectory
//! samples, a cutoff extension with a global derivative bound, the
//! straightening diffeomorphism `S(x + y) = x + y - w_s(x) - w_u(y)` with
//! its fixed-point inverse, and finally the conjugated flow
//! `F(t, x) = S(F_V(t, S^{-1}(x)))` expressed in the eigenframe, which
//! carries the flat-plane structure the section machinery assumes.

use crate::error::{Error, Result};
use crate::flow::{FieldFlow, Flow, IntegratorOpts, VectorField};
use crate::geometry::{linear_flow_matrix, Mat3, StabilityParams, Vec3};
use crate::homoclinic::HomoclinicData;

// ---------------------------------------------------------------------------
// Eigenframe.
// ---------------------------------------------------------------------------

/// Basis matrix `B` (columns: Re z, Im z, w) and the block matrix it
/// conjugates the linearization to.
#[derive(Clone, Copy, Debug)]
pub struct EigenFrame {
    pub b: Mat3,
    pub b_inv: Mat3,
    pub a: Mat3,
    pub params: StabilityParams,
    /// `|B^{-1} DV(0) B - A|` in the operator norm.
    pub residual: f64,
}

#[derive(Clone, Copy)]
struct C64 {
    re: f64,
    im: f64,
}

impl C64 {
    fn new(re: f64, im: f64) -> Self {
        C64 { re, im }
    }
    fn mul(self, o: C64) -> C64 {
        C64::new(
            self.re * o.re - self.im * o.im,
            self.re * o.im + self.im * o.re,
        )
    }
    fn sub(self, o: C64) -> C64 {
        C64::new(self.re - o.re, self.im - o.im)
    }
    fn norm_sq(self) -> f64 {
        self.re * self.re + self.im * self.im
    }
}

fn cross3(a: &[C64; 3], b: &[C64; 3]) -> [C64; 3] {
    [
        a[1].mul(b[2]).sub(a[2].mul(b[1])),
        a[2].mul(b[0]).sub(a[0].mul(b[2])),
        a[0].mul(b[1]).sub(a[1].mul(b[0])),
    ]
}

/// Decompose the linearization at the origin: one positive real rate, one
/// complex pair with negative real part, saddle quantity positive. Any other
/// spectrum is rejected.
pub fn eigenframe(field: &dyn VectorField) -> Result<EigenFrame> {
    let j = field.jacobian(Vec3::ZERO);
    let v0 = field.eval(Vec3::ZERO);
    if v0.norm() > 1e-10 {
        return Err(Error::SpectrumMismatch(format!(
            "origin is not an equilibrium (|V(0)| = {:.3e})",
            v0.norm()
        )));
    }
    let m = &j.0;
    let tr = m[0][0] + m[1][1] + m[2][2];
    let minors = m[0][0] * m[1][1] - m[0][1] * m[1][0] + m[0][0] * m[2][2] - m[0][2] * m[2][0]
        + m[1][1] * m[2][2]
        - m[1][2] * m[2][1];
    let det = j.det();
    // q(l) = l^3 - tr l^2 + minors l - det
    let q = |l: f64| ((l - tr) * l + minors) * l - det;
    let bound = 1.0 + tr.abs() + minors.abs() + det.abs();
    let u = crate::roots::bisect_scan(&mut |l| q(l), -bound, bound, 1e-14, 4096)
        .map_err(|_| Error::SpectrumMismatch("no real eigenvalue found".into()))?;
    // deflate: l^2 + p l + qq
    let p_lin = u - tr;
    let qq = minors + u * p_lin;
    let disc = p_lin * p_lin - 4.0 * qq;
    if disc >= -1e-16 {
        return Err(Error::SpectrumMismatch(
            "stable pair is real, not a rotation".into(),
        ));
    }
    let sigma = -p_lin / 2.0;
    let mu_abs = (-disc).sqrt() / 2.0;
    if mu_abs < 1e-8 {
        return Err(Error::SpectrumMismatch(
            "rotation rate below tolerance".into(),
        ));
    }
    let params = StabilityParams::new(sigma, mu_abs, u)
        .map_err(|e| Error::SpectrumMismatch(e.to_string()))?;

    // real eigenvector for u: largest cross product of rows of J - uI
    let rows_u: Vec<Vec3> = (0..3)
        .map(|i| {
            Vec3::new(
                m[i][0] - if i == 0 { u } else { 0.0 },
                m[i][1] - if i == 1 { u } else { 0.0 },
                m[i][2] - if i == 2 { u } else { 0.0 },
            )
        })
        .collect();
    let mut w = Vec3::ZERO;
    for (i, k) in [(0, 1), (0, 2), (1, 2)] {
        let a = rows_u[i];
        let b = rows_u[k];
        let c = Vec3::new(
            a.x2 * b.x3 - a.x3 * b.x2,
            a.x3 * b.x1 - a.x1 * b.x3,
            a.x1 * b.x2 - a.x2 * b.x1,
        );
        if c.norm() > w.norm() {
            w = c;
        }
    }
    let w = w
        .normalized()
        .map_err(|_| Error::SpectrumMismatch("degenerate axis eigenvector".into()))?;

    // complex eigenvector for sigma + i mu
    let lam = C64::new(sigma, mu_abs);
    let crow = |i: usize| -> [C64; 3] {
        [
            C64::new(m[i][0], 0.0).sub(if i == 0 { lam } else { C64::new(0.0, 0.0) }),
            C64::new(m[i][1], 0.0).sub(if i == 1 { lam } else { C64::new(0.0, 0.0) }),
            C64::new(m[i][2], 0.0).sub(if i == 2 { lam } else { C64::new(0.0, 0.0) }),
        ]
    };
    let rows = [crow(0), crow(1), crow(2)];
    let mut z = [C64::new(0.0, 0.0); 3];
    let mut best = 0.0;
    for (i, k) in [(0, 1), (0, 2), (1, 2)] {
        let c = cross3(&rows[i], &rows[k]);
        let n: f64 = c.iter().map(|v| v.norm_sq()).sum();
        if n > best {
            best = n;
            z = c;
        }
    }
    if best < 1e-300 {
        return Err(Error::SpectrumMismatch(
            "degenerate stable eigenvector".into(),
        ));
    }
    let mut w1 = Vec3::new(z[0].re, z[1].re, z[2].re);
    let mut w2 = Vec3::new(z[0].im, z[1].im, z[2].im);
    // phase rotation orthogonalizing the real pair keeps the frame well
    // conditioned; a common scale then normalizes the first column
    let theta = 0.5 * (2.0 * w1.dot(w2)).atan2(w2.norm_sq() - w1.norm_sq());
    let (s, c) = theta.sin_cos();
    let w1r = w1 * c - w2 * s;
    let w2r = w1 * s + w2 * c;
    w1 = w1r;
    w2 = w2r;
    let scale = w1.norm();
    if scale < 1e-300 {
        return Err(Error::SpectrumMismatch(
            "degenerate stable eigenvector".into(),
        ));
    }
    w1 = w1 / scale;
    w2 = w2 / scale;

    let b = Mat3::from_columns(w1, w2, w);
    let b_inv = b
        .inverse()
        .map_err(|_| Error::SpectrumMismatch("eigenframe not invertible".into()))?;
    let a = params.a_matrix();
    let residual = b_inv.mul(&j).mul(&b).sub(&a).op_norm();
    if residual > 1e-8 {
        return Err(Error::SpectrumMismatch(format!(
            "conjugation residual {residual:.3e} above tolerance"
        )));
    }
    Ok(EigenFrame {
        b,
        b_inv,
        a,
        params,
        residual,
    })
}

/// The field expressed in the eigenframe: `V~(z) = B^{-1} V(B z)`.
#[derive(Clone, Copy)]
pub struct ConjugatedField<'a> {
    pub base: &'a dyn VectorField,
    pub frame: EigenFrame,
}

impl VectorField for ConjugatedField<'_> {
    fn eval(&self, x: Vec3) -> Vec3 {
        self.frame
            .b_inv
            .mul_vec(self.base.eval(self.frame.b.mul_vec(x)))
    }
    fn jacobian(&self, x: Vec3) -> Mat3 {
        self.frame
            .b_inv
            .mul(&self.base.jacobian(self.frame.b.mul_vec(x)))
            .mul(&self.frame.b)
    }
}

// ---------------------------------------------------------------------------
// Manifold graphs.
// ---------------------------------------------------------------------------

/// C^2 quintic cutoff: 1 on `[0, r]`, 0 beyond `2r`.
#[derive(Clone, Copy, Debug)]
pub struct QuinticCutoff {
    pub radius: f64,
}

impl QuinticCutoff {
    pub fn value(&self, s: f64) -> f64 {
        if s <= self.radius {
            1.0
        } else if s >= 2.0 * self.radius {
            0.0
        } else {
            let x = (s - self.radius) / self.radius;
            1.0 - x * x * x * (10.0 - 15.0 * x + 6.0 * x * x)
        }
    }

    pub fn derivative(&self, s: f64) -> f64 {
        if s <= self.radius || s >= 2.0 * self.radius {
            0.0
        } else {
            let x = (s - self.radius) / self.radius;
            -(30.0 * x * x - 60.0 * x * x * x + 30.0 * x * x * x * x) / self.radius
        }
    }
}

/// Polynomial graph over the stable plane (no constant or linear terms).
#[derive(Clone, Debug, Default)]
pub struct PlanePoly {
    /// `(i, j, coeff)` for monomials `x1^i x2^j`, `i + j >= 2`.
    pub terms: Vec<(u32, u32, f64)>,
}

impl PlanePoly {
    pub fn eval(&self, x1: f64, x2: f64) -> f64 {
        self.terms
            .iter()
            .map(|&(i, j, c)| c * x1.powi(i as i32) * x2.powi(j as i32))
            .sum()
    }

    pub fn gradient(&self, x1: f64, x2: f64) -> (f64, f64) {
        let mut g1 = 0.0;
        let mut g2 = 0.0;
        for &(i, j, c) in &self.terms {
            if i > 0 {
                g1 += c * i as f64 * x1.powi(i as i32 - 1) * x2.powi(j as i32);
            }
            if j > 0 {
                g2 += c * x1.powi(i as i32) * j as f64 * x2.powi(j as i32 - 1);
            }
        }
        (g1, g2)
    }
}

/// Polynomial graph over the axis (two plane components, powers >= 2).
#[derive(Clone, Debug, Default)]
pub struct AxisPoly {
    /// coefficient of `x3^(k+2)` for each component
    pub coeffs1: Vec<f64>,
    pub coeffs2: Vec<f64>,
}

impl AxisPoly {
    pub fn eval(&self, x3: f64) -> (f64, f64) {
        let mut p = x3 * x3;
        let mut v1 = 0.0;
        let mut v2 = 0.0;
        for k in 0..self.coeffs1.len() {
            v1 += self.coeffs1[k] * p;
            v2 += self.coeffs2[k] * p;
            p *= x3;
        }
        (v1, v2)
    }

    pub fn derivative(&self, x3: f64) -> (f64, f64) {
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        for k in 0..self.coeffs1.len() {
            let pw = (k + 2) as f64;
            let p = pw * x3.powi(k as i32 + 1);
            d1 += self.coeffs1[k] * p;
            d2 += self.coeffs2[k] * p;
        }
        (d1, d2)
    }
}

/// Local manifold graphs with their cutoff extension data.
#[derive(Clone, Debug)]
pub struct ManifoldGraph {
    pub stable: PlanePoly,
    pub unstable: AxisPoly,
    pub r_fit: f64,
    pub r_hat: f64,
    pub lambda: f64,
    pub extended: bool,
    /// Largest invariance defect observed on validation samples.
    pub fit_defect: f64,
    /// Set when the requested degree cannot represent curvature.
    pub degenerate_degree: bool,
}

impl ManifoldGraph {
    fn stable_cut(&self) -> QuinticCutoff {
        QuinticCutoff { radius: self.r_hat }
    }

    /// Extended stable graph value (zero beyond twice the cutoff radius).
    pub fn stable_hat(&self, x1: f64, x2: f64) -> f64 {
        let r = x1.hypot(x2);
        let chi = if self.extended {
            self.stable_cut().value(r)
        } else {
            1.0
        };
        chi * self.stable.eval(x1, x2)
    }

    pub fn stable_hat_gradient(&self, x1: f64, x2: f64) -> (f64, f64) {
        let r = x1.hypot(x2);
        let (g1, g2) = self.stable.gradient(x1, x2);
        if !self.extended {
            return (g1, g2);
        }
        let cut = self.stable_cut();
        let chi = cut.value(r);
        let dchi = cut.derivative(r);
        let w = self.stable.eval(x1, x2);
        if r < 1e-300 {
            return (chi * g1, chi * g2);
        }
        (chi * g1 + dchi * x1 / r * w, chi * g2 + dchi * x2 / r * w)
    }

    pub fn unstable_hat(&self, x3: f64) -> (f64, f64) {
        let chi = if self.extended {
            self.stable_cut().value(x3.abs())
        } else {
            1.0
        };
        let (v1, v2) = self.unstable.eval(x3);
        (chi * v1, chi * v2)
    }

    pub fn unstable_hat_derivative(&self, x3: f64) -> (f64, f64) {
        let (d1, d2) = self.unstable.derivative(x3);
        if !self.extended {
            return (d1, d2);
        }
        let cut = self.stable_cut();
        let chi = cut.value(x3.abs());
        let dchi = cut.derivative(x3.abs()) * x3.signum();
        let (v1, v2) = self.unstable.eval(x3);
        (chi * d1 + dchi * v1, chi * d2 + dchi * v2)
    }
}

fn solve_normal_equations(rows: &[Vec<f64>], rhs: &[f64]) -> Result<Vec<f64>> {
    let k = rows.first().map(|r| r.len()).unwrap_or(0);
    if k == 0 || rows.len() < k {
        return Err(Error::FitDiverged(
            "not enough samples for the basis".into(),
        ));
    }
    let mut ata = vec![vec![0.0; k + 1]; k];
    for (row, &b) in rows.iter().zip(rhs.iter()) {
        for i in 0..k {
            for j in 0..k {
                ata[i][j] += row[i] * row[j];
            }
            ata[i][k] += row[i] * b;
        }
    }
    // Gaussian elimination with partial pivoting
    for col in 0..k {
        let piv = (col..k)
            .max_by(|&a, &b| ata[a][col].abs().partial_cmp(&ata[b][col].abs()).unwrap())
            .unwrap();
        if ata[piv][col].abs() < 1e-300 {
            return Err(Error::FitDiverged("singular normal equations".into()));
        }
        ata.swap(col, piv);
        for r in 0..k {
            if r != col {
                let f = ata[r][col] / ata[col][col];
                let (pivot_row, other_row) = if r < col {
                    let (head, tail) = ata.split_at_mut(col);
                    (&tail[0], &mut head[r])
                } else {
                    let (head, tail) = ata.split_at_mut(r);
                    (&head[col], &mut tail[0])
                };
                for (dst, src) in other_row[col..=k].iter_mut().zip(pivot_row[col..=k].iter()) {
                    *dst -= f * src;
                }
            }
        }
    }
    Ok((0..k).map(|i| ata[i][k] / ata[i][i]).collect())
}

fn stable_basis(degree: u32) -> Vec<(u32, u32)> {
    let mut basis = Vec::new();
    for total in 2..=degree {
        for i in 0..=total {
            basis.push((i, total - i));
        }
    }
    basis
}

/// Fit the local stable and unstable graphs of the conjugated field by
/// trajectory regression: ring seeds near the stable plane run backward (the
/// reversed flow contracts the transverse error while the radius grows), and
/// axis seeds run forward. Validation reports the largest invariance defect
/// `|grad w . V_L - V_3|` on graph points.
pub fn fit_local_manifolds(
    field: &ConjugatedField<'_>,
    r: f64,
    degree: u32,
    opts: IntegratorOpts,
) -> Result<ManifoldGraph> {
    if r <= 0.0 {
        return Err(Error::InvalidParameter(
            "fit radius must be positive".into(),
        ));
    }
    if degree < 2 {
        return Ok(ManifoldGraph {
            stable: PlanePoly::default(),
            unstable: AxisPoly::default(),
            r_fit: r,
            r_hat: r / 2.0,
            lambda: 0.0,
            extended: false,
            fit_defect: 0.0,
            degenerate_degree: true,
        });
    }
    let flow = FieldFlow::new(field, opts);
    let rho0 = r / 40.0;
    let basis = stable_basis(degree);
    // Two regression passes: the first seeds on the flat plane itself, the
    // second re-seeds on the fitted graph, which contracts the transverse
    // error quadratically (backward time kills the unstable component while
    // the radius grows).
    let mut stable = PlanePoly::default();
    for _pass in 0..2 {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut rhs: Vec<f64> = Vec::new();
        for seed_idx in 0..8 {
            let ang = std::f64::consts::TAU * seed_idx as f64 / 8.0;
            let (s1, s2) = (rho0 * ang.cos(), rho0 * ang.sin());
            let mut x = Vec3::new(s1, s2, stable.eval(s1, s2));
            for _ in 0..4000 {
                x = flow.eval(-0.05, x)?;
                let radius = x.project_l().norm();
                if radius > r {
                    break;
                }
                if radius > 3.0 * rho0 {
                    rows.push(
                        basis
                            .iter()
                            .map(|&(i, j)| x.x1.powi(i as i32) * x.x2.powi(j as i32))
                            .collect(),
                    );
                    rhs.push(x.x3);
                }
            }
        }
        let coeffs = solve_normal_equations(&rows, &rhs)?;
        stable = PlanePoly {
            terms: basis
                .iter()
                .zip(coeffs.iter())
                .map(|(&(i, j), &c)| (i, j, c))
                .collect(),
        };
    }

    // unstable graph: axis seeds forward, same two-pass scheme
    let mut unstable = AxisPoly {
        coeffs1: vec![0.0; (degree - 1) as usize],
        coeffs2: vec![0.0; (degree - 1) as usize],
    };
    let powers = degree - 1;
    for _pass in 0..2 {
        let mut rows_u1: Vec<Vec<f64>> = Vec::new();
        let mut rhs_u1: Vec<f64> = Vec::new();
        let mut rhs_u2: Vec<f64> = Vec::new();
        for sign in [1.0, -1.0] {
            let (s1, s2) = unstable.eval(sign * rho0);
            let mut x = Vec3::new(s1, s2, sign * rho0);
            for _ in 0..4000 {
                x = flow.eval(0.05, x)?;
                if x.x3.abs() > r {
                    break;
                }
                if x.x3.abs() > 3.0 * rho0 {
                    rows_u1.push((0..powers).map(|k| x.x3.powi(k as i32 + 2)).collect());
                    rhs_u1.push(x.x1);
                    rhs_u2.push(x.x2);
                }
            }
        }
        let coeffs1 = solve_normal_equations(&rows_u1, &rhs_u1)?;
        let coeffs2 = solve_normal_equations(&rows_u1, &rhs_u2)?;
        unstable = AxisPoly { coeffs1, coeffs2 };
    }

    // invariance defect on validation points
    let mut defect = 0.0f64;
    for ri in 1..=4 {
        let radius = r * ri as f64 / 4.0;
        for k in 0..8 {
            let ang = std::f64::consts::TAU * k as f64 / 8.0 + 0.1;
            let (x1, x2) = (radius * ang.cos(), radius * ang.sin());
            let w = stable.eval(x1, x2);
            let (g1, g2) = stable.gradient(x1, x2);
            let v = field.eval(Vec3::new(x1, x2, w));
            defect = defect.max((g1 * v.x1 + g2 * v.x2 - v.x3).abs());
        }
    }
    if defect > 1e-4 {
        return Err(Error::FitDiverged(format!(
            "stable graph invariance defect {defect:.3e} above 1e-4"
        )));
    }
    Ok(ManifoldGraph {
        stable,
        unstable,
        r_fit: r,
        r_hat: r / 2.0,
        lambda: 0.0,
        extended: false,
        fit_defect: defect,
        degenerate_degree: false,
    })
}

/// Extend both graphs by the quintic cutoff at `r_hat`, verifying the global
/// derivative bound by sampling and shrinking the cutoff radius when needed.
pub fn extend_graph(graph: &ManifoldGraph, r_hat: f64, lambda: f64) -> Result<ManifoldGraph> {
    if !(r_hat > 0.0 && r_hat < graph.r_fit) {
        return Err(Error::PreconditionViolated(
            "need 0 < r_hat < fit radius".into(),
        ));
    }
    let mut out = graph.clone();
    out.extended = true;
    out.lambda = lambda;
    let mut r = r_hat;
    let mut achieved = f64::INFINITY;
    for _ in 0..40 {
        out.r_hat = r;
        let mut sup: f64 = 0.0;
        let grid = 48;
        for i in 0..=grid {
            for k in 0..=grid {
                let x1 = -2.2 * r + 4.4 * r * i as f64 / grid as f64;
                let x2 = -2.2 * r + 4.4 * r * k as f64 / grid as f64;
                let (g1, g2) = out.stable_hat_gradient(x1, x2);
                sup = sup.max(g1.hypot(g2));
            }
            let x3 = -2.2 * r + 4.4 * r * i as f64 / grid as f64;
            let (d1, d2) = out.unstable_hat_derivative(x3);
            sup = sup.max(d1.hypot(d2));
        }
        achieved = sup;
        if sup < lambda {
            return Ok(out);
        }
        r *= 0.8;
    }
    Err(Error::LambdaUnachievable {
        requested: lambda,
        achieved,
    })
}

// ---------------------------------------------------------------------------
// Straightening.
// ---------------------------------------------------------------------------

/// The flattening diffeomorphism built from extended graphs.
#[derive(Clone, Debug)]
pub struct Straightener {
    pub graph: ManifoldGraph,
    /// Sampled sup of `|DS - id|`.
    pub deviation: f64,
}

impl Straightener {
    /// Rejects graph pairs whose sampled derivative deviation exceeds 1/2,
    /// since the fixed-point inverse needs the contraction.
    pub fn new(graph: ManifoldGraph) -> Result<Self> {
        if !graph.extended {
            return Err(Error::PreconditionViolated(
                "graphs must be extended first".into(),
            ));
        }
        let mut dev: f64 = 0.0;
        let r = 2.2 * graph.r_hat;
        let grid = 24;
        for i in 0..=grid {
            for j in 0..=grid {
                for k in 0..=grid {
                    let z = Vec3::new(
                        -r + 2.0 * r * i as f64 / grid as f64,
                        -r + 2.0 * r * j as f64 / grid as f64,
                        -r + 2.0 * r * k as f64 / grid as f64,
                    );
                    dev = dev.max(Self::ds_minus_id(&graph, z).op_norm());
                }
            }
        }
        if dev > 0.5 {
            return Err(Error::PreconditionViolated(format!(
                "|DS - id| = {dev:.3} exceeds 1/2"
            )));
        }
        Ok(Straightener {
            graph,
            deviation: dev,
        })
    }

    fn ds_minus_id(graph: &ManifoldGraph, z: Vec3) -> Mat3 {
        let (g1, g2) = graph.stable_hat_gradient(z.x1, z.x2);
        let (d1, d2) = graph.unstable_hat_derivative(z.x3);
        Mat3([[0.0, 0.0, -d1], [0.0, 0.0, -d2], [-g1, -g2, 0.0]])
    }

    /// `S(z) = z - w_s(z_L) e3 - w_u(z_3)`.
    pub fn apply(&self, z: Vec3) -> Vec3 {
        let ws = self.graph.stable_hat(z.x1, z.x2);
        let (u1, u2) = self.graph.unstable_hat(z.x3);
        Vec3::new(z.x1 - u1, z.x2 - u2, z.x3 - ws)
    }

    pub fn jacobian(&self, z: Vec3) -> Mat3 {
        Mat3::identity().add(&Self::ds_minus_id(&self.graph, z))
    }

    /// Inverse by the strict contraction `z -> zeta - (S(z) - z)`.
    pub fn invert(&self, zeta: Vec3) -> Result<Vec3> {
        let mut z = zeta;
        for _ in 0..200 {
            let next = zeta - (self.apply(z) - z);
            let step = (next - z).norm();
            z = next;
            if step < 1e-12 {
                return Ok(z);
            }
        }
        Err(Error::ContractionStalled {
            iters: 200,
            step: (self.apply(z) - zeta).norm(),
        })
    }
}

// ---------------------------------------------------------------------------
// The conjugated flow.
// ---------------------------------------------------------------------------

/// `F(t, x) = S(F_V(t, S^{-1}(x)))` in eigenframe coordinates: a flow with
/// flat local stable/unstable manifolds.
pub struct FlattenedFlow<'a> {
    pub field: ConjugatedField<'a>,
    pub straightener: Straightener,
    pub opts: IntegratorOpts,
}

pub fn conjugate_flow<'a>(
    base: &'a dyn VectorField,
    frame: EigenFrame,
    straightener: Straightener,
    opts: IntegratorOpts,
) -> FlattenedFlow<'a> {
    FlattenedFlow {
        field: ConjugatedField { base, frame },
        straightener,
        opts,
    }
}

impl Flow for FlattenedFlow<'_> {
    fn eval(&self, t: f64, x: Vec3) -> Result<Vec3> {
        let inner = FieldFlow::new(&self.field, self.opts);
        let y0 = self.straightener.invert(x)?;
        let yt = inner.eval(t, y0)?;
        Ok(self.straightener.apply(yt))
    }

    fn jacobian_x(&self, t: f64, x: Vec3) -> Result<Mat3> {
        let inner = FieldFlow::new(&self.field, self.opts);
        let y0 = self.straightener.invert(x)?;
        let yt = inner.eval(t, y0)?;
        let j_inner = inner.jacobian_x(t, y0)?;
        let ds_end = self.straightener.jacobian(yt);
        let ds_start_inv = self.straightener.jacobian(y0).inverse()?;
        Ok(ds_end.mul(&j_inner).mul(&ds_start_inv))
    }

    fn time_derivative(&self, t: f64, x: Vec3) -> Result<Vec3> {
        let inner = FieldFlow::new(&self.field, self.opts);
        let y0 = self.straightener.invert(x)?;
        let yt = inner.eval(t, y0)?;
        Ok(self.straightener.jacobian(yt).mul_vec(self.field.eval(yt)))
    }
}

// ---------------------------------------------------------------------------
// Structure verification.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct StructureReport {
    /// max |F(t, 0)| over the sampled times.
    pub fixed_point_residual: f64,
    /// max |D_2 F(t, 0) - T(t)| over the unit time grid.
    pub block_residual: f64,
    /// Largest ball radius on which both planes stayed invariant, with the
    /// worst transverse residual observed inside it.
    pub invariance_radius: f64,
    pub invariance_residual: f64,
    /// Candidate flowline checks; `None` when no candidate was supplied.
    pub flowline: Option<FlowlineReport>,
}

#[derive(Clone, Debug)]
pub struct FlowlineReport {
    pub nonzero: bool,
    pub decays: bool,
    pub axis_branch_residual: f64,
    pub plane_branch_residual: f64,
    /// Sign of the axis branch (`true` for the positive case).
    pub positive_axis: bool,
}

impl StructureReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.fixed_point_residual < tol
            && self.block_residual < 1e-6
            && self.invariance_radius > 0.0
    }
}

/// Numerical checks of the structural properties the section machinery
/// expects from a flattened flow: fixed origin, block linearization,
/// invariant planes inside a ball (the largest certified radius is
/// reported), and, when a candidate is supplied, the homoclinic flowline's
/// branch memberships and sign case.
pub fn verify_structure(
    flow: &dyn Flow,
    p: &StabilityParams,
    candidate: Option<&HomoclinicData<'_>>,
) -> Result<StructureReport> {
    let mut fixed = 0.0f64;
    for t in [-2.0, -0.5, 0.5, 1.0, 3.0, 7.3] {
        fixed = fixed.max(flow.eval(t, Vec3::ZERO)?.norm());
    }
    let mut block = 0.0f64;
    for i in 0..=8 {
        let t = i as f64 / 8.0;
        let j = flow.jacobian_x(t, Vec3::ZERO)?;
        block = block.max(j.sub(&linear_flow_matrix(p, t)).op_norm());
    }
    let mut invariance_radius = 0.0;
    let mut invariance_residual = 0.0f64;
    for radius in [0.05, 0.1, 0.2, 0.3, 0.4] {
        let mut worst: f64 = 0.0;
        let mut ok = true;
        'outer: for k in 0..6 {
            let ang = std::f64::consts::TAU * k as f64 / 6.0;
            let mut on_l = Vec3::new(0.6 * radius * ang.cos(), 0.6 * radius * ang.sin(), 0.0);
            let mut on_u = Vec3::new(0.0, 0.0, 0.6 * radius * if k % 2 == 0 { 1.0 } else { -1.0 });
            for _ in 0..10 {
                on_l = flow.eval(0.2, on_l)?;
                if on_l.norm() > radius {
                    break;
                }
                worst = worst.max(on_l.x3.abs());
                if on_l.x3.abs() > 1e-8 {
                    ok = false;
                    break 'outer;
                }
            }
            for _ in 0..10 {
                on_u = flow.eval(-0.2, on_u)?;
                if on_u.norm() > radius {
                    break;
                }
                worst = worst.max(on_u.project_l().norm());
                if on_u.project_l().norm() > 1e-8 {
                    ok = false;
                    break 'outer;
                }
            }
        }
        if ok {
            invariance_radius = radius;
            invariance_residual = invariance_residual.max(worst);
        } else {
            break;
        }
    }
    let flowline = match candidate {
        None => None,
        Some(h) => {
            let mut nonzero = true;
            let mut axis_res = 0.0f64;
            let mut plane_res = 0.0f64;
            let span = 3.0 * (h.t_l - h.t_u).max(1.0);
            for i in 0..=40 {
                let s = i as f64 / 40.0;
                let t = h.t_u - span * s;
                axis_res = axis_res.max(h.eval(t)?.project_l().norm());
                let t = h.t_l + span * s;
                plane_res = plane_res.max(h.eval(t)?.x3.abs());
                let t = h.t_u + (h.t_l - h.t_u) * s;
                if h.eval(t)?.norm() < 1e-12 {
                    nonzero = false;
                }
            }
            let tail = h.eval(h.t_l + 2.0 * span)?.norm();
            let head = h.eval(h.t_u - 2.0 * span)?.norm();
            let mid = h.eval(0.5 * (h.t_u + h.t_l))?.norm();
            Some(FlowlineReport {
                nonzero,
                decays: tail < 0.5 * mid && head < 0.5 * mid,
                axis_branch_residual: axis_res,
                plane_branch_residual: plane_res,
                positive_axis: h.eval(h.t_u)?.x3 > 0.0,
            })
        }
    };
    Ok(StructureReport {
        fixed_point_residual: fixed,
        block_residual: block,
        invariance_radius,
        invariance_residual,
        flowline,
    })
}

/// Test field with a curved stable manifold:
/// `V(x) = A x + (0, 0, c (x1^2 + x2^2) chi(|x|))`. Inside the cutoff the
/// stable graph is exactly `c/(2 sigma - u) (x1^2 + x2^2)`.
#[derive(Clone, Copy, Debug)]
pub struct CurvedStableField {
    pub params: StabilityParams,
    pub c: f64,
    pub cutoff: QuinticCutoff,
}

impl CurvedStableField {
    pub fn new(params: StabilityParams, c: f64, cutoff_radius: f64) -> Self {
        CurvedStableField {
            params,
            c,
            cutoff: QuinticCutoff {
                radius: cutoff_radius,
            },
        }
    }
}

impl VectorField for CurvedStableField {
    fn eval(&self, x: Vec3) -> Vec3 {
        let lin = self.params.a_matrix().mul_vec(x);
        let chi = self.cutoff.value(x.norm());
        Vec3::new(
            lin.x1,
            lin.x2,
            lin.x3 + self.c * (x.x1 * x.x1 + x.x2 * x.x2) * chi,
        )
    }

    fn jacobian(&self, x: Vec3) -> Mat3 {
        let mut j = self.params.a_matrix();
        let r = x.norm();
        let chi = self.cutoff.value(r);
        let dchi = self.cutoff.derivative(r);
        let rr = x.x1 * x.x1 + x.x2 * x.x2;
        let (n1, n2, n3) = if r > 1e-300 && dchi != 0.0 {
            (dchi * x.x1 / r, dchi * x.x2 / r, dchi * x.x3 / r)
        } else {
            (0.0, 0.0, 0.0)
        };
        j.0[2][0] += self.c * (2.0 * x.x1 * chi + rr * n1);
        j.0[2][1] += self.c * (2.0 * x.x2 * chi + rr * n2);
        j.0[2][2] += self.c * rr * n3;
        j
    }
}
