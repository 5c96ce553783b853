//! The flow abstraction and its concrete backends.
//!
//! Three flows matter here: the exact linear flow `T(t)` (the zero-deviation
//! reference), an integrated nonlinear model field realizing the same local
//! block structure, and closed-form affine spirals used to wire up exterior
//! section maps. Scaling `F_eps(t,x) = F(t, eps x)/eps` zooms into the
//! equilibrium; the deviation of the scaled Jacobian from `T(t)` over the
//! unit box is the quantity `eta` that drives every estimate downstream.

use crate::error::{Error, Result};
use crate::geometry::{
    box_constants, in_b1, linear_flow, linear_flow_matrix, Mat3, StabilityParams, Vec3,
};

/// Evaluable flow with spatial derivative. `eval(0, x) = x`, `eval(t, 0) = 0`
/// for the flows near the equilibrium, and the flow property
/// `eval(t+s, x) = eval(t, eval(s, x))` holds to integration accuracy.
pub trait Flow {
    fn eval(&self, t: f64, x: Vec3) -> Result<Vec3>;

    /// Spatial derivative `D_2 F(t, x)` as a matrix.
    fn jacobian_x(&self, t: f64, x: Vec3) -> Result<Mat3>;

    /// Time derivative `d/dt F(t, x)`. Default: central difference.
    fn time_derivative(&self, t: f64, x: Vec3) -> Result<Vec3> {
        let h = 1e-6;
        let a = self.eval(t + h, x)?;
        let b = self.eval(t - h, x)?;
        Ok((a - b) / (2.0 * h))
    }
}

impl Flow for &dyn Flow {
    fn eval(&self, t: f64, x: Vec3) -> Result<Vec3> {
        (**self).eval(t, x)
    }
    fn jacobian_x(&self, t: f64, x: Vec3) -> Result<Mat3> {
        (**self).jacobian_x(t, x)
    }
    fn time_derivative(&self, t: f64, x: Vec3) -> Result<Vec3> {
        (**self).time_derivative(t, x)
    }
}

/// The closed-form linear flow `F(t, x) = T(t) x`. Scaling leaves it fixed,
/// so it doubles as its own scaled flow for every epsilon.
#[derive(Clone, Copy, Debug)]
pub struct LinearFlow {
    pub params: StabilityParams,
}

impl LinearFlow {
    pub fn new(params: StabilityParams) -> Self {
        LinearFlow { params }
    }
}

impl Flow for LinearFlow {
    fn eval(&self, t: f64, x: Vec3) -> Result<Vec3> {
        Ok(linear_flow(&self.params, t, x))
    }

    fn jacobian_x(&self, t: f64, _x: Vec3) -> Result<Mat3> {
        Ok(linear_flow_matrix(&self.params, t))
    }

    fn time_derivative(&self, t: f64, x: Vec3) -> Result<Vec3> {
        Ok(self
            .params
            .a_matrix()
            .mul_vec(linear_flow(&self.params, t, x)))
    }
}

/// Autonomous C^1 vector field with Jacobian.
pub trait VectorField {
    fn eval(&self, x: Vec3) -> Vec3;
    fn jacobian(&self, x: Vec3) -> Mat3;
}

impl VectorField for &dyn VectorField {
    fn eval(&self, x: Vec3) -> Vec3 {
        (**self).eval(x)
    }
    fn jacobian(&self, x: Vec3) -> Mat3 {
        (**self).jacobian(x)
    }
}

/// Plain linear field `V(x) = M x`.
#[derive(Clone, Copy, Debug)]
pub struct LinearField {
    pub m: Mat3,
}

impl VectorField for LinearField {
    fn eval(&self, x: Vec3) -> Vec3 {
        self.m.mul_vec(x)
    }
    fn jacobian(&self, _x: Vec3) -> Mat3 {
        self.m
    }
}

/// C^1 cubic cutoff: identically 1 on `[0, radius]`, identically 0 beyond
/// `2 radius`, cubic smoothstep between.
#[derive(Clone, Copy, Debug)]
pub struct CubicCutoff {
    pub radius: f64,
}

impl CubicCutoff {
    pub fn value(&self, s: f64) -> f64 {
        if s <= self.radius {
            1.0
        } else if s >= 2.0 * self.radius {
            0.0
        } else {
            let xi = (s - self.radius) / self.radius;
            1.0 - xi * xi * (3.0 - 2.0 * xi)
        }
    }

    pub fn derivative(&self, s: f64) -> f64 {
        if s <= self.radius || s >= 2.0 * self.radius {
            0.0
        } else {
            let xi = (s - self.radius) / self.radius;
            -(6.0 * xi - 6.0 * xi * xi) / self.radius
        }
    }
}

/// Concrete nonlinear field `V(x) = A x + q(x)` with
/// `q(x) = c_q x3^2 chi(|x|) (-x2, x1, 0)`. The perturbation vanishes on both
/// invariant subspaces together with its derivative at 0, so the flow keeps
/// the (F1), (F3), (F4) structure while being genuinely nonlinear off axis.
#[derive(Clone, Copy, Debug)]
pub struct ModelField {
    pub params: StabilityParams,
    pub c_q: f64,
    pub cutoff: CubicCutoff,
}

impl ModelField {
    pub fn new(params: StabilityParams, c_q: f64, cutoff_radius: f64) -> Result<Self> {
        if c_q < 0.0 || !c_q.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "c_q must be >= 0, got {c_q}"
            )));
        }
        if cutoff_radius <= 0.0 {
            return Err(Error::InvalidParameter(
                "cutoff radius must be positive".into(),
            ));
        }
        Ok(ModelField {
            params,
            c_q,
            cutoff: CubicCutoff {
                radius: cutoff_radius,
            },
        })
    }
}

impl VectorField for ModelField {
    fn eval(&self, x: Vec3) -> Vec3 {
        let lin = self.params.a_matrix().mul_vec(x);
        let r = x.norm();
        let chi = self.cutoff.value(r);
        let f = self.c_q * x.x3 * x.x3 * chi;
        Vec3::new(lin.x1 - f * x.x2, lin.x2 + f * x.x1, lin.x3)
    }

    fn jacobian(&self, x: Vec3) -> Mat3 {
        let mut j = self.params.a_matrix();
        let r = x.norm();
        let chi = self.cutoff.value(r);
        let dchi = self.cutoff.derivative(r);
        let c = self.c_q;
        let x3sq = x.x3 * x.x3;
        // grad of chi(|x|): dchi * x / r (zero on the plateau).
        let (g1, g2, g3) = if r > 1e-300 && dchi != 0.0 {
            (dchi * x.x1 / r, dchi * x.x2 / r, dchi * x.x3 / r)
        } else {
            (0.0, 0.0, 0.0)
        };
        // q1 = -c x3^2 chi x2
        j.0[0][0] += -c * x3sq * g1 * x.x2;
        j.0[0][1] += -c * x3sq * (g2 * x.x2 + chi);
        j.0[0][2] += -c * (2.0 * x.x3 * chi + x3sq * g3) * x.x2;
        // q2 = c x3^2 chi x1
        j.0[1][0] += c * x3sq * (g1 * x.x1 + chi);
        j.0[1][1] += c * x3sq * g2 * x.x1;
        j.0[1][2] += c * (2.0 * x.x3 * chi + x3sq * g3) * x.x1;
        j
    }
}

/// `V_eps(x) = V(eps x)/eps`, the field whose flow is the scaled flow.
#[derive(Clone, Copy)]
pub struct ScaledField<'a> {
    pub base: &'a dyn VectorField,
    pub epsilon: f64,
}

impl VectorField for ScaledField<'_> {
    fn eval(&self, x: Vec3) -> Vec3 {
        self.base.eval(x * self.epsilon) / self.epsilon
    }
    fn jacobian(&self, x: Vec3) -> Mat3 {
        self.base.jacobian(x * self.epsilon)
    }
}

/// `F_eps(t, x) = F(t, eps x)/eps` for an arbitrary flow backend. The
/// Jacobian identity `D_2 F_eps(t, x) = D_2 F(t, eps x)` is built in.
#[derive(Clone, Copy)]
pub struct ScaledFlow<'a> {
    pub base: &'a dyn Flow,
    pub epsilon: f64,
}

impl Flow for ScaledFlow<'_> {
    fn eval(&self, t: f64, x: Vec3) -> Result<Vec3> {
        Ok(self.base.eval(t, x * self.epsilon)? / self.epsilon)
    }
    fn jacobian_x(&self, t: f64, x: Vec3) -> Result<Mat3> {
        self.base.jacobian_x(t, x * self.epsilon)
    }
    fn time_derivative(&self, t: f64, x: Vec3) -> Result<Vec3> {
        Ok(self.base.time_derivative(t, x * self.epsilon)? / self.epsilon)
    }
}

/// Integrator controls shared by every field-backed flow.
#[derive(Clone, Copy, Debug)]
pub struct IntegratorOpts {
    pub rtol: f64,
    pub max_steps: usize,
}

impl Default for IntegratorOpts {
    fn default() -> Self {
        IntegratorOpts {
            rtol: 1e-11,
            max_steps: 2_000_000,
        }
    }
}

const DOPRI_A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DOPRI_C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DOPRI_E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

/// Dormand-Prince 5(4) with step control against per-group relative scales.
/// The planar pair shares one scale and the axis another, because individual
/// components pass through zero while the whole group keeps its magnitude;
/// the variational block (indices 3..) shares a third.
fn dopri5<F>(f: F, t0: f64, t1: f64, y: &mut [f64], opts: &IntegratorOpts) -> Result<usize>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let span = (t1 - t0).abs();
    if span == 0.0 {
        return Ok(0);
    }
    let floor = 1e-290;
    let scales = |a: &[f64], b: &[f64]| -> [f64; 3] {
        let pl = (a[0].hypot(a[1])).max(b[0].hypot(b[1]));
        let ax = a[2].abs().max(b[2].abs());
        let var = if n > 3 {
            let fa: f64 = a[3..].iter().map(|v| v * v).sum::<f64>().sqrt();
            let fb: f64 = b[3..].iter().map(|v| v * v).sum::<f64>().sqrt();
            fa.max(fb)
        } else {
            0.0
        };
        // Components of very different magnitude within a group would be
        // over-controlled; couple the two spatial groups loosely so a group
        // passing through zero stays integrable.
        let couple = 1e-8 * pl.max(ax).max(1e-30);
        [pl.max(couple) + floor, ax.max(couple) + floor, var + floor]
    };
    let group = |i: usize| -> usize {
        match i {
            0 | 1 => 0,
            2 => 1,
            _ => 2,
        }
    };

    let mut t = t0;
    let mut h = dir * (span / 100.0).clamp(1e-8, 0.1);
    let mut k: [Vec<f64>; 7] = Default::default();
    for ki in &mut k {
        ki.resize(n, 0.0);
    }
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut steps = 0usize;
    f(t, y, &mut k[0]);

    while (t1 - t) * dir > 0.0 {
        if steps >= opts.max_steps {
            return Err(Error::IntegrationBudgetExceeded { steps, t });
        }
        // a step clamped onto the boundary is always attempted, however
        // small the leftover is; the collapse guard below applies only to
        // error-driven shrinking
        let mut boundary = false;
        if (t + h - t1) * dir > 0.0 {
            h = t1 - t;
            boundary = true;
        }
        for s in 0..6 {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(s + 1) {
                    acc += DOPRI_A[s][j] * kj[i];
                }
                ytmp[i] = y[i] + h * acc;
            }
            f(t + DOPRI_C[s] * h, &ytmp, &mut k[s + 1]);
        }
        // 5th order solution is stage row 6 of A (FSAL layout).
        for i in 0..n {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate().take(6) {
                acc += DOPRI_A[5][j] * kj[i];
            }
            ynew[i] = y[i] + h * acc;
        }
        let sc = scales(y, &ynew);
        let mut err_sq = 0.0;
        for i in 0..n {
            let mut e = 0.0;
            for (j, kj) in k.iter().enumerate() {
                e += DOPRI_E[j] * kj[i];
            }
            e *= h;
            let w = e / (opts.rtol * sc[group(i)]);
            err_sq += w * w;
        }
        let err = (err_sq / n as f64).sqrt();
        if err <= 1.0 {
            t = if boundary { t1 } else { t + h };
            y.copy_from_slice(&ynew);
            let (head, rest) = k.split_at_mut(1);
            head[0].copy_from_slice(&rest[5]);
            steps += 1;
            if boundary {
                break;
            }
        }
        let fac = if err > 0.0 { 0.9 * err.powf(-0.2) } else { 5.0 };
        h *= fac.clamp(0.2, 5.0);
        if h.abs() < 1e-14 * span && err > 1.0 {
            return Err(Error::IntegrationBudgetExceeded { steps, t });
        }
    }
    Ok(steps)
}

/// Flow of a vector field by adaptive integration. The Jacobian evaluates
/// the variational equation alongside the state.
#[derive(Clone, Copy)]
pub struct FieldFlow<'a> {
    pub field: &'a dyn VectorField,
    pub opts: IntegratorOpts,
}

impl<'a> FieldFlow<'a> {
    pub fn new(field: &'a dyn VectorField, opts: IntegratorOpts) -> Self {
        FieldFlow { field, opts }
    }
}

impl Flow for FieldFlow<'_> {
    fn eval(&self, t: f64, x: Vec3) -> Result<Vec3> {
        let mut y = [x.x1, x.x2, x.x3];
        let field = self.field;
        dopri5(
            |_t, y, dy| {
                let v = field.eval(Vec3::new(y[0], y[1], y[2]));
                dy[0] = v.x1;
                dy[1] = v.x2;
                dy[2] = v.x3;
            },
            0.0,
            t,
            &mut y,
            &self.opts,
        )?;
        Ok(Vec3::new(y[0], y[1], y[2]))
    }

    fn jacobian_x(&self, t: f64, x: Vec3) -> Result<Mat3> {
        let mut y = [0.0; 12];
        y[0] = x.x1;
        y[1] = x.x2;
        y[2] = x.x3;
        y[3] = 1.0;
        y[7] = 1.0;
        y[11] = 1.0;
        let field = self.field;
        dopri5(
            |_t, y, dy| {
                let p = Vec3::new(y[0], y[1], y[2]);
                let v = field.eval(p);
                let j = field.jacobian(p);
                dy[0] = v.x1;
                dy[1] = v.x2;
                dy[2] = v.x3;
                // columns of the variational matrix: J' = DV(x) J
                for col in 0..3 {
                    let c = Vec3::new(y[3 + col], y[6 + col], y[9 + col]);
                    let jc = j.mul_vec(c);
                    dy[3 + col] = jc.x1;
                    dy[6 + col] = jc.x2;
                    dy[9 + col] = jc.x3;
                }
            },
            0.0,
            t,
            &mut y,
            &self.opts,
        )?;
        Ok(Mat3([
            [y[3], y[4], y[5]],
            [y[6], y[7], y[8]],
            [y[9], y[10], y[11]],
        ]))
    }

    fn time_derivative(&self, t: f64, x: Vec3) -> Result<Vec3> {
        Ok(self.field.eval(self.eval(t, x)?))
    }
}

/// Closed-form affine flow `F(t, y) = q + R(t)(y - q)` with a block rotation
/// `R(t)` around the off-origin fixed point `q`. A slowly contracting, fast
/// turning choice re-enters the unit cylinder transversally, which is
/// exactly the behaviour an exterior map needs; see
/// [`AffineFlow::exterior_reference`].
#[derive(Clone, Copy, Debug)]
pub struct AffineFlow {
    pub center: Vec3,
    pub sigma_hat: f64,
    pub mu_hat: f64,
    pub nu_hat: f64,
}

impl AffineFlow {
    fn block(&self, t: f64) -> Mat3 {
        let es = (self.sigma_hat * t).exp();
        let (s, c) = (self.mu_hat * t).sin_cos();
        Mat3([
            [es * c, es * s, 0.0],
            [-es * s, es * c, 0.0],
            [0.0, 0.0, (self.nu_hat * t).exp()],
        ])
    }

    fn generator(&self) -> Mat3 {
        Mat3([
            [self.sigma_hat, self.mu_hat, 0.0],
            [-self.mu_hat, self.sigma_hat, 0.0],
            [0.0, 0.0, self.nu_hat],
        ])
    }

    /// Reference exterior vehicle: spiral slowly in around `(q1, 0)` while
    /// turning fast, so the orbit of `e3` leaves the unit cylinder and
    /// re-enters it with strictly decreasing radius. The axis center `q3` is
    /// then solved so that the re-entry lands exactly on the plane `x3 = 0`.
    /// Returns the flow, the travel time of `e3` to the cylinder, and the
    /// landing angle.
    pub fn exterior_reference() -> Result<(AffineFlow, f64, f64)> {
        let sigma_hat = -0.15;
        let mu_hat = 3.0;
        let nu_hat = -0.5;
        let q1 = 2.5;
        // |P_L F(t, e3)|^2 - 1 with the planar center (q1, 0); q3 does not
        // enter the planar components.
        let f = |t: f64| {
            let es = (sigma_hat * t).exp();
            q1 * q1 * (1.0 + es * es - 2.0 * es * (mu_hat * t).cos()) - 1.0
        };
        // First re-entry: scan for the first + -> - sign change after the
        // orbit has left the cylinder.
        let mut t_star = None;
        let n = 4000;
        let t_max = 8.0;
        let mut prev = f(0.0);
        for i in 1..=n {
            let t = t_max * i as f64 / n as f64;
            let cur = f(t);
            if prev > 0.0 && cur <= 0.0 {
                t_star = Some(crate::roots::bisect(
                    f,
                    t - t_max / n as f64,
                    t,
                    1e-14,
                    200,
                )?);
                break;
            }
            prev = cur;
        }
        let t_star = t_star.ok_or(Error::NoBracket { a: 0.0, b: t_max })?;
        // e^{nu t*}(1 - q3) + q3 = 0
        let decay = (nu_hat * t_star).exp();
        let q3 = -decay / (1.0 - decay);
        let flow = AffineFlow {
            center: Vec3::new(q1, 0.0, q3),
            sigma_hat,
            mu_hat,
            nu_hat,
        };
        let landing = flow.eval(t_star, Vec3::e3())?;
        Ok((flow, t_star, landing.angle_l()))
    }
}

impl Flow for AffineFlow {
    fn eval(&self, t: f64, y: Vec3) -> Result<Vec3> {
        Ok(self.center + self.block(t).mul_vec(y - self.center))
    }
    fn jacobian_x(&self, t: f64, _y: Vec3) -> Result<Mat3> {
        Ok(self.block(t))
    }
    fn time_derivative(&self, t: f64, y: Vec3) -> Result<Vec3> {
        let pos = self.eval(t, y)?;
        Ok(self.generator().mul_vec(pos - self.center))
    }
}

// ---------------------------------------------------------------------------
// Closeness of the scaled flow to its linearization.
// ---------------------------------------------------------------------------

/// Grid supremum of `|D_2 F_eps(t, x) - T(t)|` over `[0,1] x B_1`.
#[derive(Clone, Copy, Debug)]
pub struct EtaEstimate {
    pub eta: f64,
    pub argmax_t: f64,
    pub argmax_x: Vec3,
}

pub fn estimate_eta(
    flow: &dyn Flow,
    p: &StabilityParams,
    spatial: usize,
    temporal: usize,
) -> Result<EtaEstimate> {
    let mut best = EtaEstimate {
        eta: 0.0,
        argmax_t: 0.0,
        argmax_x: Vec3::ZERO,
    };
    for it in 0..temporal {
        let t = it as f64 / (temporal.max(2) - 1) as f64;
        let t_mat = linear_flow_matrix(p, t);
        for i1 in 0..spatial {
            let x1 = -1.0 + 2.0 * i1 as f64 / (spatial - 1) as f64;
            for i2 in 0..spatial {
                let x2 = -1.0 + 2.0 * i2 as f64 / (spatial - 1) as f64;
                if x1 * x1 + x2 * x2 > 1.0 + 1e-12 {
                    continue;
                }
                for i3 in 0..spatial {
                    let x3 = -1.0 + 2.0 * i3 as f64 / (spatial - 1) as f64;
                    let x = Vec3::new(x1, x2, x3);
                    let dev = flow.jacobian_x(t, x)?.sub(&t_mat).op_norm();
                    if dev > best.eta {
                        best = EtaEstimate {
                            eta: dev,
                            argmax_t: t,
                            argmax_x: x,
                        };
                    }
                }
            }
        }
    }
    Ok(best)
}

/// Coarse and refined estimates; doubling the grid should move the supremum
/// by less than 10% when the grid resolves the deviation field.
pub fn estimate_eta_refined(
    flow: &dyn Flow,
    p: &StabilityParams,
    spatial: usize,
    temporal: usize,
) -> Result<(EtaEstimate, EtaEstimate)> {
    let coarse = estimate_eta(flow, p, spatial, temporal)?;
    let fine = estimate_eta(flow, p, 2 * spatial - 1, 2 * temporal - 1)?;
    Ok((coarse, fine))
}

/// One verified inequality: `lhs <= rhs` up to floating-point slack.
#[derive(Clone, Copy, Debug)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub ok: bool,
}

const FP_SLACK: f64 = 1e-12;

fn le(lhs: f64, rhs: f64) -> BoundCheck {
    // Absolute + relative slack so exact-equality cases (the linear model)
    // pass despite rounding.
    let ok = lhs <= rhs + FP_SLACK * (1.0 + rhs.abs());
    BoundCheck { lhs, rhs, ok }
}

/// Component-wise closeness report for one `(t, x)`: deviation bounds on the
/// two projections and the two-sided growth sandwiches.
#[derive(Clone, Copy, Debug)]
pub struct SandwichReport {
    pub dev_u: BoundCheck,
    pub dev_l: BoundCheck,
    pub grow_u_lower: BoundCheck,
    pub grow_u_upper: BoundCheck,
    pub grow_l_lower: BoundCheck,
    pub grow_l_upper: BoundCheck,
}

impl SandwichReport {
    pub fn all_ok(&self) -> bool {
        self.dev_u.ok
            && self.dev_l.ok
            && self.grow_u_lower.ok
            && self.grow_u_upper.ok
            && self.grow_l_lower.ok
            && self.grow_l_upper.ok
    }
}

pub fn check_sandwich(
    flow: &dyn Flow,
    p: &StabilityParams,
    eta: f64,
    x: Vec3,
    t: f64,
) -> Result<SandwichReport> {
    if !in_b1(x) {
        return Err(Error::PreconditionViolated(format!("x not in B_1: {x:?}")));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::PreconditionViolated(format!(
            "t = {t} outside [0, 1]"
        )));
    }
    let y = flow.eval(t, x)?;
    let tx = linear_flow(p, t, x);
    let pl = x.project_l().norm();
    let pu = x.project_u().norm();
    let eu = (p.u * t).exp();
    let es = (p.sigma * t).exp();
    Ok(SandwichReport {
        dev_u: le((y.project_u() - tx.project_u()).norm(), eta * pu),
        dev_l: le((y.project_l() - tx.project_l()).norm(), eta * pl),
        grow_u_lower: le((eu - eta) * pu, y.project_u().norm()),
        grow_u_upper: le(y.project_u().norm(), (eu + eta) * pu),
        grow_l_lower: le((es - eta) * pl, y.project_l().norm()),
        grow_l_upper: le(y.project_l().norm(), (es + eta) * pl),
    })
}

/// Per-step record of the unit-box iteration.
#[derive(Clone, Copy, Debug)]
pub struct StepBounds {
    pub step: usize,
    pub in_unit_box: bool,
    pub l_lower: BoundCheck,
    pub l_upper: BoundCheck,
    pub u_lower: BoundCheck,
    pub u_upper: BoundCheck,
}

#[derive(Clone, Debug)]
pub struct BoxIterationReport {
    pub steps: Vec<StepBounds>,
    /// Bounds at fractional times `t + n` for sampled `t` in `[0, 1]`.
    pub tail: Vec<StepBounds>,
}

impl BoxIterationReport {
    pub fn all_ok(&self) -> bool {
        self.steps
            .iter()
            .chain(self.tail.iter())
            .all(|s| s.in_unit_box && s.l_lower.ok && s.l_upper.ok && s.u_lower.ok && s.u_upper.ok)
    }
}

/// Iterate the scaled flow in unit steps, verifying that the trajectory
/// stays in the unit box and obeys the two-sided product bounds
/// `e^{sigma j}(1 -+ eta e^{-sigma})^j` and `e^{u j}(1 -+ eta)^j`.
pub fn iterate_box(
    flow: &dyn Flow,
    p: &StabilityParams,
    eta: f64,
    x: Vec3,
    n: usize,
) -> Result<BoxIterationReport> {
    let es = p.sigma.exp();
    if !(0.0..es).contains(&eta) || es + eta >= 1.0 {
        return Err(Error::PreconditionViolated(format!(
            "need 0 <= eta < e^sigma and e^sigma + eta < 1, got eta = {eta}"
        )));
    }
    if !in_b1(x) {
        return Err(Error::PreconditionViolated(format!("x not in B_1: {x:?}")));
    }
    let pl0 = x.project_l().norm();
    let pu0 = x.project_u().norm();
    let em = (-p.sigma).exp();
    let mut steps = Vec::with_capacity(n);
    let mut y = x;
    for j in 0..n {
        let next = flow.eval(1.0, y)?;
        if next.project_u().norm() > 1.0 + FP_SLACK {
            return Err(Error::HypothesisFailed {
                step: j,
                what: format!(
                    "|P_U F_eps({}, x)| = {} > 1",
                    j + 1,
                    next.project_u().norm()
                ),
            });
        }
        y = next;
        let jj = (j + 1) as f64;
        let esj = (p.sigma * jj).exp();
        let euj = (p.u * jj).exp();
        steps.push(StepBounds {
            step: j + 1,
            in_unit_box: in_b1(y),
            l_lower: le(esj * (1.0 - eta * em).powf(jj) * pl0, y.project_l().norm()),
            l_upper: le(y.project_l().norm(), esj * (1.0 + eta * em).powf(jj) * pl0),
            u_lower: le(euj * (1.0 - eta).powf(jj) * pu0, y.project_u().norm()),
            u_upper: le(y.project_u().norm(), euj * (1.0 + eta).powf(jj) * pu0),
        });
    }
    let mut tail = Vec::new();
    let pw = (n + 1) as f64;
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let z = flow.eval(t, y)?;
        let tn = t + n as f64;
        let est = (p.sigma * tn).exp();
        let eut = (p.u * tn).exp();
        tail.push(StepBounds {
            step: n,
            in_unit_box: true,
            l_lower: le(est * (1.0 - eta * em).powf(pw) * pl0, z.project_l().norm()),
            l_upper: le(z.project_l().norm(), est * (1.0 + eta * em).powf(pw) * pl0),
            u_lower: le(eut * (1.0 - eta).powf(pw) * pu0, z.project_u().norm()),
            u_upper: le(z.project_u().norm(), eut * (1.0 + eta).powf(pw) * pu0),
        });
    }
    Ok(BoxIterationReport { steps, tail })
}

#[derive(Clone, Debug)]
pub struct ExpBoundsReport {
    pub conditions: [BoundCheck; 4],
    pub tail: Vec<StepBounds>,
}

impl ExpBoundsReport {
    pub fn all_ok(&self) -> bool {
        self.conditions.iter().all(|c| c.ok)
            && self
                .tail
                .iter()
                .all(|s| s.l_lower.ok && s.l_upper.ok && s.u_lower.ok && s.u_upper.ok)
    }
}

/// Exponential sandwich with uniform rates `sigma -+ eta_tilde`,
/// `u -+ eta_tilde`, valid once the logarithmic smallness conditions on
/// `eta` and `n` hold. The failing condition is named in the error.
pub fn exp_bounds(
    flow: &dyn Flow,
    p: &StabilityParams,
    eta_tilde: f64,
    eta: f64,
    n: usize,
    x: Vec3,
) -> Result<ExpBoundsReport> {
    if n == 0 {
        return Err(Error::PreconditionViolated("need n >= 1".into()));
    }
    let em = (-p.sigma).exp();
    let log_up = (1.0 + eta * em).ln();
    let log_down = (1.0 / (1.0 - eta * em)).ln();
    let ratio = (n as f64 + 1.0) / n as f64;
    let conditions = [
        BoundCheck {
            lhs: log_up,
            rhs: eta_tilde,
            ok: log_up < eta_tilde,
        },
        BoundCheck {
            lhs: log_down,
            rhs: eta_tilde,
            ok: log_down < eta_tilde,
        },
        BoundCheck {
            lhs: ratio * log_up,
            rhs: eta_tilde,
            ok: ratio * log_up < eta_tilde,
        },
        BoundCheck {
            lhs: ratio * log_down,
            rhs: eta_tilde,
            ok: ratio * log_down < eta_tilde,
        },
    ];
    let names = [
        "log(1 + eta e^{-sigma}) < eta_tilde",
        "log(1/(1 - eta e^{-sigma})) < eta_tilde",
        "(n+1)/n log(1 + eta e^{-sigma}) < eta_tilde",
        "(n+1)/n log(1/(1 - eta e^{-sigma})) < eta_tilde",
    ];
    for (i, c) in conditions.iter().enumerate() {
        if !c.ok {
            return Err(Error::HypothesisFailed {
                step: i,
                what: names[i].into(),
            });
        }
    }
    // March to F_eps(n, x) under the unit-box hypothesis.
    let mut y = x;
    for j in 0..n {
        let next = flow.eval(1.0, y)?;
        if next.project_u().norm() > 1.0 + FP_SLACK {
            return Err(Error::HypothesisFailed {
                step: j,
                what: format!("|P_U F_eps({}, x)| > 1", j + 1),
            });
        }
        y = next;
    }
    let pl0 = x.project_l().norm();
    let pu0 = x.project_u().norm();
    let mut tail = Vec::new();
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let z = flow.eval(t, y)?;
        let tn = t + n as f64;
        tail.push(StepBounds {
            step: n,
            in_unit_box: true,
            l_lower: le(
                ((p.sigma - eta_tilde) * tn).exp() * pl0,
                z.project_l().norm(),
            ),
            l_upper: le(
                z.project_l().norm(),
                ((p.sigma + eta_tilde) * tn).exp() * pl0,
            ),
            u_lower: le(((p.u - eta_tilde) * tn).exp() * pu0, z.project_u().norm()),
            u_upper: le(z.project_u().norm(), ((p.u + eta_tilde) * tn).exp() * pu0),
        });
    }
    Ok(ExpBoundsReport { conditions, tail })
}

/// Largest scaling for which a measured deviation stays below `target`.
/// Searches downward from `cap` and then bisects the boundary; monotonicity
/// in epsilon is verified on the two final probes rather than assumed.
pub fn epsilon_cap_by(
    mut measure: impl FnMut(f64) -> Result<f64>,
    target: f64,
    cap: f64,
) -> Result<f64> {
    let mut hi = cap;
    let mut eta_hi = measure(hi)?;
    if eta_hi <= target {
        return Ok(cap);
    }
    let mut lo = hi;
    let mut eta_lo = eta_hi;
    for _ in 0..60 {
        lo /= 2.0;
        eta_lo = measure(lo)?;
        if eta_lo <= target {
            break;
        }
        hi = lo;
        eta_hi = eta_lo;
    }
    if eta_lo > target {
        return Err(Error::PreconditionViolated(format!(
            "deviation never reached target {target} (last {eta_lo} at eps {lo})"
        )));
    }
    if eta_lo > eta_hi {
        return Err(Error::EnvelopeViolated(format!(
            "eta not monotone in epsilon: eta({lo}) = {eta_lo} > eta({hi}) = {eta_hi}"
        )));
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if measure(mid)? <= target {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) < 1e-3 * lo {
            break;
        }
    }
    Ok(lo)
}

/// [`epsilon_cap_by`] with the grid deviation of a scaled field flow as the
/// measurement.
pub fn epsilon_for_eta(
    field: &dyn VectorField,
    p: &StabilityParams,
    target: f64,
    spatial: usize,
    temporal: usize,
    opts: IntegratorOpts,
    cap: f64,
) -> Result<f64> {
    epsilon_cap_by(
        |eps| {
            let scaled = ScaledField {
                base: field,
                epsilon: eps,
            };
            let flow = FieldFlow::new(&scaled, opts);
            Ok(estimate_eta(&flow, p, spatial, temporal)?.eta)
        },
        target,
        cap,
    )
}

/// Sampled check that a scaled flow maps the unit box into the outer box
/// over one time unit and keeps the invariant planes invariant there.
pub fn box_probe(flow: &dyn Flow, r_outer: f64) -> Result<bool> {
    for it in 0..=4 {
        let t = it as f64 / 4.0;
        for i in 0..5 {
            let ang = 2.0 * std::f64::consts::PI * i as f64 / 5.0;
            for &x3 in &[-1.0, -0.3, 0.0, 0.5, 1.0] {
                let x = Vec3::new(ang.cos(), ang.sin(), x3);
                if flow.eval(t, x)?.norm() > r_outer {
                    return Ok(false);
                }
            }
            // invariance probes
            let on_l = Vec3::new(ang.cos(), ang.sin(), 0.0);
            if flow.eval(t, on_l)?.x3.abs() > 1e-9 {
                return Ok(false);
            }
        }
        let on_u = Vec3::new(0.0, 0.0, 0.8);
        if flow.eval(t, on_u)?.project_l().norm() > 1e-9 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Largest scaling passing a box-compatibility probe, by halving from `cap`.
pub fn epsilon_box_by(mut passes: impl FnMut(f64) -> Result<bool>, cap: f64) -> Result<f64> {
    let mut eps = cap;
    for _ in 0..60 {
        if passes(eps)? {
            return Ok(eps);
        }
        eps /= 2.0;
    }
    Err(Error::PreconditionViolated(
        "no box-compatible epsilon found".into(),
    ))
}

/// [`epsilon_box_by`] over scaled field flows.
pub fn epsilon_box(
    field: &dyn VectorField,
    p: &StabilityParams,
    opts: IntegratorOpts,
    cap: f64,
) -> Result<f64> {
    let r_b = box_constants(p).r_outer;
    epsilon_box_by(
        |eps| {
            let scaled = ScaledField {
                base: field,
                epsilon: eps,
            };
            let flow = FieldFlow::new(&scaled, opts);
            box_probe(&flow, r_b)
        },
        cap,
    )
}
