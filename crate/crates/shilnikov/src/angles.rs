//! Angles along projected flowlines.
//!
//! Over one time unit the planar projection of a flowline tracks the
//! linearized rotation up to a correction `Delta = arcsin(<v, w_perp>)`
//! bounded by `arcsin(eta / (e^sigma - eta))`. Chaining the corrections over
//! unit steps produces a continuous lift `phi` of the planar argument; an
//! independent dense unwrapping of `atan2` values must agree with the
//! recursion wherever both are defined, and a mismatch is reported as an
//! error rather than ignored.

use crate::error::{Error, Result};
use crate::flow::Flow;
use crate::geometry::{linear_flow, StabilityParams, Vec3};

/// Unit-step angle correction together with its a-priori bound.
#[derive(Clone, Copy, Debug)]
pub struct DeltaResult {
    pub delta: f64,
    /// `arcsin(eta / (e^sigma - eta))`.
    pub bound: f64,
    /// `cos(Delta) = <v, w>`; positive under the closeness hypothesis.
    pub cos_vw: f64,
    /// How far the arcsin argument sat outside `[-1, 1]` before clamping.
    pub clamp_residual: f64,
}

fn delta_raw(flow: &dyn Flow, p: &StabilityParams, x: Vec3, t: f64) -> Result<(f64, f64, f64)> {
    let moved = flow.eval(t, x)?;
    let v = moved.project_l().normalized()?;
    let w = linear_flow(p, t, x.project_l()).project_l().normalized()?;
    let s_raw = v.dot(w.perp_l());
    let clamp_residual = (s_raw.abs() - 1.0).max(0.0);
    let s = s_raw.clamp(-1.0, 1.0);
    let c = v.dot(w);
    if c <= 0.0 {
        return Err(Error::AngleInconsistent { cos_val: c });
    }
    Ok((s.asin(), c, clamp_residual))
}

/// `arcsin(eta / (e^sigma - eta))`, the per-unit-step angle bound.
pub fn arcsin_bound(p: &StabilityParams, eta: f64) -> f64 {
    (eta / (p.sigma.exp() - eta)).clamp(-1.0, 1.0).asin()
}

/// Angle between the projected flow endpoint and the linearized prediction,
/// as a value in `(-pi/2, pi/2)`. Requires `0 < eta < e^sigma / 2`, a point
/// off the axis, and `psi` consistent with the planar argument of `x`.
pub fn delta_angle(
    flow: &dyn Flow,
    p: &StabilityParams,
    eta: f64,
    x: Vec3,
    psi: f64,
    t: f64,
) -> Result<DeltaResult> {
    if !(0.0 < eta && eta < p.sigma.exp() / 2.0) {
        return Err(Error::PreconditionViolated(format!(
            "need 0 < eta < e^sigma/2, got eta = {eta}"
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::PreconditionViolated(format!(
            "t = {t} outside [0, 1]"
        )));
    }
    let pl = x.project_l();
    if pl.norm() == 0.0 {
        return Err(Error::PreconditionViolated("x lies on the axis U".into()));
    }
    let unit = pl.normalized()?;
    let dir_err = (unit - Vec3::new(psi.cos(), psi.sin(), 0.0)).norm();
    if dir_err > 1e-9 {
        return Err(Error::PreconditionViolated(format!(
            "psi inconsistent with x (direction residual {dir_err:.2e})"
        )));
    }
    let (delta, cos_vw, clamp_residual) = delta_raw(flow, p, x, t)?;
    Ok(DeltaResult {
        delta,
        bound: arcsin_bound(p, eta),
        cos_vw,
        clamp_residual,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct LiftSample {
    pub t: f64,
    pub phi: f64,
    pub p_l: f64,
    pub p_u: f64,
}

/// Continuous argument lift along a flowline started on the unit cylinder.
#[derive(Clone, Debug)]
pub struct AngleLift {
    pub psi0: f64,
    pub delta0: f64,
    /// Dense trace `(t, phi, |P_L|, |P_U|)`.
    pub samples: Vec<LiftSample>,
    /// Recursion value at the end time.
    pub phi_end: f64,
    /// Largest observed disagreement between the recursion and the dense
    /// unwrap at the comparison times.
    pub max_mismatch: f64,
}

/// Integer-step state of the lift recursion: the flowline at whole times
/// together with the lifted angle there.
#[derive(Clone, Debug)]
pub struct LiftPath {
    pub points: Vec<Vec3>,
    pub angles: Vec<f64>,
}

impl LiftPath {
    /// Lift value at an arbitrary time within the computed horizon.
    pub fn angle_at(&self, flow: &dyn Flow, p: &StabilityParams, t: f64) -> Result<f64> {
        let k = (t.floor() as usize).min(self.points.len() - 1);
        let s = t - k as f64;
        if s == 0.0 {
            return Ok(self.angles[k]);
        }
        let (d, _, _) = delta_raw(flow, p, self.points[k], s)?;
        Ok(self.angles[k] - s * p.mu + d)
    }
}

/// Run the unit-step recursion from `x = (cos psi, sin psi, delta)` out to
/// `t_end`, checking the unit-box condition `|P_U F(k, x)| <= 1` at every
/// whole time on the way.
pub fn lift_path(
    flow: &dyn Flow,
    p: &StabilityParams,
    psi: f64,
    delta: f64,
    t_end: f64,
) -> Result<LiftPath> {
    if !(0.0 < delta && delta <= 1.0) {
        return Err(Error::PreconditionViolated(format!(
            "delta = {delta} outside (0, 1]"
        )));
    }
    if t_end < 0.0 {
        return Err(Error::PreconditionViolated(
            "t_end must be nonnegative".into(),
        ));
    }
    let x = Vec3::new(psi.cos(), psi.sin(), delta);
    let horizon = t_end.floor() as usize;
    // the unit-box condition applies at whole times up to ceil(t_end) - 1;
    // a lift ending exactly on an integer does not constrain that integer
    let check_limit = (t_end.ceil() as usize).saturating_sub(1);
    let mut points = Vec::with_capacity(horizon + 1);
    let mut angles = Vec::with_capacity(horizon + 1);
    points.push(x);
    angles.push(psi);
    let mut y = x;
    let mut phi = psi;
    for k in 0..horizon {
        let (d, _, _) = delta_raw(flow, p, y, 1.0)?;
        phi = phi - p.mu + d;
        y = flow.eval(1.0, y)?;
        let p_u = y.project_u().norm();
        if k < check_limit && p_u > 1.0 + 1e-12 {
            return Err(Error::DomainExit { step: k + 1, p_u });
        }
        points.push(y);
        angles.push(phi);
    }
    Ok(LiftPath { points, angles })
}

/// Recursion lift value at `t_end` (fast path, no dense cross-check).
pub fn lift_end(
    flow: &dyn Flow,
    p: &StabilityParams,
    psi: f64,
    delta: f64,
    t_end: f64,
) -> Result<f64> {
    let path = lift_path(flow, p, psi, delta, t_end)?;
    path.angle_at(flow, p, t_end)
}

const DENSE_STEP: f64 = 1.0 / 64.0;
const LIFT_AGREEMENT: f64 = 1e-7;

/// Continuous lift with the full cross-check: the unit-step recursion and a
/// dense small-step unwrapping of the raw planar argument are both computed
/// and must agree to 1e-7 at every eighth of a time unit.
pub fn phi_lift(
    flow: &dyn Flow,
    p: &StabilityParams,
    psi: f64,
    delta: f64,
    t_end: f64,
) -> Result<AngleLift> {
    let path = lift_path(flow, p, psi, delta, t_end)?;
    let x = Vec3::new(psi.cos(), psi.sin(), delta);

    let mut samples = Vec::new();
    let mut t = 0.0;
    let mut y = x;
    let mut phi_dense = psi;
    let mut raw_prev = psi;
    samples.push(LiftSample {
        t,
        phi: phi_dense,
        p_l: y.project_l().norm(),
        p_u: delta,
    });
    let mut max_mismatch: f64 = 0.0;
    let mut next_check = 0.0;

    while t < t_end {
        let mut h = DENSE_STEP.min(t_end - t);
        // Keep the raw angle increment under pi/2 so the branch is forced;
        // the projection never vanishes on the domain, so halving terminates.
        let (mut y_next, mut dtheta);
        loop {
            y_next = flow.eval(h, y)?;
            let raw = y_next.angle_l();
            dtheta = wrap_to_pi(raw - raw_prev);
            if dtheta.abs() <= std::f64::consts::FRAC_PI_2 || h < DENSE_STEP / 64.0 {
                raw_prev = raw;
                break;
            }
            h /= 2.0;
        }
        t += h;
        y = y_next;
        phi_dense += dtheta;
        samples.push(LiftSample {
            t,
            phi: phi_dense,
            p_l: y.project_l().norm(),
            p_u: y.project_u().norm(),
        });
        if t + 1e-12 >= next_check || t >= t_end {
            let phi_rec = path.angle_at(flow, p, t)?;
            let mismatch = (phi_rec - phi_dense).abs();
            max_mismatch = max_mismatch.max(mismatch);
            if mismatch > LIFT_AGREEMENT {
                return Err(Error::LiftMismatch { t, mismatch });
            }
            next_check += 0.125;
        }
    }
    let phi_end = path.angle_at(flow, p, t_end)?;
    let (delta0, _, _) = delta_raw(flow, p, x, 0.0)?;
    Ok(AngleLift {
        psi0: psi,
        delta0,
        samples,
        phi_end,
        max_mismatch,
    })
}

fn wrap_to_pi(a: f64) -> f64 {
    let mut r = a % std::f64::consts::TAU;
    if r > std::f64::consts::PI {
        r -= std::f64::consts::TAU;
    } else if r < -std::f64::consts::PI {
        r += std::f64::consts::TAU;
    }
    r
}
