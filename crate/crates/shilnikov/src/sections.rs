//! Section charts and the maps between them.
//!
//! Flowlines starting just above the stable plane on the unit cylinder `M_I`
//! climb to the plane `M_E = e3 + L` (the inner map), get carried around the
//! loop back to the cylinder (the exterior map), and compose into the return
//! map in the plane `Q_j` expressed in the `(psi, delta)` chart. Two exterior
//! backends exist: tracing an actual flow from `M_E(r_j)` to `M_I`, and a
//! coordinate model that prescribes the exterior in chart coordinates
//! directly, which is all the later chaos machinery needs.

use crate::angles::{lift_path, LiftPath};
use crate::error::{Error, Result};
use crate::flow::Flow;
use crate::geometry::{StabilityParams, Vec3};
use crate::roots;

/// Chart of the cylinder strip: `K(psi, delta)` has planar argument
/// `omega + psi` and height `delta`, covering everything except the line
/// opposite the landing direction of the exterior map.
#[derive(Clone, Copy, Debug)]
pub struct CylinderChart {
    pub omega: f64,
}

impl CylinderChart {
    pub fn to_point(&self, psi: f64, delta: f64) -> Vec3 {
        let a = self.omega + psi;
        Vec3::new(a.cos(), a.sin(), delta)
    }

    /// Inverse chart; rejects points off the cylinder or on the excluded
    /// line `psi = +-pi`.
    pub fn from_point(&self, x: Vec3) -> Result<(f64, f64)> {
        let r = x.project_l().norm();
        if (r - 1.0).abs() > 1e-8 {
            return Err(Error::DomainViolation(format!(
                "point not on the unit cylinder (|P_L| = {r})"
            )));
        }
        let mut psi = x.angle_l() - self.omega;
        while psi > std::f64::consts::PI {
            psi -= std::f64::consts::TAU;
        }
        while psi < -std::f64::consts::PI {
            psi += std::f64::consts::TAU;
        }
        if (psi.abs() - std::f64::consts::PI).abs() < 1e-12 {
            return Err(Error::DomainViolation("point on the excluded line".into()));
        }
        Ok((psi, x.x3))
    }
}

/// Chart of the exit plane built on a basis `v, w` of `L`: the point
/// `e3 + xi v + eta w` has coordinates `(xi, eta)`.
#[derive(Clone, Copy, Debug)]
pub struct PlaneChart {
    pub v: Vec3,
    pub w: Vec3,
    /// Operator norm of the coordinate isomorphism `kappa`.
    pub kappa_norm: f64,
    /// Operator norm of its inverse.
    pub kappa_inv_norm: f64,
}

impl PlaneChart {
    pub fn new(v: Vec3, w: Vec3) -> Result<Self> {
        if v.x3.abs() > 1e-12 || w.x3.abs() > 1e-12 {
            return Err(Error::InvalidParameter(
                "basis vectors must lie in L".into(),
            ));
        }
        let det = v.x1 * w.x2 - v.x2 * w.x1;
        if det.abs() < 1e-12 {
            return Err(Error::InvalidParameter(
                "basis vectors are collinear".into(),
            ));
        }
        // 2x2 singular values of [v w] give both operator norms.
        let a = v.x1;
        let b = w.x1;
        let c = v.x2;
        let d = w.x2;
        let t1 = a * a + b * b + c * c + d * d;
        let t2 = ((a * a + b * b - c * c - d * d).powi(2) + 4.0 * (a * c + b * d).powi(2)).sqrt();
        let smax = ((t1 + t2) / 2.0).sqrt();
        let smin = ((t1 - t2).max(0.0) / 2.0).sqrt();
        Ok(PlaneChart {
            v,
            w,
            kappa_norm: 1.0 / smin,
            kappa_inv_norm: smax,
        })
    }

    /// `kappa` applied to a vector of `L`.
    pub fn kappa(&self, l: Vec3) -> (f64, f64) {
        let det = self.v.x1 * self.w.x2 - self.v.x2 * self.w.x1;
        let xi = (l.x1 * self.w.x2 - l.x2 * self.w.x1) / det;
        let eta = (self.v.x1 * l.x2 - self.v.x2 * l.x1) / det;
        (xi, eta)
    }

    pub fn kappa_inv(&self, xi: f64, eta: f64) -> Vec3 {
        self.v * xi + self.w * eta
    }

    /// Plane point to coordinates. `e3` has no `L` component, so this is
    /// `kappa` of the planar projection.
    pub fn to_coords(&self, y: Vec3) -> (f64, f64) {
        self.kappa(y.project_l())
    }

    pub fn from_coords(&self, xi: f64, eta: f64) -> Vec3 {
        Vec3::e3() + self.kappa_inv(xi, eta)
    }
}

/// Shape function of the coordinate exterior model:
/// `g(z) = (sin(z1) z2, sin(z2) z1) / 2`. Vanishes at 0 together with its
/// derivative, and `|g(z)| <= |z| / 2` everywhere.
pub fn model_shape(z: (f64, f64)) -> (f64, f64) {
    (0.5 * z.0.sin() * z.1, 0.5 * z.1.sin() * z.0)
}

/// Exterior map in chart coordinates.
#[derive(Clone, Copy)]
pub enum ExteriorMap<'a> {
    /// The identity wiring: the return lands exactly where the inner map
    /// pointed.
    Identity,
    /// `z -> z + beta_model g(z)` with the default shape function.
    Coordinate { beta_model: f64 },
    /// Trace an actual flow from the exit plane back to the cylinder. The
    /// seed is the travel time of `e3`.
    FlowTraced { flow: &'a dyn Flow, seed_time: f64 },
}

impl ExteriorMap<'_> {
    /// Needs the charts to express a flow-traced exterior in coordinates.
    pub fn apply(
        &self,
        cyl: &CylinderChart,
        plane: &PlaneChart,
        z: (f64, f64),
    ) -> Result<(f64, f64)> {
        match self {
            ExteriorMap::Identity => Ok(z),
            ExteriorMap::Coordinate { beta_model } => {
                let g = model_shape(z);
                Ok((z.0 + beta_model * g.0, z.1 + beta_model * g.1))
            }
            ExteriorMap::FlowTraced { flow, seed_time } => {
                let y = plane.from_coords(z.0, z.1);
                let t = exterior_travel_time(*flow, y, *seed_time)?;
                let hit = flow.eval(t, y)?;
                cyl.from_point(hit)
            }
        }
    }
}

/// First crossing of the exit plane: travel time, the largest integer below
/// it, and the endpoint on `M_E`.
#[derive(Clone, Copy, Debug)]
pub struct InnerHit {
    pub tau: f64,
    pub n: usize,
    pub endpoint: Vec3,
}

/// First time the axis component of the flowline from `x` reaches 1. Marches
/// in unit steps while the axis component sits far below the exit plane
/// (one step cannot overshoot while `x3 < 0.5 e^{-(u - sigma/2)}`, the
/// per-unit growth cap), then in quarter-unit increments to bracket the
/// first crossing, and finally bisects to better than 1e-12 in time.
pub fn travel_time_tau(
    flow: &dyn Flow,
    p: &StabilityParams,
    x: Vec3,
    max_time: f64,
) -> Result<InnerHit> {
    if !(0.0 < x.x3 && x.x3 < 1.0) {
        return Err(Error::DomainViolation(format!(
            "x3 = {} outside (0, 1)",
            x.x3
        )));
    }
    let coarse_cap = 0.5 * (-(p.u - p.sigma / 2.0)).exp();
    let sub = 0.25;
    let mut t = 0.0;
    let mut y = x;
    loop {
        if t > max_time {
            return Err(Error::NoEscape { x3: y.x3 });
        }
        let h = if y.x3 < coarse_cap { 1.0 } else { sub };
        let y_next = flow.eval(h, y)?;
        if y_next.x3 >= 1.0 && h > sub {
            // overshoot beyond the growth cap hypothesis; fall back to the
            // fine march from the same point
            let y_fine = flow.eval(sub, y)?;
            if y_fine.x3 >= 1.0 {
                break;
            }
            t += sub;
            y = y_fine;
            continue;
        }
        if y_next.x3 >= 1.0 {
            break;
        }
        if y_next.x3 <= 0.0 {
            return Err(Error::NoEscape { x3: y_next.x3 });
        }
        t += h;
        y = y_next;
    }
    // crossing inside (t, t + sub]: re-evaluate the bracket point in one
    // flow call (the stepped march above is only a bracketing device and
    // its accumulated rounding would be amplified by the ratio of the
    // landing radius to the level scale), then bisect on the axis
    // component and polish with two Newton steps so the crossing time is
    // accurate to a few ulps
    let base = flow.eval(t, x)?;
    let mut offset = roots::bisect(
        |s| match flow.eval(s, base) {
            Ok(z) => z.x3 - 1.0,
            Err(_) => f64::NAN,
        },
        0.0,
        sub,
        1e-13,
        200,
    )?;
    for _ in 0..2 {
        let f = flow.eval(offset, base)?.x3 - 1.0;
        let df = flow.time_derivative(offset, base)?.x3;
        if df.abs() < 1e-300 {
            break;
        }
        let step = f / df;
        if !step.is_finite() || step.abs() > sub {
            break;
        }
        offset -= step;
    }
    let tau = t + offset;
    let endpoint = flow.eval(offset, base)?;
    let n = if tau <= 0.0 {
        0
    } else {
        let c = tau.ceil();
        if c == tau {
            (tau as usize).saturating_sub(1)
        } else {
            c as usize - 1
        }
    };
    Ok(InnerHit { tau, n, endpoint })
}

/// Travel time of a plane point to the cylinder: the locally unique root of
/// `G(F(t, y)) = 0` with `G(z) = z1^2 + z2^2 - 1`, found by Newton seeded at
/// the reference travel time with a bisection fallback.
pub fn exterior_travel_time(flow: &dyn Flow, y: Vec3, seed: f64) -> Result<f64> {
    let g = |t: f64| match flow.eval(t, y) {
        Ok(z) => z.x1 * z.x1 + z.x2 * z.x2 - 1.0,
        Err(_) => f64::NAN,
    };
    let dg = |t: f64| {
        let z = match flow.eval(t, y) {
            Ok(z) => z,
            Err(_) => return f64::NAN,
        };
        let v = match flow.time_derivative(t, y) {
            Ok(v) => v,
            Err(_) => return f64::NAN,
        };
        2.0 * (z.x1 * v.x1 + z.x2 * v.x2)
    };
    let root = roots::newton_bisect(g, dg, seed, 1.0, 1e-12, 60)?;
    let deriv = dg(root);
    if deriv.abs() < 1e-12 {
        return Err(Error::TransversalityLost { deriv });
    }
    Ok(root)
}

/// Runtime bundle for the section maps of one return index: the scaled flow
/// near the equilibrium, both charts, the exterior wiring, and the scales
/// needed for inline verification.
pub struct ReturnMap<'a> {
    pub flow: &'a dyn Flow,
    pub params: StabilityParams,
    pub cyl: CylinderChart,
    pub plane: PlaneChart,
    pub exterior: ExteriorMap<'a>,
    pub delta_j: f64,
    pub r_j: f64,
    /// Enables the travel-time bracket, escape-count, and radial sandwich
    /// checks on every inner pass.
    pub eta_tilde: Option<f64>,
    pub max_time: f64,
}

/// Inner-map evaluation with everything later stages need: the hit, the exit
/// coordinates, and the lifted angle of the endpoint direction.
#[derive(Clone, Debug)]
pub struct InnerData {
    pub hit: InnerHit,
    /// Exit-plane coordinates of the endpoint.
    pub coords: (f64, f64),
    /// Lifted angle of the endpoint direction.
    pub phi: f64,
    /// Residual of the endpoint direction against `(cos phi, sin phi, 0)`.
    pub phi_residual: f64,
}

impl ReturnMap<'_> {
    fn check_domain(&self, psi: f64, delta: f64) -> Result<()> {
        if !(psi > -std::f64::consts::PI && psi < std::f64::consts::PI) {
            return Err(Error::DomainViolation(format!(
                "psi = {psi} outside (-pi, pi)"
            )));
        }
        if !(delta > 0.0 && delta < self.delta_j) {
            return Err(Error::DomainViolation(format!(
                "delta = {delta:.3e} outside (0, delta_j = {:.3e})",
                self.delta_j
            )));
        }
        Ok(())
    }

    /// Inner map on a cylinder point. Verifies the endpoint lands within
    /// radius `r_j` of the axis and, when `eta_tilde` is set, the
    /// travel-time bracket, the escape-count bound, and the radial sandwich.
    pub fn inner_point(&self, x: Vec3) -> Result<InnerHit> {
        if (x.project_l().norm() - 1.0).abs() > 1e-9 {
            return Err(Error::DomainViolation(
                "inner-map input not on the cylinder".into(),
            ));
        }
        if !(x.x3 > 0.0 && x.x3 < self.delta_j) {
            return Err(Error::DomainViolation(format!(
                "x3 = {:.3e} outside (0, delta_j)",
                x.x3
            )));
        }
        let hit = travel_time_tau(self.flow, &self.params, x, self.max_time)?;
        let dist = hit.endpoint.project_l().norm();
        if (hit.endpoint.x3 - 1.0).abs() > 1e-9 {
            return Err(Error::EnvelopeViolated(format!(
                "endpoint height {} not on the exit plane",
                hit.endpoint.x3
            )));
        }
        if dist >= self.r_j {
            return Err(Error::RadiusMiss {
                dist,
                r_j: self.r_j,
            });
        }
        if let Some(eta_tilde) = self.eta_tilde {
            let p = &self.params;
            let log_inv = (1.0 / x.x3).ln();
            let lo = log_inv / (p.u + eta_tilde);
            let hi = log_inv / (p.u - eta_tilde);
            if !(lo - 1e-9 <= hit.tau && hit.tau <= hi + 1e-9) {
                return Err(Error::EnvelopeViolated(format!(
                    "travel time {} outside [{lo}, {hi}]",
                    hit.tau
                )));
            }
            let n_floor = log_inv / (p.u + 2f64.ln()) - 1.0;
            if (hit.n as f64) <= n_floor - 1e-9 {
                return Err(Error::EnvelopeViolated(format!(
                    "escape count {} at or below the bound {n_floor}",
                    hit.n
                )));
            }
            let lo = ((p.sigma - eta_tilde) * hit.tau).exp();
            let hi = ((p.sigma + eta_tilde) * hit.tau).exp();
            if !(lo * (1.0 - 1e-9) <= dist && dist <= hi * (1.0 + 1e-9)) {
                return Err(Error::EnvelopeViolated(format!(
                    "radial sandwich violated: |P_L I(x)| = {dist:.6e} outside [{lo:.6e}, {hi:.6e}]"
                )));
            }
        }
        Ok(hit)
    }

    /// Inner map plus the lifted endpoint angle.
    pub fn inner_full(&self, psi: f64, delta: f64) -> Result<InnerData> {
        self.check_domain(psi, delta)?;
        let x = self.cyl.to_point(psi, delta);
        let hit = self.inner_point(x)?;
        let lift = lift_path(
            self.flow,
            &self.params,
            self.cyl.omega + psi,
            delta,
            hit.tau,
        )?;
        let phi = lift.angle_at(self.flow, &self.params, hit.tau)?;
        let unit = hit.endpoint.project_l().normalized()?;
        let phi_residual = (unit - Vec3::new(phi.cos(), phi.sin(), 0.0)).norm();
        if phi_residual > 1e-8 {
            return Err(Error::EnvelopeViolated(format!(
                "lift/endpoint direction residual {phi_residual:.3e}"
            )));
        }
        let coords = self.plane.to_coords(hit.endpoint);
        Ok(InnerData {
            hit,
            coords,
            phi,
            phi_residual,
        })
    }

    /// The return map in the plane.
    pub fn q(&self, psi: f64, delta: f64) -> Result<(f64, f64)> {
        let inner = self.inner_full(psi, delta)?;
        self.exterior.apply(&self.cyl, &self.plane, inner.coords)
    }

    /// Lifted angle of the inner endpoint direction.
    pub fn phi(&self, psi: f64, delta: f64) -> Result<f64> {
        Ok(self.inner_full(psi, delta)?.phi)
    }

    /// Lift path of the flowline below `(psi, delta)`, for callers that need
    /// angle values at several times.
    pub fn lift_for(&self, psi: f64, delta: f64, t_end: f64) -> Result<LiftPath> {
        lift_path(self.flow, &self.params, self.cyl.omega + psi, delta, t_end)
    }
}

/// Basis of the exit plane sending the chart derivative of a flow-traced
/// exterior to the coordinate axes (finite differences at the axis point,
/// which is invertible by the tangent-space isomorphism of the exterior);
/// the exterior map in the resulting coordinates has identity derivative at
/// the origin.
pub fn fit_plane_chart(
    exterior_flow: &dyn Flow,
    cyl: &CylinderChart,
    seed_time: f64,
) -> Result<PlaneChart> {
    let h = 1e-6;
    let col = |dir: Vec3| -> Result<(f64, f64)> {
        let yp = Vec3::e3() + dir * h;
        let ym = Vec3::e3() - dir * h;
        let tp = exterior_travel_time(exterior_flow, yp, seed_time)?;
        let tm = exterior_travel_time(exterior_flow, ym, seed_time)?;
        let (pp, dp) = cyl.from_point(exterior_flow.eval(tp, yp)?)?;
        let (pm, dm) = cyl.from_point(exterior_flow.eval(tm, ym)?)?;
        Ok(((pp - pm) / (2.0 * h), (dp - dm) / (2.0 * h)))
    };
    let c1 = col(Vec3::e1())?;
    let c2 = col(Vec3::e2())?;
    let det = c1.0 * c2.1 - c2.0 * c1.1;
    if det.abs() < 1e-12 {
        return Err(Error::SingularMatrix("exterior chart derivative".into()));
    }
    let v = Vec3::new(c2.1 / det, -c1.1 / det, 0.0);
    let w = Vec3::new(-c2.0 / det, c1.0 / det, 0.0);
    PlaneChart::new(v, w)
}

/// Certified square half-width for the exterior accuracy conditions: the
/// largest grid-checked `alpha` such that `|X(z) - z| <= beta |z|` and
/// `|DX(z) - id| <= beta` on the square, halved once. The identity exterior
/// passes everywhere and returns the cap outright.
pub fn alpha_for_beta(
    exterior: &ExteriorMap<'_>,
    cyl: &CylinderChart,
    plane: &PlaneChart,
    beta: f64,
    cap: f64,
) -> Result<f64> {
    if !(beta > 0.0 && beta <= 0.5) {
        return Err(Error::PreconditionViolated(format!(
            "need 0 < beta <= 1/2, got beta = {beta}"
        )));
    }
    let cap = cap.min(std::f64::consts::PI * 0.999);
    if matches!(exterior, ExteriorMap::Identity) {
        return Ok(cap);
    }
    let grid = 17usize;
    let fd = 1e-6;
    let certify = |alpha: f64| -> Result<bool> {
        for i in 0..grid {
            for j in 0..grid {
                let z = (
                    -alpha + 2.0 * alpha * i as f64 / (grid - 1) as f64,
                    -alpha + 2.0 * alpha * j as f64 / (grid - 1) as f64,
                );
                let x = exterior.apply(cyl, plane, z)?;
                let dev = ((x.0 - z.0).powi(2) + (x.1 - z.1).powi(2)).sqrt();
                let nz = (z.0 * z.0 + z.1 * z.1).sqrt();
                if dev > beta * nz + 1e-12 {
                    return Ok(false);
                }
                // finite-difference derivative, Frobenius deviation from id
                let xp = exterior.apply(cyl, plane, (z.0 + fd, z.1))?;
                let xm = exterior.apply(cyl, plane, (z.0 - fd, z.1))?;
                let yp = exterior.apply(cyl, plane, (z.0, z.1 + fd))?;
                let ym = exterior.apply(cyl, plane, (z.0, z.1 - fd))?;
                let d11 = (xp.0 - xm.0) / (2.0 * fd) - 1.0;
                let d21 = (xp.1 - xm.1) / (2.0 * fd);
                let d12 = (yp.0 - ym.0) / (2.0 * fd);
                let d22 = (yp.1 - ym.1) / (2.0 * fd) - 1.0;
                let dev = (d11 * d11 + d12 * d12 + d21 * d21 + d22 * d22).sqrt();
                if dev > beta + 1e-9 {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    };
    let mut alpha = cap;
    for _ in 0..200 {
        if certify(alpha)? {
            return Ok(alpha / 2.0);
        }
        alpha *= 0.9;
        if alpha < 1e-6 {
            break;
        }
    }
    Ok(alpha)
}

/// The height scale below which the inner map provably contracts into the
/// exterior's certified square:
/// `delta_beta = ((2 / (3 (|kappa| + 1))) alpha)^(3u / -sigma)`.
pub fn delta_beta_j(p: &StabilityParams, kappa_norm: f64, alpha_j: f64) -> Result<f64> {
    let base = 2.0 / (3.0 * (kappa_norm + 1.0)) * alpha_j;
    let expo = 3.0 * p.u / (-p.sigma);
    let val = base.powf(expo);
    if !val.is_finite() || val < 1e-300 {
        return Err(Error::LedgerInfeasible {
            name: "delta_beta_j".into(),
            slack: val,
        });
    }
    debug_assert!(val <= 2.0 / 3.0 * alpha_j * (1.0 + 1e-12));
    Ok(val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{AffineFlow, LinearFlow};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn reference() -> StabilityParams {
        StabilityParams::new(-1.0, std::f64::consts::PI, 1.5).unwrap()
    }

    fn identity_chart() -> PlaneChart {
        PlaneChart::new(Vec3::e1(), Vec3::e2()).unwrap()
    }

    fn linear_map(lin: &LinearFlow, p: StabilityParams) -> ReturnMap<'_> {
        ReturnMap {
            flow: lin,
            params: p,
            cyl: CylinderChart { omega: 0.0 },
            plane: identity_chart(),
            exterior: ExteriorMap::Identity,
            delta_j: 0.011,
            r_j: 1.5,
            eta_tilde: Some(0.1),
            max_time: 1e4,
        }
    }

    #[test]
    fn chart_round_trip() {
        let cyl = CylinderChart { omega: 0.7 };
        for (psi, delta) in [(0.1, 0.5), (-2.9, 3.0), (3.0, -1.0)] {
            let (p2, d2) = cyl.from_point(cyl.to_point(psi, delta)).unwrap();
            assert!((psi - p2).abs() < 1e-12);
            assert!((delta - d2).abs() < 1e-12);
        }
        let plane = identity_chart();
        let y = plane.from_coords(0.3, -0.2);
        let (xi, eta) = plane.to_coords(y);
        assert!((xi - 0.3).abs() < 1e-14 && (eta + 0.2).abs() < 1e-14);
    }

    #[test]
    fn kappa_norms_for_identity_basis() {
        let plane = identity_chart();
        assert!((plane.kappa_norm - 1.0).abs() < 1e-12);
        assert!((plane.kappa_inv_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn travel_time_matches_logarithm_for_linear_model() {
        let p = reference();
        let lin = LinearFlow::new(p);
        let x = Vec3::new(1.0, 0.0, 1e-3);
        let hit = travel_time_tau(&lin, &p, x, 1e4).unwrap();
        let expected = (1.0 / 1e-3f64).ln() / p.u;
        assert!(
            (hit.tau - expected).abs() < 1e-10,
            "tau = {}, expected {expected}",
            hit.tau
        );
        assert_eq!(hit.n, 4); // tau ~ 4.605
        assert!((hit.endpoint.x3 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn travel_time_near_boundary_is_tiny() {
        let p = reference();
        let lin = LinearFlow::new(p);
        let x = Vec3::new(1.0, 0.0, 1.0 - 1e-12);
        let hit = travel_time_tau(&lin, &p, x, 10.0).unwrap();
        assert!(hit.tau < 1e-11);
        assert_eq!(hit.n, 0);
    }

    #[test]
    fn sinking_flowlines_report_no_escape() {
        // the affine exterior flow contracts the axis component toward a
        // negative center, so the exit plane is never reached
        let (aff, _t, _o) = AffineFlow::exterior_reference().unwrap();
        let p = reference();
        match travel_time_tau(&aff, &p, Vec3::new(0.2, 0.0, 0.5), 50.0) {
            Err(Error::NoEscape { .. }) => {}
            other => panic!("expected NoEscape, got {:?}", other.map(|h| h.tau)),
        }
    }

    #[test]
    fn tight_section_radius_is_reported_as_a_miss() {
        let p = reference();
        let lin = LinearFlow::new(p);
        let mut rm = linear_map(&lin, p);
        rm.r_j = 1e-4; // landing radius delta^{2/3} ~ 1e-2 misses this
        assert!(matches!(
            rm.inner_full(0.0, 1e-3),
            Err(Error::RadiusMiss { .. })
        ));
    }

    #[test]
    fn travel_time_derivative_is_step_halving_consistent() {
        // centered differences of tau along a vertical curve of inputs
        let p = reference();
        let lin = LinearFlow::new(p);
        let tau = |delta: f64| {
            travel_time_tau(&lin, &p, Vec3::new(1.0, 0.0, delta), 1e4)
                .unwrap()
                .tau
        };
        let d0 = 1e-3;
        let h = 1e-5;
        let d_h = (tau(d0 + h) - tau(d0 - h)) / (2.0 * h);
        let d_h2 = (tau(d0 + h / 2.0) - tau(d0 - h / 2.0)) / h;
        let ratio = d_h / d_h2;
        assert!((ratio - 1.0).abs() < 0.05, "ratio {ratio}");
        // closed form: d tau / d delta = -1/(u delta)
        let exact = -1.0 / (p.u * d0);
        assert!((d_h2 - exact).abs() < 1e-4 * exact.abs());
    }

    #[test]
    fn contraction_scale_underflow_is_rejected() {
        let p = StabilityParams::new(-0.01, 1.0, 1.5).unwrap();
        assert!(matches!(
            delta_beta_j(&p, 1.0, 0.3),
            Err(Error::LedgerInfeasible { .. })
        ));
    }

    #[test]
    fn escape_count_bound_holds() {
        let p = reference();
        let lin = LinearFlow::new(p);
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..100 {
            let x3 = 10f64.powf(rng.random_range(-8.0..-1.0));
            let hit = travel_time_tau(&lin, &p, Vec3::new(1.0, 0.0, x3), 1e4).unwrap();
            let bound = (1.0 / x3).ln() / (p.u + 2f64.ln()) - 1.0;
            assert!((hit.n as f64) > bound, "n = {}, bound = {bound}", hit.n);
        }
    }

    #[test]
    fn inner_map_power_law_for_linear_model() {
        let p = reference();
        let lin = LinearFlow::new(p);
        let rm = linear_map(&lin, p);
        let data = rm.inner_full(0.3, 1e-3).unwrap();
        // |P_L I(x)| = delta^{-sigma/u} exactly
        let expected = 1e-3f64.powf(-p.sigma / p.u);
        let radial = data.hit.endpoint.project_l().norm();
        assert!(
            (radial - expected).abs() < 1e-12,
            "radial = {radial}, expected {expected}"
        );
        assert!((expected - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn inner_map_rejects_heights_at_or_above_delta_j() {
        let p = reference();
        let lin = LinearFlow::new(p);
        let rm = linear_map(&lin, p);
        assert!(matches!(
            rm.inner_full(0.0, 0.011),
            Err(Error::DomainViolation(_))
        ));
        assert!(matches!(
            rm.inner_full(0.0, 0.02),
            Err(Error::DomainViolation(_))
        ));
    }

    #[test]
    fn inner_map_inline_checks_pass_on_random_sample() {
        let p = reference();
        let lin = LinearFlow::new(p);
        let rm = linear_map(&lin, p);
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..200 {
            let psi = rng.random_range(-3.1..3.1);
            let delta = 10f64.powf(rng.random_range(-8.0..-2.0));
            let data = rm.inner_full(psi, delta).unwrap();
            assert!(data.phi_residual < 1e-8);
        }
    }

    #[test]
    fn big_phi_closed_form_for_linear_model() {
        let p = reference();
        let lin = LinearFlow::new(p);
        let rm = linear_map(&lin, p);
        let phi = rm.phi(0.0, 1e-3).unwrap();
        let expected = -p.mu * (1.0 / 1e-3f64).ln() / p.u;
        assert!(
            (phi - expected).abs() < 1e-8,
            "phi = {phi}, expected {expected}"
        );
        assert!((expected + 14.467599).abs() < 1e-4);
    }

    #[test]
    fn big_phi_is_continuous_across_integer_travel_times() {
        let p = reference();
        let lin = LinearFlow::new(p);
        let rm = linear_map(&lin, p);
        // tau = ln(1/delta)/u crosses 5 at delta = e^{-7.5}
        let delta_star = (-7.5f64).exp();
        let lo = rm.phi(0.1, delta_star * (1.0 - 1e-9)).unwrap();
        let hi = rm.phi(0.1, delta_star * (1.0 + 1e-9)).unwrap();
        assert!(
            (lo - hi).abs() < 1e-6,
            "jump {} across integer tau",
            (lo - hi).abs()
        );
    }

    #[test]
    fn phi_delta_ratio_is_logarithmic_for_linear_model() {
        let p = reference();
        let lin = LinearFlow::new(p);
        let rm = linear_map(&lin, p);
        let (d1, d2) = (2e-4, 7e-3);
        let phi1 = rm.phi(0.4, d1).unwrap();
        let phi2 = rm.phi(0.4, d2).unwrap();
        let expected = (p.mu / p.u) * (d1 / d2).ln();
        assert!((phi1 - phi2 - expected).abs() < 1e-9);
    }

    #[test]
    fn return_map_composes_charts_in_closed_form() {
        let p = reference();
        let lin = LinearFlow::new(p);
        let rm = linear_map(&lin, p);
        let (q1, q2) = rm.q(0.0, 1e-3).unwrap();
        // hand composition: radial 1e-2, angle -mu ln(1000)/u
        let rad = 1e-2;
        let ang = -p.mu * (1e3f64).ln() / p.u;
        assert!((q1 - rad * ang.cos()).abs() < 1e-10);
        assert!((q2 - rad * ang.sin()).abs() < 1e-10);
    }

    #[test]
    fn exterior_travel_time_recovers_reference_seed() {
        let (aff, t_star, _omega) = AffineFlow::exterior_reference().unwrap();
        let t = exterior_travel_time(&aff, Vec3::e3(), t_star).unwrap();
        assert!((t - t_star).abs() < 1e-10);
    }

    #[test]
    fn exterior_travel_time_is_continuous_in_the_start_point() {
        let (aff, t_star, _omega) = AffineFlow::exterior_reference().unwrap();
        let y = Vec3::e3() + Vec3::e1() * 1e-4;
        let t = exterior_travel_time(&aff, y, t_star).unwrap();
        assert!((t - t_star).abs() < 1e-2);
        // high-accuracy oracle: bisect the closed-form radius profile
        let f = |s: f64| {
            let z = aff.eval(s, y).unwrap();
            z.x1 * z.x1 + z.x2 * z.x2 - 1.0
        };
        let oracle = roots::bisect(f, t - 0.05, t + 0.05, 1e-14, 300).unwrap();
        assert!((t - oracle).abs() < 1e-10);
    }

    #[test]
    fn flow_traced_exterior_maps_center_to_origin_coordinates() {
        let (aff, t_star, omega) = AffineFlow::exterior_reference().unwrap();
        let plane = identity_chart();
        let cyl = CylinderChart { omega };
        let ext = ExteriorMap::FlowTraced {
            flow: &aff,
            seed_time: t_star,
        };
        let (a, b) = ext.apply(&cyl, &plane, (0.0, 0.0)).unwrap();
        assert!(a.abs() < 1e-9 && b.abs() < 1e-9, "({a}, {b})");
    }

    #[test]
    fn fitted_chart_normalizes_the_exterior_derivative() {
        let (aff, t_star, omega) = AffineFlow::exterior_reference().unwrap();
        let cyl = CylinderChart { omega };
        let plane = fit_plane_chart(&aff, &cyl, t_star).unwrap();
        let ext = ExteriorMap::FlowTraced {
            flow: &aff,
            seed_time: t_star,
        };
        // finite-difference derivative of the exterior in coordinates at 0
        let h = 1e-6;
        let at = |z: (f64, f64)| ext.apply(&cyl, &plane, z).unwrap();
        let d11 = (at((h, 0.0)).0 - at((-h, 0.0)).0) / (2.0 * h);
        let d21 = (at((h, 0.0)).1 - at((-h, 0.0)).1) / (2.0 * h);
        let d12 = (at((0.0, h)).0 - at((0.0, -h)).0) / (2.0 * h);
        let d22 = (at((0.0, h)).1 - at((0.0, -h)).1) / (2.0 * h);
        assert!((d11 - 1.0).abs() < 1e-6, "d11 = {d11}");
        assert!((d22 - 1.0).abs() < 1e-6, "d22 = {d22}");
        assert!(d12.abs() < 1e-6, "d12 = {d12}");
        assert!(d21.abs() < 1e-6, "d21 = {d21}");
    }

    #[test]
    fn alpha_certification_caps_for_identity() {
        let plane = identity_chart();
        let cyl = CylinderChart { omega: 0.0 };
        let alpha = alpha_for_beta(&ExteriorMap::Identity, &cyl, &plane, 0.5, 1.5).unwrap();
        assert_eq!(alpha, 1.5);
    }

    #[test]
    fn alpha_certification_for_model_shape() {
        let plane = identity_chart();
        let cyl = CylinderChart { omega: 0.0 };
        // beta_model = beta / 2 leaves margin, certification passes at cap
        let ext = ExteriorMap::Coordinate { beta_model: 0.25 };
        let alpha = alpha_for_beta(&ext, &cyl, &plane, 0.5, 1.0).unwrap();
        assert!(alpha >= 0.5, "alpha = {alpha}");
        // beta = 0 is outside the hypotheses
        assert!(alpha_for_beta(&ext, &cyl, &plane, 0.0, 1.0).is_err());
    }

    #[test]
    fn delta_beta_reference_value() {
        let p = reference();
        let v = delta_beta_j(&p, 1.0, 0.3).unwrap();
        assert!((v - 0.1f64.powf(4.5)).abs() < 1e-18);
        assert!((v - 3.1622776601683795e-5).abs() < 1e-12);
        assert!(v <= 2.0 / 3.0 * 0.3);
    }

    #[test]
    fn model_shape_stays_below_half_the_radius() {
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..500 {
            let z = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let g = model_shape(z);
            let gn = (g.0 * g.0 + g.1 * g.1).sqrt();
            let zn = (z.0 * z.0 + z.1 * z.1).sqrt();
            assert!(gn <= 0.5 * zn + 1e-12);
        }
    }
}
