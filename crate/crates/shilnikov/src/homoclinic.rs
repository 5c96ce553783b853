//! Homoclinic flowline bookkeeping.
//!
//! A homoclinic flowline `h` runs up the axis in the far past and spirals
//! into the origin inside the stable plane in the far future. Scaling by
//! `1/eps` turns each late crossing of the unit cylinder into a section
//! datum: the crossing time, the scale `eps_j = |h(t_I_j)|`, the landing
//! angle, and eventually a section radius for the exterior map. Flowlines
//! come either from closed-form pieces (tests, demos) or from integrating a
//! flow out of a seed point with a cached time grid.

use crate::error::{Error, Result};
use crate::flow::Flow;
use crate::geometry::Vec3;
use crate::roots;

enum Backend<'a> {
    Closures {
        h: Box<dyn Fn(f64) -> Vec3 + 'a>,
        dh: Option<Box<dyn Fn(f64) -> Vec3 + 'a>>,
    },
    Traced {
        flow: &'a dyn Flow,
        seed: Vec3,
        grid_t0: f64,
        grid_dt: f64,
        cache: Vec<Vec3>,
    },
}

/// A homoclinic flowline candidate with its axis/plane entry times
/// `t_u < t_l`.
pub struct HomoclinicData<'a> {
    backend: Backend<'a>,
    pub t_u: f64,
    pub t_l: f64,
}

/// Section data of one exit crossing.
#[derive(Clone, Copy, Debug)]
pub struct SectionTimes {
    pub j: usize,
    /// Entry time: `h(t_e) = eps_j e3`.
    pub t_e_eps: f64,
    /// Crossing time of the scaled unit cylinder.
    pub t_i_j: f64,
    pub eps_j: f64,
    /// Section radius on the exit plane; zero until certified.
    pub r_j: f64,
    /// Angle of the landing direction `h(t_I_j)/eps_j` in `(-pi, pi]`.
    pub omega_j: f64,
}

impl<'a> HomoclinicData<'a> {
    pub fn from_closures(
        h: impl Fn(f64) -> Vec3 + 'a,
        dh: Option<Box<dyn Fn(f64) -> Vec3 + 'a>>,
        t_u: f64,
        t_l: f64,
    ) -> Result<Self> {
        if !(t_u < t_l) {
            return Err(Error::InvalidParameter("need t_u < t_l".into()));
        }
        Ok(HomoclinicData {
            backend: Backend::Closures { h: Box::new(h), dh },
            t_u,
            t_l,
        })
    }

    /// Realize the flowline by integration from a seed point (`h(0) = seed`),
    /// caching states on a uniform grid over `[range.0, range.1]` so nearby
    /// evaluations restart from the closest cached state.
    pub fn from_flow(
        flow: &'a dyn Flow,
        seed: Vec3,
        t_u: f64,
        t_l: f64,
        range: (f64, f64),
        grid_n: usize,
    ) -> Result<Self> {
        if !(t_u < t_l) || !(range.0 < range.1) || grid_n < 2 {
            return Err(Error::InvalidParameter("bad flowline range".into()));
        }
        let grid_dt = (range.1 - range.0) / (grid_n - 1) as f64;
        let mut cache = Vec::with_capacity(grid_n);
        let mut state = flow.eval(range.0, seed)?;
        cache.push(state);
        for _ in 1..grid_n {
            state = flow.eval(grid_dt, state)?;
            cache.push(state);
        }
        Ok(HomoclinicData {
            backend: Backend::Traced {
                flow,
                seed,
                grid_t0: range.0,
                grid_dt,
                cache,
            },
            t_u,
            t_l,
        })
    }

    pub fn eval(&self, t: f64) -> Result<Vec3> {
        match &self.backend {
            Backend::Closures { h, .. } => Ok(h(t)),
            Backend::Traced {
                flow,
                seed,
                grid_t0,
                grid_dt,
                cache,
            } => {
                let idx = ((t - grid_t0) / grid_dt).floor();
                if idx >= 0.0 && (idx as usize) < cache.len() {
                    let k = idx as usize;
                    let base_t = grid_t0 + k as f64 * grid_dt;
                    flow.eval(t - base_t, cache[k])
                } else {
                    flow.eval(t, *seed)
                }
            }
        }
    }

    pub fn derivative(&self, t: f64) -> Result<Vec3> {
        match &self.backend {
            Backend::Closures { h, dh } => match dh {
                Some(d) => Ok(d(t)),
                None => {
                    let step = 1e-6;
                    Ok((h(t + step) - h(t - step)) / (2.0 * step))
                }
            },
            Backend::Traced {
                flow,
                seed,
                grid_t0,
                grid_dt,
                cache,
            } => {
                let idx = ((t - grid_t0) / grid_dt).floor();
                if idx >= 0.0 && (idx as usize) < cache.len() {
                    let k = idx as usize;
                    let base_t = grid_t0 + k as f64 * grid_dt;
                    flow.time_derivative(t - base_t, cache[k])
                } else {
                    flow.time_derivative(t, *seed)
                }
            }
        }
    }

    /// `(|h|^2)'(t) = 2 <h'(t), h(t)>`.
    pub fn norm_sq_rate(&self, t: f64) -> Result<f64> {
        Ok(2.0 * self.derivative(t)?.dot(self.eval(t)?))
    }

    /// Sampled structure checks: on the axis for `t <= t_u` (positive sign
    /// case), in the plane for `t >= t_l`, nowhere zero.
    pub fn validate(&self, samples: usize, span: f64) -> Result<()> {
        for i in 0..samples {
            let s = i as f64 / (samples - 1) as f64;
            let t_axis = self.t_u - span * s;
            let hu = self.eval(t_axis)?;
            if hu.project_l().norm() > 1e-8 {
                return Err(Error::PreconditionViolated(format!(
                    "h({t_axis}) off the axis by {:.3e}",
                    hu.project_l().norm()
                )));
            }
            if hu.x3 <= 0.0 {
                return Err(Error::PreconditionViolated(
                    "axis branch must have x3 > 0".into(),
                ));
            }
            let t_plane = self.t_l + span * s;
            let hl = self.eval(t_plane)?;
            if hl.x3.abs() > 1e-8 {
                return Err(Error::PreconditionViolated(format!(
                    "h({t_plane}) off the plane by {:.3e}",
                    hl.x3.abs()
                )));
            }
            let t_mid = self.t_u + (self.t_l - self.t_u) * s;
            if self.eval(t_mid)?.norm() < 1e-12 {
                return Err(Error::PreconditionViolated(
                    "flowline passes through 0".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Closed-form homoclinic loop for tests and demos: exponential axis branch,
/// logarithmic-spiral plane branch, and a C^1 cubic Hermite bridge between
/// them. Not a flowline of any single flow; it carries exactly the structure
/// the crossing bookkeeping consumes.
pub fn synthetic_loop(
    params: &crate::geometry::StabilityParams,
    t_u: f64,
    t_l: f64,
    amplitude: f64,
    theta0: f64,
) -> Result<HomoclinicData<'static>> {
    if !(t_u < t_l) || amplitude <= 0.0 {
        return Err(Error::InvalidParameter(
            "bad synthetic loop parameters".into(),
        ));
    }
    let p = *params;
    let gap = t_l - t_u;
    // Hermite data: axis end and plane end with matching derivatives.
    let p0 = Vec3::new(0.0, 0.0, amplitude);
    let m0 = Vec3::new(0.0, 0.0, p.u * amplitude) * gap;
    let p1 = Vec3::new(amplitude * theta0.cos(), amplitude * theta0.sin(), 0.0);
    let m1 = Vec3::new(
        amplitude * (p.sigma * theta0.cos() + p.mu * theta0.sin()),
        amplitude * (p.sigma * theta0.sin() - p.mu * theta0.cos()),
        0.0,
    ) * gap;
    let h = move |t: f64| -> Vec3 {
        if t <= t_u {
            Vec3::new(0.0, 0.0, amplitude * (p.u * (t - t_u)).exp())
        } else if t >= t_l {
            let s = t - t_l;
            let r = amplitude * (p.sigma * s).exp();
            let a = theta0 - p.mu * s;
            Vec3::new(r * a.cos(), r * a.sin(), 0.0)
        } else {
            let s = (t - t_u) / gap;
            let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
            let h10 = s * (1.0 - s) * (1.0 - s);
            let h01 = s * s * (3.0 - 2.0 * s);
            let h11 = s * s * (s - 1.0);
            p0 * h00 + m0 * h10 + p1 * h01 + m1 * h11
        }
    };
    let data = HomoclinicData::from_closures(h, None, t_u, t_l)?;
    // The bridge must stay away from the origin.
    for i in 0..=100 {
        let t = t_u + gap * i as f64 / 100.0;
        if data.eval(t)?.norm() < 0.05 * amplitude {
            return Err(Error::InvalidParameter(
                "bridge approaches the origin".into(),
            ));
        }
    }
    Ok(data)
}

/// Entry time: the unique `t <= t_u` with `|h(t)| = eps`, so that the scaled
/// flowline passes through `e3`. Monotone bisection after expanding the
/// bracket to the left (the flowline decays backward in time).
pub fn entry_time(h: &HomoclinicData<'_>, eps: f64) -> Result<f64> {
    let limit = h.eval(h.t_u)?.norm();
    if !(eps > 0.0) || eps >= limit {
        return Err(Error::EpsTooLarge { eps, limit });
    }
    let mut lo = h.t_u - 1.0;
    let mut width = 1.0;
    for _ in 0..200 {
        if h.eval(lo)?.norm() < eps {
            break;
        }
        width *= 2.0;
        lo = h.t_u - width;
    }
    if h.eval(lo)?.norm() >= eps {
        return Err(Error::NoBracket { a: lo, b: h.t_u });
    }
    roots::bisect(
        |t| match h.eval(t) {
            Ok(v) => v.norm() - eps,
            Err(_) => f64::NAN,
        },
        lo,
        h.t_u,
        1e-12,
        300,
    )
}

/// Scan `t >= t_l` for strictly decreasing crossings and emit `count` of
/// them, evenly spaced over the accepted set, with strictly decreasing
/// scales. The section radius field is left at zero; `section_radius`
/// certifies it later.
pub fn exit_crossings(h: &HomoclinicData<'_>, count: usize) -> Result<Vec<SectionTimes>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let limit = h.eval(h.t_u)?.norm();
    let dt = 0.05;
    let mut accepted: Vec<(f64, f64)> = Vec::new();
    let mut t = h.t_l;
    let t_max = h.t_l + 4000.0 * dt;
    let mut last_eps = f64::INFINITY;
    while t <= t_max && accepted.len() < 64 * count {
        let norm = h.eval(t)?.norm();
        if norm < 1e-9 {
            break;
        }
        if h.norm_sq_rate(t)? < 0.0 && norm < limit && norm < last_eps {
            accepted.push((t, norm));
            last_eps = norm;
        }
        t += dt;
    }
    if accepted.len() < count {
        return Err(Error::NotEnoughCrossings {
            found: accepted.len(),
            requested: count,
        });
    }
    let stride = accepted.len() / count;
    let mut out = Vec::with_capacity(count);
    let mut prev_eps = f64::INFINITY;
    for j in 0..count {
        let (t_i, eps) = accepted[j * stride];
        if eps >= prev_eps {
            return Err(Error::PreconditionViolated(
                "crossing scales failed to decrease strictly".into(),
            ));
        }
        prev_eps = eps;
        let landing = h.eval(t_i)?;
        out.push(SectionTimes {
            j: j + 1,
            t_e_eps: entry_time(h, eps)?,
            t_i_j: t_i,
            eps_j: eps,
            r_j: 0.0,
            omega_j: landing.angle_l(),
        });
    }
    Ok(out)
}

/// Transversality data of the flow at a point of the cylinder's waist.
#[derive(Clone, Copy, Debug)]
pub struct TransversalityReport {
    /// `d/dt F(t, x)` at `t = 0`.
    pub d1f: Vec3,
    /// Radial component `<d1f, x>`; the crossing enters the cylinder when
    /// this is negative.
    pub radial: f64,
    /// Whether the velocity leaves the tangent plane of the cylinder.
    pub transversal: bool,
}

/// Check `<d/dt F(0, x), x> != 0` at a point `x` on the unit cylinder inside
/// the stable plane. The tangent plane there is spanned by the angular
/// direction and the axis, so transversality is exactly a nonzero radial
/// component.
pub fn transversality(flow: &dyn Flow, x: Vec3) -> Result<TransversalityReport> {
    if (x.project_l().norm() - 1.0).abs() > 1e-9 || x.x3.abs() > 1e-9 {
        return Err(Error::PreconditionViolated(
            "transversality point must sit on the cylinder waist".into(),
        ));
    }
    let d1f = flow.time_derivative(0.0, x)?;
    let norm = d1f.norm();
    if norm < 1e-12 {
        return Err(Error::DegenerateTangent { norm });
    }
    let radial = d1f.dot(x);
    Ok(TransversalityReport {
        d1f,
        radial,
        transversal: radial.abs() > 1e-12 * norm,
    })
}

/// Certify a section radius: halve from the initial guess until every probe
/// point on the exit-plane disk admits a converging travel-time solve with a
/// transversal, non-antipodal landing. A previous radius (for the next
/// crossing index) caps the search so the sequence decreases.
pub fn section_radius(
    flow: &dyn Flow,
    st: &SectionTimes,
    initial: f64,
    prev: Option<f64>,
) -> Result<f64> {
    let seed = st.t_i_j - st.t_e_eps;
    let landing_dir = Vec3::new(st.omega_j.cos(), st.omega_j.sin(), 0.0);
    let mut r = initial;
    if let Some(pr) = prev {
        r = r.min(pr * 0.9);
    }
    let probe = |r: f64| -> Result<bool> {
        let mut points = vec![Vec3::e3()];
        for ring in [0.45, 0.9] {
            for i in 0..8 {
                let a = std::f64::consts::TAU * i as f64 / 8.0;
                points.push(Vec3::new(r * ring * a.cos(), r * ring * a.sin(), 1.0));
            }
        }
        for y in points {
            let v0 = flow.time_derivative(0.0, y)?;
            if v0.x3.abs() < 1e-12 {
                return Ok(false);
            }
            let t = match crate::sections::exterior_travel_time(flow, y, seed) {
                Ok(t) => t,
                Err(_) => return Ok(false),
            };
            if t <= 0.0 {
                return Ok(false);
            }
            let hit = flow.eval(t, y)?;
            let dir = hit.project_l().normalized()?;
            if dir.dot(-landing_dir) > 1.0 - 1e-6 {
                return Ok(false);
            }
        }
        Ok(true)
    };
    for halvings in 0..60 {
        if r <= 0.0 {
            break;
        }
        if probe(r)? {
            return Ok(r);
        }
        let _ = halvings;
        r /= 2.0;
    }
    Err(Error::NoRadiusFound { halvings: 60 })
}
