//! Scalar root finding and 1-d optimization used by the section and
//! refinement machinery: plain bisection, a Newton iteration with bisection
//! fallback, golden-section polish, and an adaptive curve scanner that
//! resolves continuous functions until adjacent samples move by less than a
//! prescribed jump.

use crate::error::{Error, Result};

/// Bisect `f` on `[a, b]` down to an interval of width `tol_x`. Requires a
/// sign change; returns the midpoint of the final bracket.
pub fn bisect<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    tol_x: f64,
    max_iter: usize,
) -> Result<f64> {
    let (mut lo, mut hi) = if a <= b { (a, b) } else { (b, a) };
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Err(Error::NoBracket { a: lo, b: hi });
    }
    for _ in 0..max_iter {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= tol_x || mid == lo || mid == hi {
            return Ok(mid);
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Newton iteration seeded at `seed`, falling back to bisection on the
/// bracket `[seed - radius, seed + radius]` whenever a step leaves the
/// bracket or the derivative degenerates. Transversal roots are simple, so
/// the Newton path converges in a handful of steps.
pub fn newton_bisect<F, D>(
    mut f: F,
    mut df: D,
    seed: f64,
    radius: f64,
    tol: f64,
    max_iter: usize,
) -> Result<f64>
where
    F: FnMut(f64) -> f64,
    D: FnMut(f64) -> f64,
{
    let mut t = seed;
    for _ in 0..max_iter {
        let ft = f(t);
        if ft.abs() <= tol {
            return Ok(t);
        }
        let dt = df(t);
        if dt.abs() > 1e-300 {
            let step = ft / dt;
            let next = t - step;
            if (next - seed).abs() <= radius && next.is_finite() {
                if step.abs() <= tol * (1.0 + t.abs()) {
                    return Ok(next);
                }
                t = next;
                continue;
            }
        }
        // Newton left the trust region; bracket around the seed instead.
        return bisect_scan(&mut f, seed - radius, seed + radius, tol, 256);
    }
    Err(Error::NewtonDiverged { seed })
}

/// Bisection preceded by a scan that locates the first sign change in
/// `[a, b]` over `n` panels.
pub fn bisect_scan<F: FnMut(f64) -> f64>(
    f: &mut F,
    a: f64,
    b: f64,
    tol_x: f64,
    n: usize,
) -> Result<f64> {
    let mut prev_t = a;
    let mut prev_f = f(a);
    if prev_f == 0.0 {
        return Ok(a);
    }
    for i in 1..=n {
        let t = a + (b - a) * i as f64 / n as f64;
        let ft = f(t);
        if ft == 0.0 {
            return Ok(t);
        }
        if ft.signum() != prev_f.signum() {
            return bisect(&mut *f, prev_t, t, tol_x, 200);
        }
        prev_t = t;
        prev_f = ft;
    }
    Err(Error::NoBracket { a, b })
}

/// Golden-section maximization of a unimodal function; also correct for
/// monotone data where the optimum sits at an endpoint.
pub fn golden_max<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol_x: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut lo, mut hi) = (a, b);
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol_x {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        }
    }
    let xm = 0.5 * (lo + hi);
    let fm = f(xm);
    // Guard the endpoints: monotone profiles peak there.
    let fa = f(a);
    let fb = f(b);
    if fa >= fm && fa >= fb {
        (a, fa)
    } else if fb >= fm {
        (b, fb)
    } else {
        (xm, fm)
    }
}

/// Sample `f` on `[a, b]`, subdividing panels until consecutive values
/// differ by at most `max_jump` and the midpoint sits close to the secant
/// (which catches oscillations hiding between coarse samples). At most
/// `max_depth` halvings per initial panel. Returns the ordered sample list.
/// Used to walk angle profiles without skipping level crossings.
pub fn scan_adaptive<F: FnMut(f64) -> f64>(
    f: &mut F,
    a: f64,
    b: f64,
    init_n: usize,
    max_jump: f64,
    max_depth: usize,
) -> Vec<(f64, f64)> {
    fn refine<F: FnMut(f64) -> f64>(
        f: &mut F,
        t0: f64,
        f0: f64,
        t1: f64,
        f1: f64,
        max_jump: f64,
        depth: usize,
        out: &mut Vec<(f64, f64)>,
    ) {
        let tm = 0.5 * (t0 + t1);
        if depth == 0 || tm <= t0 || tm >= t1 {
            out.push((t1, f1));
            return;
        }
        let fm = f(tm);
        let secant_dev = (fm - 0.5 * (f0 + f1)).abs();
        if (f1 - f0).abs() > max_jump || secant_dev > 0.25 * max_jump {
            refine(f, t0, f0, tm, fm, max_jump, depth - 1, out);
            refine(f, tm, fm, t1, f1, max_jump, depth - 1, out);
        } else {
            out.push((tm, fm));
            out.push((t1, f1));
        }
    }

    let mut out: Vec<(f64, f64)> = Vec::with_capacity(2 * init_n + 1);
    let mut prev_t = a;
    let mut prev_f = f(a);
    out.push((prev_t, prev_f));
    for i in 1..=init_n {
        let t = a + (b - a) * i as f64 / init_n as f64;
        let ft = f(t);
        refine(f, prev_t, prev_f, t, ft, max_jump, max_depth, &mut out);
        prev_t = t;
        prev_f = ft;
    }
    out
}

/// All parameter values where the scanned profile crosses `level`, refined
/// by bisection to `tol_x`. Samples with non-finite values (evaluation
/// failures) are skipped, and sign changes are taken between consecutive
/// finite samples, so an isolated bad sample neither hides a crossing nor
/// invents one.
pub fn crossings_at_level<F: FnMut(f64) -> f64>(
    f: &mut F,
    samples: &[(f64, f64)],
    level: f64,
    tol_x: f64,
) -> Vec<f64> {
    let mut roots = Vec::new();
    let mut prev: Option<(f64, f64)> = None;
    for &(t1, f1) in samples {
        if !f1.is_finite() {
            continue;
        }
        if let Some((t0, f0)) = prev {
            let g0 = f0 - level;
            let g1 = f1 - level;
            if g0 == 0.0 {
                roots.push(t0);
            } else if g0.signum() != g1.signum() {
                if let Ok(r) = bisect(|t| f(t) - level, t0, t1, tol_x, 200) {
                    roots.push(r);
                }
            }
        }
        prev = Some((t1, f1));
    }
    if let Some((tl, fl)) = prev {
        if fl == level {
            roots.push(tl);
        }
    }
    roots
}
