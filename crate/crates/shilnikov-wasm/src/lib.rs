//! Browser bindings for the interactive demo page: ledger exploration,
//! angle-lift spirals, and symbolic shadowing, each returning a JSON string
//! the page renders onto canvases.

use wasm_bindgen::prelude::*;

use shilnikov::angles::phi_lift;
use shilnikov::chaos::{
    build_ledger, membership, return_map, shadow_forward, LedgerInputs, SectionSetup, SymbolSeq,
};
use shilnikov::flow::{FieldFlow, IntegratorOpts, LinearFlow, ModelField, ScaledField};
use shilnikov::geometry::{StabilityParams, Vec3};
use shilnikov::report::{fmt_g17, ledger_json, JsonObj};
use shilnikov::sections::{CylinderChart, ExteriorMap, PlaneChart};

fn err_json(msg: &str) -> String {
    let mut obj = JsonObj::new();
    obj.string("error", msg);
    obj.finish()
}

fn setup_inputs(eta_tilde: f64, beta: f64, delta2: f64) -> LedgerInputs {
    LedgerInputs {
        eta_tilde,
        beta,
        delta2_request: delta2,
        ..Default::default()
    }
}

/// Parameter ledger for the exact linear backend with the coordinate
/// exterior model: every inequality with its sides and slack.
#[wasm_bindgen]
pub fn ledger_report(
    sigma: f64,
    mu: f64,
    u: f64,
    eta_tilde: f64,
    beta: f64,
    delta2: f64,
) -> String {
    let inner = || -> shilnikov::Result<String> {
        let p = StabilityParams::new(sigma, mu, u)?;
        let lin = LinearFlow::new(p);
        let setup = SectionSetup {
            flow: &lin,
            params: p,
            cyl: CylinderChart { omega: 0.0 },
            plane: PlaneChart::new(Vec3::e1(), Vec3::e2())?,
            exterior: ExteriorMap::Coordinate { beta_model: beta },
            max_time: 1e4,
        };
        let ledger = build_ledger(&setup, &setup_inputs(eta_tilde, beta, delta2))?;
        Ok(ledger_json(&ledger))
    };
    inner().unwrap_or_else(|e| err_json(&e.to_string()))
}

/// Angle-lift trace along one flowline of the scaled model field
/// (`c_q = 0` falls back to the exact linear flow): samples of
/// `(t, phi, |P_L|, |P_U|)`.
#[allow(clippy::too_many_arguments)]
#[wasm_bindgen]
pub fn spiral_trace(
    sigma: f64,
    mu: f64,
    u: f64,
    c_q: f64,
    epsilon: f64,
    psi: f64,
    log10_delta: f64,
    t_end: f64,
) -> String {
    let inner = || -> shilnikov::Result<String> {
        let p = StabilityParams::new(sigma, mu, u)?;
        let delta = 10f64.powf(log10_delta).clamp(1e-300, 0.999);
        let t_req = t_end.clamp(0.5, 40.0);
        let opts = IntegratorOpts::default();
        // the flight ends on the exit plane; clamp the lift there
        let lift_until = |flow: &dyn shilnikov::flow::Flow| -> shilnikov::Result<_> {
            let x = Vec3::new(psi.cos(), psi.sin(), delta);
            let hit = shilnikov::sections::travel_time_tau(flow, &p, x, 1e4)?;
            phi_lift(flow, &p, psi, delta, t_req.min(hit.tau))
        };
        let lift = if c_q > 0.0 && epsilon > 0.0 {
            let field = ModelField::new(p, c_q, 3.0)?;
            let scaled = ScaledField {
                base: &field,
                epsilon,
            };
            let flow = FieldFlow::new(&scaled, opts);
            lift_until(&flow)?
        } else {
            lift_until(&LinearFlow::new(p))?
        };
        let mut rows = String::from("[");
        for (i, s) in lift.samples.iter().enumerate() {
            if i > 0 {
                rows.push(',');
            }
            rows.push_str(&format!(
                "[{},{},{},{}]",
                fmt_g17(s.t),
                fmt_g17(s.phi),
                fmt_g17(s.p_l),
                fmt_g17(s.p_u)
            ));
        }
        rows.push(']');
        let t_actual = lift.samples.last().map(|s| s.t).unwrap_or(0.0);
        let mut obj = JsonObj::new();
        obj.num("mu", p.mu)
            .num("psi", psi)
            .num("t_end", t_actual)
            .num("max_mismatch", lift.max_mismatch)
            .raw("samples", &rows);
        Ok(obj.finish())
    };
    inner().unwrap_or_else(|e| err_json(&e.to_string()))
}

/// Shadow a binary itinerary on the linear reference setup and return the
/// verified trajectory together with the window geometry the page draws.
#[wasm_bindgen]
pub fn shadow_run(sigma: f64, mu: f64, u: f64, eta_tilde: f64, symbols: String) -> String {
    let inner = || -> shilnikov::Result<String> {
        let p = StabilityParams::new(sigma, mu, u)?;
        let seq = SymbolSeq::parse(&symbols)?;
        if seq.len() > 14 {
            return Err(shilnikov::Error::Config(
                "demo budget: at most 14 symbols".into(),
            ));
        }
        let lin = LinearFlow::new(p);
        let setup = SectionSetup {
            flow: &lin,
            params: p,
            cyl: CylinderChart { omega: 0.0 },
            plane: PlaneChart::new(Vec3::e1(), Vec3::e2())?,
            exterior: ExteriorMap::Coordinate { beta_model: 0.5 },
            max_time: 1e4,
        };
        let ledger = build_ledger(&setup, &setup_inputs(eta_tilde, 0.5, 1e-3))?;
        ledger.require_feasible()?;
        let rm = return_map(&setup, &ledger);
        let traj = shadow_forward(&rm, &ledger, &seq)?;
        let log1 = ledger.delta1.ln();
        let log2 = ledger.delta2.ln();
        let mut pts = String::from("[");
        for (i, &(psi, delta)) in traj.points.iter().enumerate() {
            if i > 0 {
                pts.push(',');
            }
            // normalized rectangle coordinates: angle over the certified
            // square, height in log scale between the levels
            let xn = psi / ledger.alpha_j;
            let yn = (delta.ln() - log1) / (log2 - log1);
            let mem = membership(&rm, &ledger, psi, delta)?;
            pts.push_str(&format!(
                "[{},{},{},{},{}]",
                fmt_g17(xn),
                fmt_g17(yn),
                traj.symbols[i],
                fmt_g17(mem.phi),
                fmt_g17(mem.margin)
            ));
        }
        pts.push(']');
        let mut obj = JsonObj::new();
        obj.num("alpha", ledger.alpha_j)
            .num("delta1", ledger.delta1)
            .num("delta2", ledger.delta2)
            .num("psi_j", ledger.psi_j)
            .num("max_residual", traj.max_residual())
            .num("min_margin", traj.min_margin())
            .int("symbols", traj.symbols.len() as i64)
            .raw("points", &pts);
        Ok(obj.finish())
    };
    inner().unwrap_or_else(|e| err_json(&e.to_string()))
}
