//! Plain-text outputs: CSV tables with fixed 17-significant-digit floats
//! (lossless for doubles, so identical runs produce identical bytes) and a
//! small hand-rolled JSON writer for ledger dumps.

use crate::chaos::{ChaosLedger, TrajectoryRecord};
use crate::homoclinic::SectionTimes;

/// 17 significant digits; round-trips every finite double exactly.
pub fn fmt_g17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Incremental CSV builder with a fixed column count.
pub struct Csv {
    buf: String,
    cols: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut buf = String::new();
        buf.push_str(&header.join(","));
        buf.push('\n');
        Csv {
            buf,
            cols: header.len(),
        }
    }

    pub fn row(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.cols, "column count mismatch");
        let mut first = true;
        for v in values {
            if !first {
                self.buf.push(',');
            }
            self.buf.push_str(&fmt_g17(*v));
            first = false;
        }
        self.buf.push('\n');
    }

    /// Row with leading integer columns followed by floats.
    pub fn row_mixed(&mut self, ints: &[i64], values: &[f64]) {
        assert_eq!(
            ints.len() + values.len(),
            self.cols,
            "column count mismatch"
        );
        let mut parts: Vec<String> = ints.iter().map(|v| v.to_string()).collect();
        parts.extend(values.iter().map(|v| fmt_g17(*v)));
        self.buf.push_str(&parts.join(","));
        self.buf.push('\n');
    }

    pub fn finish(self) -> String {
        self.buf
    }
}

/// Minimal JSON object writer (flat, numbers and strings only).
pub struct JsonObj {
    buf: String,
    first: bool,
}

impl JsonObj {
    pub fn new() -> Self {
        JsonObj {
            buf: String::from("{"),
            first: true,
        }
    }

    fn key(&mut self, key: &str) {
        if !self.first {
            self.buf.push(',');
        }
        self.first = false;
        self.buf.push('"');
        self.buf.push_str(key);
        self.buf.push_str("\":");
    }

    pub fn num(&mut self, key: &str, v: f64) -> &mut Self {
        self.key(key);
        if v.is_finite() {
            self.buf.push_str(&fmt_g17(v));
        } else {
            self.buf.push_str("null");
        }
        self
    }

    pub fn int(&mut self, key: &str, v: i64) -> &mut Self {
        self.key(key);
        self.buf.push_str(&v.to_string());
        self
    }

    pub fn boolean(&mut self, key: &str, v: bool) -> &mut Self {
        self.key(key);
        self.buf.push_str(if v { "true" } else { "false" });
        self
    }

    pub fn string(&mut self, key: &str, v: &str) -> &mut Self {
        self.key(key);
        self.buf.push('"');
        for ch in v.chars() {
            match ch {
                '"' => self.buf.push_str("\\\""),
                '\\' => self.buf.push_str("\\\\"),
                c if (c as u32) < 0x20 => self.buf.push_str(&format!("\\u{:04x}", c as u32)),
                c => self.buf.push(c),
            }
        }
        self.buf.push('"');
        self
    }

    pub fn raw(&mut self, key: &str, v: &str) -> &mut Self {
        self.key(key);
        self.buf.push_str(v);
        self
    }

    pub fn finish(mut self) -> String {
        self.buf.push('}');
        self.buf
    }
}

impl Default for JsonObj {
    fn default() -> Self {
        Self::new()
    }
}

/// The full parameter set plus per-inequality status.
pub fn ledger_json(ledger: &ChaosLedger) -> String {
    let mut checks = String::from("[");
    for (i, c) in ledger.checks.iter().enumerate() {
        if i > 0 {
            checks.push(',');
        }
        let mut obj = JsonObj::new();
        obj.string("name", c.key.label())
            .num("lhs", c.lhs)
            .num("rhs", c.rhs)
            .num("slack", c.slack())
            .boolean("ok", c.ok);
        checks.push_str(&obj.finish());
    }
    checks.push(']');
    let mut obj = JsonObj::new();
    obj.num("sigma", ledger.params.sigma)
        .num("mu", ledger.params.mu)
        .num("u", ledger.params.u)
        .num("eta_tilde", ledger.eta_tilde)
        .num("eta", ledger.eta)
        .num("m_eta_sigma", ledger.m_eta_sigma)
        .int("j", ledger.j as i64)
        .num("epsilon_j", ledger.epsilon_j)
        .num("eps_eta_cap", ledger.eps_eta_cap)
        .num("eps_box_cap", ledger.eps_box_cap)
        .num("r_j", ledger.r_j)
        .num("omega_j", ledger.omega_j)
        .num("c", ledger.c)
        .num("k", ledger.k)
        .num("beta", ledger.beta)
        .num("delta_j_star", ledger.delta_j_star)
        .num("delta_j", ledger.delta_j)
        .num("alpha_j", ledger.alpha_j)
        .num("delta_beta_j", ledger.delta_beta_j)
        .num("delta2_request", ledger.delta2_request)
        .num("delta2", ledger.delta2)
        .num("delta1", ledger.delta1)
        .num("m1", ledger.m1)
        .num("m2", ledger.m2)
        .num("psi_j", ledger.psi_j)
        .num("kappa_norm", ledger.kappa_norm)
        .num("kappa_inv_norm", ledger.kappa_inv_norm)
        .boolean("feasible", ledger.feasible())
        .raw("checks", &checks);
    obj.finish()
}

/// Human-readable slack table, one line per inequality.
pub fn ledger_table(ledger: &ChaosLedger) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "parameters: sigma={} mu={} u={} eta_tilde={} eta={:.6e} beta={}\n",
        ledger.params.sigma,
        ledger.params.mu,
        ledger.params.u,
        ledger.eta_tilde,
        ledger.eta,
        ledger.beta
    ));
    out.push_str(&format!(
        "scales: delta_j*={:.6e} delta_j={:.6e} alpha_j={:.6e} delta_beta_j={:.6e}\n",
        ledger.delta_j_star, ledger.delta_j, ledger.alpha_j, ledger.delta_beta_j
    ));
    out.push_str(&format!(
        "levels: delta2={:.6e} (requested {:.6e}) delta1={:.6e} c={:.8} k={:.6e}\n",
        ledger.delta2, ledger.delta2_request, ledger.delta1, ledger.c, ledger.k
    ));
    out.push_str(&format!(
        "angles: m1={:.6} m2={:.6} psi_j={:.6} omega_j={:.6}\n",
        ledger.m1, ledger.m2, ledger.psi_j, ledger.omega_j
    ));
    for c in &ledger.checks {
        out.push_str(&format!(
            "  [{}] {:<55} lhs={: >13.6e}  rhs={: >13.6e}  slack={: >13.6e}\n",
            if c.ok { "ok" } else { "FAIL" },
            c.key.label(),
            c.lhs,
            c.rhs,
            c.slack()
        ));
    }
    out.push_str(&format!(
        "feasible: {}\n",
        if ledger.feasible() { "yes" } else { "no" }
    ));
    out
}

/// Trajectory table: `n, s_n, psi, delta, Phi, margin, residual`. The last
/// row's residual column is 0 (there is no successor to compare against).
pub fn trajectory_csv(traj: &TrajectoryRecord) -> String {
    let mut csv = Csv::new(&["n", "s_n", "psi", "delta", "phi", "margin", "residual"]);
    for i in 0..traj.points.len() {
        let n = traj.offset + i as i64;
        let res = traj.residuals.get(i).copied().unwrap_or(0.0);
        csv.row_mixed(
            &[n, traj.symbols[i] as i64],
            &[
                traj.points[i].0,
                traj.points[i].1,
                traj.phis[i],
                traj.margins[i],
                res,
            ],
        );
    }
    csv.finish()
}

/// Crossing table: `j, t_I_j, eps_j, r_j, omega_j`.
pub fn crossings_csv(rows: &[SectionTimes]) -> String {
    let mut csv = Csv::new(&["j", "t_I_j", "eps_j", "r_j", "omega_j"]);
    for st in rows {
        csv.row_mixed(&[st.j as i64], &[st.t_i_j, st.eps_j, st.r_j, st.omega_j]);
    }
    csv.finish()
}
