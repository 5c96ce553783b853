//! Run configuration: a flat `key = value` file with `#` comments. Every
//! key has a documented default; command-line overrides reuse the same
//! setter, so a flag and a file line behave identically.

use crate::chaos::{LedgerInputs, LedgerOverrides};
use crate::error::{Error, Result};
use crate::flow::IntegratorOpts;
use crate::geometry::{StabilityParams, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Linear,
    ModelField,
    Flattened,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExteriorKind {
    Identity,
    Model,
}

/// Everything a run needs. Fields map one-to-one onto config keys.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelKind,
    pub sigma: f64,
    pub mu: f64,
    pub u: f64,
    pub epsilon: f64,
    pub c_q: f64,
    pub cutoff_radius: f64,
    pub eta_tilde: f64,
    pub eta: Option<f64>,
    pub beta: f64,
    pub delta2: f64,
    pub j: usize,
    pub omega: f64,
    pub r_section: f64,
    pub exterior: ExteriorKind,
    pub beta_model: f64,
    pub v_j: (f64, f64),
    pub w_j: (f64, f64),
    pub margin: f64,
    pub alpha_cap: f64,
    pub integ_rtol: f64,
    pub integ_max_steps: usize,
    pub eta_grid_spatial: usize,
    pub eta_grid_temporal: usize,
    pub eps_cap: f64,
    pub max_time: f64,
    pub seed: u64,
    pub flatten_c: f64,
    pub flatten_cutoff: f64,
    pub flatten_fit_radius: f64,
    pub flatten_degree: u32,
    pub flatten_r_hat: f64,
    pub flatten_lambda: f64,
    pub window_shifts: Vec<usize>,
    pub window_budget: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelKind::Linear,
            sigma: -1.0,
            mu: std::f64::consts::PI,
            u: 1.5,
            epsilon: 1e-4,
            c_q: 0.1,
            cutoff_radius: 3.0,
            eta_tilde: 0.1,
            eta: None,
            beta: 0.5,
            delta2: 1e-3,
            j: 1,
            omega: 0.0,
            r_section: 1.5,
            exterior: ExteriorKind::Model,
            beta_model: 0.5,
            v_j: (1.0, 0.0),
            w_j: (0.0, 1.0),
            margin: 0.5,
            alpha_cap: 1.5,
            integ_rtol: 1e-11,
            integ_max_steps: 2_000_000,
            eta_grid_spatial: 9,
            eta_grid_temporal: 11,
            eps_cap: 1e6,
            max_time: 1e4,
            seed: 42,
            flatten_c: 0.3,
            flatten_cutoff: 1.0,
            flatten_fit_radius: 0.4,
            flatten_degree: 3,
            flatten_r_hat: 0.15,
            flatten_lambda: 0.1,
            window_shifts: vec![2, 4, 8, 16],
            window_budget: 64,
        }
    }
}

fn parse_num(key: &str, value: &str) -> Result<f64> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("key `{key}`: expected a number, got `{value}`")))
}

fn parse_pair(key: &str, value: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = value.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::Config(format!("key `{key}`: expected `a, b`")));
    }
    Ok((parse_num(key, parts[0])?, parse_num(key, parts[1])?))
}

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model" => {
                self.model = match v {
                    "linear" => ModelKind::Linear,
                    "model-field" => ModelKind::ModelField,
                    "flattened" => ModelKind::Flattened,
                    other => {
                        return Err(Error::Config(format!("unknown model `{other}`")));
                    }
                }
            }
            "exterior" => {
                self.exterior = match v {
                    "identity" => ExteriorKind::Identity,
                    "model" => ExteriorKind::Model,
                    other => {
                        return Err(Error::Config(format!("unknown exterior `{other}`")));
                    }
                }
            }
            "sigma" => self.sigma = parse_num(key, v)?,
            "mu" => self.mu = parse_num(key, v)?,
            "u" => self.u = parse_num(key, v)?,
            "epsilon" => self.epsilon = parse_num(key, v)?,
            "c_q" => self.c_q = parse_num(key, v)?,
            "cutoff_radius" => self.cutoff_radius = parse_num(key, v)?,
            "eta_tilde" => self.eta_tilde = parse_num(key, v)?,
            "eta" => {
                self.eta = if v == "auto" {
                    None
                } else {
                    Some(parse_num(key, v)?)
                };
            }
            "beta" => self.beta = parse_num(key, v)?,
            "delta2" => self.delta2 = parse_num(key, v)?,
            "j" => self.j = parse_num(key, v)? as usize,
            "omega" => self.omega = parse_num(key, v)?,
            "r_section" => self.r_section = parse_num(key, v)?,
            "beta_model" => self.beta_model = parse_num(key, v)?,
            "v_j" => self.v_j = parse_pair(key, v)?,
            "w_j" => self.w_j = parse_pair(key, v)?,
            "margin" => self.margin = parse_num(key, v)?,
            "alpha_cap" => self.alpha_cap = parse_num(key, v)?,
            "integ_rtol" => self.integ_rtol = parse_num(key, v)?,
            "integ_max_steps" => self.integ_max_steps = parse_num(key, v)? as usize,
            "eta_grid_spatial" => self.eta_grid_spatial = parse_num(key, v)? as usize,
            "eta_grid_temporal" => self.eta_grid_temporal = parse_num(key, v)? as usize,
            "eps_cap" => self.eps_cap = parse_num(key, v)?,
            "max_time" => self.max_time = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)? as u64,
            "flatten_c" => self.flatten_c = parse_num(key, v)?,
            "flatten_cutoff" => self.flatten_cutoff = parse_num(key, v)?,
            "flatten_fit_radius" => self.flatten_fit_radius = parse_num(key, v)?,
            "flatten_degree" => self.flatten_degree = parse_num(key, v)? as u32,
            "flatten_r_hat" => self.flatten_r_hat = parse_num(key, v)?,
            "flatten_lambda" => self.flatten_lambda = parse_num(key, v)?,
            "window_shifts" => {
                self.window_shifts = v
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| Error::Config("bad shift list".into()))
                    })
                    .collect::<Result<Vec<usize>>>()?;
            }
            "window_budget" => self.window_budget = parse_num(key, v)? as usize,
            other => {
                return Err(Error::Config(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }

    /// Parse a whole config file.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Range checks for every numeric field.
    pub fn validate(&self) -> Result<()> {
        self.params()?;
        let checks: [(&str, bool); 12] = [
            ("epsilon", self.epsilon > 0.0),
            ("c_q", self.c_q >= 0.0),
            ("cutoff_radius", self.cutoff_radius > 0.0),
            ("eta_tilde", self.eta_tilde > 0.0),
            ("beta", self.beta > 0.0 && self.beta <= 0.5),
            ("delta2", self.delta2 > 0.0 && self.delta2 < 1.0),
            ("r_section", self.r_section > 0.0),
            ("margin", self.margin > 0.0 && self.margin < 1.0),
            ("alpha_cap", self.alpha_cap > 0.0),
            (
                "integ_rtol",
                self.integ_rtol > 0.0 && self.integ_rtol < 1e-3,
            ),
            ("max_time", self.max_time > 1.0),
            ("flatten_fit_radius", self.flatten_fit_radius > 0.0),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(Error::Config(format!(
                    "`{name}` outside its admissible range"
                )));
            }
        }
        if let Some(eta) = self.eta {
            if !(eta > 0.0 && eta < 1.0) {
                return Err(Error::Config("`eta` outside its admissible range".into()));
            }
        }
        let det = self.v_j.0 * self.w_j.1 - self.v_j.1 * self.w_j.0;
        if det.abs() < 1e-12 {
            return Err(Error::Config("`v_j`, `w_j` must be independent".into()));
        }
        Ok(())
    }

    pub fn params(&self) -> Result<StabilityParams> {
        StabilityParams::new(self.sigma, self.mu, self.u).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn integrator(&self) -> IntegratorOpts {
        IntegratorOpts {
            rtol: self.integ_rtol,
            max_steps: self.integ_max_steps,
        }
    }

    pub fn v_vec(&self) -> Vec3 {
        Vec3::new(self.v_j.0, self.v_j.1, 0.0)
    }

    pub fn w_vec(&self) -> Vec3 {
        Vec3::new(self.w_j.0, self.w_j.1, 0.0)
    }

    /// Ledger inputs with the measured scaling caps supplied by the caller
    /// (infinite for the exact linear backend).
    pub fn ledger_inputs(&self, eps_eta_cap: f64, eps_box_cap: f64) -> LedgerInputs {
        LedgerInputs {
            eta_tilde: self.eta_tilde,
            beta: self.beta,
            delta2_request: self.delta2,
            epsilon_j: self.epsilon,
            j: self.j,
            r_j: self.r_section,
            eps_eta_cap,
            eps_box_cap,
            alpha_cap: self.alpha_cap,
            margin: self.margin,
            overrides: LedgerOverrides {
                eta: self.eta,
                ..Default::default()
            },
        }
    }
}
