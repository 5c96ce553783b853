//! Experiment driver: parameter checks, return-map grids, symbolic
//! shadowing, the straightening pipeline, and the closeness-estimate
//! verification suite, all driven by one key-value config file with
//! one-for-one command-line overrides.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use shilnikov::angles::{arcsin_bound, delta_angle, phi_lift};
use shilnikov::chaos::{
    build_ledger, derive_eta, return_map, shadow_entire_window, shadow_forward, ChaosLedger,
    SectionSetup, SymbolSeq,
};
use shilnikov::config::{ExteriorKind, ModelKind, RunConfig};
use shilnikov::error::{Error, Result};
use shilnikov::flatten::{
    conjugate_flow, eigenframe, extend_graph, fit_local_manifolds, verify_structure,
    ConjugatedField, CurvedStableField, Straightener,
};
use shilnikov::flow::{
    box_probe, check_sandwich, epsilon_box, epsilon_box_by, epsilon_cap_by, epsilon_for_eta,
    estimate_eta, estimate_eta_refined, exp_bounds, iterate_box, FieldFlow, Flow, LinearFlow,
    ModelField, ScaledField, ScaledFlow,
};
use shilnikov::geometry::{StabilityParams, Vec3};
use shilnikov::homoclinic::{exit_crossings, section_radius, synthetic_loop};
use shilnikov::report::{crossings_csv, fmt_g17, ledger_json, ledger_table, trajectory_csv, Csv};
use shilnikov::sections::{CylinderChart, ExteriorMap, PlaneChart};

#[derive(Parser)]
#[command(
    name = "shilnikov",
    about = "Numerical laboratory for chaos near a homoclinic loop"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file (`key = value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set eta_tilde=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the parameter ledger and print the per-inequality slack table.
    CheckParams {
        #[command(flatten)]
        common: Common,
        /// Emit the ledger as JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Evaluate the return map and angle on a grid and emit CSV.
    ReturnMap {
        #[command(flatten)]
        common: Common,
        /// Grid as `NxM` over the certified rectangle, e.g. `10x10`.
        #[arg(long, default_value = "10x10")]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also export an angle-lift trace `(t, phi, |P_L|, |P_U|)`.
        #[arg(long)]
        spiral: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        spiral_psi: f64,
        #[arg(long, default_value_t = 1e-6)]
        spiral_delta: f64,
        #[arg(long, default_value_t = 8.0)]
        spiral_t: f64,
    },
    /// Shadow a binary symbol sequence (prefix `w:` for entire-window mode).
    Shadow {
        #[command(flatten)]
        common: Common,
        /// Sequence like `0101`, run syntax `0^5`, window `w:0^5`.
        symbols: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the straightening pipeline on the configured field.
    Flatten {
        #[command(flatten)]
        common: Common,
        /// Export the fitted graph coefficients.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo verification of the closeness estimates and angle bounds.
    VerifyEstimates {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Export the crossing table of the built-in homoclinic loop.
        #[arg(long)]
        crossings: Option<PathBuf>,
    },
}

fn log_enabled() -> bool {
    std::env::var("SHILNIKOV_LOG")
        .map(|v| v == "debug")
        .unwrap_or(false)
}

macro_rules! debug_log {
    ($($arg:tt)*) => {
        if log_enabled() {
            eprintln!($($arg)*);
        }
    };
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        None => RunConfig::default(),
        Some(path) => RunConfig::parse(&fs::read_to_string(path)?)?,
    };
    for pair in &common.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not KEY=VALUE")))?;
        cfg.set(key.trim(), value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Build the configured flow backend and hand it to the continuation; the
/// intermediate owners live on this stack frame.
fn with_flow<T>(
    cfg: &RunConfig,
    run: impl FnOnce(&dyn Flow, StabilityParams) -> Result<T>,
) -> Result<T> {
    let p = cfg.params()?;
    match cfg.model {
        ModelKind::Linear => run(&LinearFlow::new(p), p),
        ModelKind::ModelField => {
            let field = ModelField::new(p, cfg.c_q, cfg.cutoff_radius)?;
            let scaled = ScaledField {
                base: &field,
                epsilon: cfg.epsilon,
            };
            let flow = FieldFlow::new(&scaled, cfg.integrator());
            run(&flow, p)
        }
        ModelKind::Flattened => {
            let field = CurvedStableField::new(p, cfg.flatten_c, cfg.flatten_cutoff);
            let frame = eigenframe(&field)?;
            let conj = ConjugatedField {
                base: &field,
                frame,
            };
            let graph = fit_local_manifolds(
                &conj,
                cfg.flatten_fit_radius,
                cfg.flatten_degree,
                cfg.integrator(),
            )?;
            let ext = extend_graph(&graph, cfg.flatten_r_hat, cfg.flatten_lambda)?;
            let s = Straightener::new(ext)?;
            let flat = conjugate_flow(&field, frame, s, cfg.integrator());
            let scaled = ScaledFlow {
                base: &flat,
                epsilon: cfg.epsilon,
            };
            run(&scaled, frame.params)
        }
    }
}

/// Measured scaling caps for the active backend; the exact linear flow has
/// zero deviation at every scale.
fn eps_caps(cfg: &RunConfig) -> Result<(f64, f64)> {
    let p = cfg.params()?;
    match cfg.model {
        ModelKind::Linear => Ok((f64::INFINITY, f64::INFINITY)),
        ModelKind::ModelField => {
            let eta = cfg.eta.unwrap_or_else(|| derive_eta(&p, cfg.eta_tilde));
            let field = ModelField::new(p, cfg.c_q, cfg.cutoff_radius)?;
            debug_log!("measuring eps(eta) for eta = {eta:.6e}");
            let cap_eta = epsilon_for_eta(&field, &p, eta, 5, 4, cfg.integrator(), cfg.eps_cap)?;
            let cap_box = epsilon_box(&field, &p, cfg.integrator(), cfg.eps_cap)?;
            Ok((cap_eta, cap_box))
        }
        ModelKind::Flattened => {
            // measure directly on the straightened flow
            let eta = cfg.eta.unwrap_or_else(|| derive_eta(&p, cfg.eta_tilde));
            let field = CurvedStableField::new(p, cfg.flatten_c, cfg.flatten_cutoff);
            let frame = eigenframe(&field)?;
            let conj = ConjugatedField {
                base: &field,
                frame,
            };
            let graph = fit_local_manifolds(
                &conj,
                cfg.flatten_fit_radius,
                cfg.flatten_degree,
                cfg.integrator(),
            )?;
            let ext = extend_graph(&graph, cfg.flatten_r_hat, cfg.flatten_lambda)?;
            let straight = Straightener::new(ext)?;
            let flat = conjugate_flow(&field, frame, straight, cfg.integrator());
            debug_log!("measuring flattened eps(eta) for eta = {eta:.6e}");
            let cap_eta = epsilon_cap_by(
                |eps| {
                    let scaled = ScaledFlow {
                        base: &flat,
                        epsilon: eps,
                    };
                    Ok(estimate_eta(&scaled, &frame.params, 5, 4)?.eta)
                },
                eta,
                cfg.eps_cap,
            )?;
            let r_b = shilnikov::geometry::box_constants(&frame.params).r_outer;
            let cap_box = epsilon_box_by(
                |eps| {
                    let scaled = ScaledFlow {
                        base: &flat,
                        epsilon: eps,
                    };
                    box_probe(&scaled, r_b)
                },
                cfg.eps_cap,
            )?;
            Ok((cap_eta, cap_box))
        }
    }
}

fn with_setup<T>(
    cfg: &RunConfig,
    run: impl FnOnce(&SectionSetup<'_>, &ChaosLedger) -> Result<T>,
) -> Result<T> {
    let caps = eps_caps(cfg)?;
    with_flow(cfg, |flow, p| {
        let setup = SectionSetup {
            flow,
            params: p,
            cyl: CylinderChart { omega: cfg.omega },
            plane: PlaneChart::new(cfg.v_vec(), cfg.w_vec())?,
            exterior: match cfg.exterior {
                ExteriorKind::Identity => ExteriorMap::Identity,
                ExteriorKind::Model => ExteriorMap::Coordinate {
                    beta_model: cfg.beta_model,
                },
            },
            max_time: cfg.max_time,
        };
        let ledger = build_ledger(&setup, &cfg.ledger_inputs(caps.0, caps.1))?;
        run(&setup, &ledger)
    })
}

fn write_or_print(path: &Option<PathBuf>, content: &str) -> Result<()> {
    match path {
        Some(p) => {
            fs::write(p, content)?;
            Ok(())
        }
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn cmd_check_params(common: &Common, json: bool) -> Result<i32> {
    let cfg = load_config(common)?;
    with_setup(&cfg, |_setup, ledger| {
        if json {
            println!("{}", ledger_json(ledger));
        } else {
            print!("{}", ledger_table(ledger));
        }
        match ledger.first_failure() {
            None => Ok(0),
            Some(c) => {
                eprintln!(
                    "infeasible at `{}` (slack {:.3e})",
                    c.key.label(),
                    c.slack()
                );
                Ok(2)
            }
        }
    })
}

fn cmd_return_map(
    common: &Common,
    grid: &str,
    out: &Option<PathBuf>,
    spiral: &Option<PathBuf>,
    spiral_psi: f64,
    spiral_delta: f64,
    spiral_t: f64,
) -> Result<i32> {
    let cfg = load_config(common)?;
    let (n, m) = grid
        .split_once('x')
        .and_then(|(a, b)| {
            Some((
                a.trim().parse::<usize>().ok()?,
                b.trim().parse::<usize>().ok()?,
            ))
        })
        .ok_or_else(|| Error::Config(format!("bad grid shape `{grid}`")))?;
    if n == 0 || m == 0 {
        return Err(Error::Config("grid must be at least 1x1".into()));
    }
    with_setup(&cfg, |setup, ledger| {
        ledger.require_feasible()?;
        let rm = return_map(setup, ledger);
        let mut csv = Csv::new(&["psi", "delta", "q1", "q2", "tau", "phi", "contained"]);
        for i in 0..n {
            let psi = if n == 1 {
                0.0
            } else {
                -ledger.alpha_j + 2.0 * ledger.alpha_j * i as f64 / (n - 1) as f64
            };
            for k in 0..m {
                let delta = ledger.delta_beta_j * (k + 1) as f64 / m as f64;
                let inner = rm.inner_full(psi, delta)?;
                let q = rm.exterior.apply(&rm.cyl, &rm.plane, inner.coords)?;
                let contained = q.0.abs() <= ledger.alpha_j && q.1.abs() <= ledger.alpha_j;
                csv.row(&[
                    psi,
                    delta,
                    q.0,
                    q.1,
                    inner.hit.tau,
                    inner.phi,
                    if contained { 1.0 } else { 0.0 },
                ]);
            }
        }
        write_or_print(out, &csv.finish())?;
        if let Some(spiral_path) = spiral {
            let lift = phi_lift(
                setup.flow,
                &setup.params,
                spiral_psi,
                spiral_delta,
                spiral_t,
            )?;
            let mut csv = Csv::new(&["t", "phi", "p_l", "p_u"]);
            for s in &lift.samples {
                csv.row(&[s.t, s.phi, s.p_l, s.p_u]);
            }
            fs::write(spiral_path, csv.finish())?;
        }
        Ok(0)
    })
}

fn cmd_shadow(common: &Common, symbols: &str, out: &Option<PathBuf>) -> Result<i32> {
    let cfg = load_config(common)?;
    let seq = SymbolSeq::parse(symbols)?;
    with_setup(&cfg, |setup, ledger| {
        ledger.require_feasible()?;
        let rm = return_map(setup, ledger);
        let traj = if seq.offset < 0 {
            let win =
                shadow_entire_window(&rm, ledger, &seq, &cfg.window_shifts, cfg.window_budget)?;
            for (i, d) in win.diffs.iter().enumerate() {
                println!(
                    "window shift {} -> {}: |z0 difference| = {}",
                    win.ks[i],
                    win.ks[i + 1],
                    fmt_g17(*d)
                );
            }
            win.trajectory
        } else {
            shadow_forward(&rm, ledger, &seq)?
        };
        write_or_print(out, &trajectory_csv(&traj))?;
        println!(
            "verified=true symbols={} max_residual={} min_margin={}",
            traj.symbols.len(),
            fmt_g17(traj.max_residual()),
            fmt_g17(traj.min_margin())
        );
        Ok(0)
    })
}

fn cmd_flatten(common: &Common, out: &Option<PathBuf>) -> Result<i32> {
    let cfg = load_config(common)?;
    let p = cfg.params()?;
    let field = CurvedStableField::new(p, cfg.flatten_c, cfg.flatten_cutoff);
    let frame = eigenframe(&field)?;
    println!("eigenframe residual: {}", fmt_g17(frame.residual));
    let conj = ConjugatedField {
        base: &field,
        frame,
    };
    let graph = fit_local_manifolds(
        &conj,
        cfg.flatten_fit_radius,
        cfg.flatten_degree,
        cfg.integrator(),
    )?;
    println!("fit invariance defect: {}", fmt_g17(graph.fit_defect));
    let ext = extend_graph(&graph, cfg.flatten_r_hat, cfg.flatten_lambda)?;
    println!("extension radius: {}", fmt_g17(ext.r_hat));
    if let Some(path) = out {
        let mut csv = Csv::new(&["kind", "i", "j", "coeff"]);
        for &(i, j, c) in &ext.stable.terms {
            csv.row_mixed(&[0, i as i64, j as i64], &[c]);
        }
        for (k, &c) in ext.unstable.coeffs1.iter().enumerate() {
            csv.row_mixed(&[1, k as i64 + 2, 0], &[c]);
        }
        for (k, &c) in ext.unstable.coeffs2.iter().enumerate() {
            csv.row_mixed(&[2, k as i64 + 2, 0], &[c]);
        }
        fs::write(path, csv.finish())?;
    }
    let s = Straightener::new(ext)?;
    println!("straightener deviation: {}", fmt_g17(s.deviation));
    let flat = conjugate_flow(&field, frame, s, cfg.integrator());
    let report = verify_structure(&flat, &frame.params, None)?;
    println!(
        "fixed point residual: {}",
        fmt_g17(report.fixed_point_residual)
    );
    println!("block residual: {}", fmt_g17(report.block_residual));
    println!(
        "invariant planes inside radius {} (residual {})",
        fmt_g17(report.invariance_radius),
        fmt_g17(report.invariance_residual)
    );
    println!("flowline candidate: not checked");
    if report.passed(1e-8) {
        println!("structure: PASS");
        Ok(0)
    } else {
        println!("structure: FAIL");
        Ok(3)
    }
}

fn cmd_verify_estimates(
    common: &Common,
    samples: usize,
    crossings: &Option<PathBuf>,
) -> Result<i32> {
    let cfg = load_config(common)?;
    let p = cfg.params()?;
    let mut failures = 0usize;

    with_flow(&cfg, |flow, p| {
        let mut check = |name: &str, ok: bool, detail: String| {
            println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
            if !ok {
                failures += 1;
            }
        };
        let (coarse, fine) =
            estimate_eta_refined(flow, &p, cfg.eta_grid_spatial, cfg.eta_grid_temporal)?;
        let converged = (fine.eta - coarse.eta).abs() <= 0.10 * fine.eta.max(1e-12);
        check(
            "deviation grid convergence",
            converged,
            format!("eta = {:.6e} (refined {:.6e})", coarse.eta, fine.eta),
        );
        let eta = (fine.eta * 1.3).max(1e-9).min(p.sigma.exp() / 2.0 * 0.999);
        let mut rng = StdRng::seed_from_u64(cfg.seed);
        let mut worst_dev = 0.0f64;
        let mut violations = 0usize;
        for _ in 0..samples {
            let ang = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let rad = rng.random_range(0.0..1.0f64).sqrt();
            let x = Vec3::new(
                rad * ang.cos(),
                rad * ang.sin(),
                rng.random_range(-1.0..1.0),
            );
            let t = rng.random_range(0.0..1.0);
            let rep = check_sandwich(flow, &p, eta, x, t)?;
            if !rep.all_ok() {
                violations += 1;
            }
            worst_dev = worst_dev.max(rep.dev_u.lhs).max(rep.dev_l.lhs);
        }
        check(
            "projection sandwiches",
            violations == 0,
            format!("{samples} samples, worst deviation {worst_dev:.3e}"),
        );

        let mut box_violations = 0usize;
        for _ in 0..samples / 4 {
            let n = rng.random_range(1..=8usize);
            let cap = (-p.u * (n as f64 + 1.0)).exp() * 0.8;
            let ang = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let x = Vec3::new(ang.cos(), ang.sin(), rng.random_range(0.0..cap).max(1e-300));
            match iterate_box(flow, &p, eta, x, n) {
                Ok(rep) if rep.all_ok() => {}
                _ => box_violations += 1,
            }
        }
        check(
            "unit-box iteration bounds",
            box_violations == 0,
            format!("{} samples", samples / 4),
        );

        let eta_tilde = cfg.eta_tilde;
        let mut exp_violations = 0usize;
        for _ in 0..samples / 4 {
            let n = rng.random_range(1..=8usize);
            let cap = (-p.u * (n as f64 + 1.0)).exp() * 0.8;
            let ang = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let x = Vec3::new(ang.cos(), ang.sin(), rng.random_range(0.0..cap).max(1e-300));
            match exp_bounds(flow, &p, eta_tilde, eta, n, x) {
                Ok(rep) if rep.all_ok() => {}
                _ => exp_violations += 1,
            }
        }
        check(
            "uniform-rate exponential bounds",
            exp_violations == 0,
            format!("{} samples", samples / 4),
        );

        let bound = arcsin_bound(&p, eta);
        let mut angle_violations = 0usize;
        let mut worst = 0.0f64;
        for _ in 0..samples {
            let psi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let rad = rng.random_range(0.05..1.0);
            let x = Vec3::new(
                rad * psi.cos(),
                rad * psi.sin(),
                rng.random_range(-1.0..1.0),
            );
            let t = rng.random_range(0.0..1.0);
            let d = delta_angle(flow, &p, eta, x, psi, t)?;
            worst = worst.max(d.delta.abs());
            if d.delta.abs() > bound + 1e-12 {
                angle_violations += 1;
            }
        }
        check(
            "angle correction bound",
            angle_violations == 0,
            format!("worst |Delta| = {worst:.3e} vs bound {bound:.3e}"),
        );

        let mut lift_worst = 0.0f64;
        for i in 0..4 {
            let psi = -2.0 + i as f64;
            let delta_start = (-(p.u + 3.0 * eta) * 11.0).exp() * 0.5;
            let lift = phi_lift(flow, &p, psi, delta_start, 10.0)?;
            lift_worst = lift_worst.max(lift.max_mismatch);
        }
        check(
            "lift consistency",
            lift_worst <= 1e-7,
            format!("max recursion/unwrap mismatch {lift_worst:.3e}"),
        );
        Ok(())
    })?;

    if let Some(path) = crossings {
        let loop_h = synthetic_loop(&p, 0.0, 2.0, 2.0, 0.3)?;
        let mut table = exit_crossings(&loop_h, 6)?;
        let (aff, t_star, _omega) = shilnikov::flow::AffineFlow::exterior_reference()?;
        let mut prev = None;
        for st in &mut table {
            // certify each radius against the closed-form exterior flow
            let mut probe = *st;
            probe.t_e_eps = 0.0;
            probe.t_i_j = t_star;
            st.r_j = section_radius(&aff, &probe, 0.5, prev)?;
            prev = Some(st.r_j);
        }
        fs::write(path, crossings_csv(&table))?;
        println!("crossing table written ({} rows)", table.len());
    }

    Ok(if failures == 0 { 0 } else { 3 })
}

fn classify(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidParameter(_) | Error::Io(_) => 1,
        Error::LedgerInfeasible { .. } => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::CheckParams { common, json } => cmd_check_params(common, *json),
        Command::ReturnMap {
            common,
            grid,
            out,
            spiral,
            spiral_psi,
            spiral_delta,
            spiral_t,
        } => cmd_return_map(
            common,
            grid,
            out,
            spiral,
            *spiral_psi,
            *spiral_delta,
            *spiral_t,
        ),
        Command::Shadow {
            common,
            symbols,
            out,
        } => cmd_shadow(common, symbols, out),
        Command::Flatten { common, out } => cmd_flatten(common, out),
        Command::VerifyEstimates {
            common,
            samples,
            crossings,
        } => cmd_verify_estimates(common, *samples, crossings),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(classify(&e) as u8)
        }
    }
}
