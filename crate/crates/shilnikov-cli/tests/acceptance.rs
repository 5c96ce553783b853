//! Acceptance suite: one test per criterion, each printing a pass line with
//! the measured quantities. Tolerances are pinned in the assertions.

use std::process::Command;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use shilnikov::angles::{arcsin_bound, delta_angle, lift_path, phi_lift};
use shilnikov::chaos::{
    build_ledger, gap_at_levels, gap_check, growth_exponent, level_factor, membership, return_map,
    shadow_entire_window, shadow_forward, ChaosLedger, IneqKey, LedgerInputs, LedgerOverrides,
    SectionSetup, SymbolClass, SymbolSeq,
};
use shilnikov::flatten::{
    conjugate_flow, eigenframe, extend_graph, fit_local_manifolds, verify_structure,
    ConjugatedField, CurvedStableField, Straightener,
};
use shilnikov::flow::{
    check_sandwich, epsilon_for_eta, estimate_eta, exp_bounds, iterate_box, FieldFlow, Flow,
    IntegratorOpts, LinearField, LinearFlow, ModelField, ScaledField,
};
use shilnikov::geometry::{linear_flow, linear_flow_matrix, Mat3, StabilityParams, Vec3};
use shilnikov::roots;
use shilnikov::sections::{travel_time_tau, CylinderChart, ExteriorMap, PlaneChart};

fn reference_params() -> StabilityParams {
    StabilityParams::new(-1.0, std::f64::consts::PI, 1.5).unwrap()
}

fn reference_setup(lin: &LinearFlow) -> SectionSetup<'_> {
    SectionSetup {
        flow: lin,
        params: lin.params,
        cyl: CylinderChart { omega: 0.0 },
        plane: PlaneChart::new(Vec3::e1(), Vec3::e2()).unwrap(),
        exterior: ExteriorMap::Coordinate { beta_model: 0.5 },
        max_time: 1e4,
    }
}

fn reference_inputs() -> LedgerInputs {
    LedgerInputs::default()
}

/// Rate budget whose derived level pair stays well resolved; used for the
/// shadowing criteria.
fn shadow_inputs() -> LedgerInputs {
    LedgerInputs {
        eta_tilde: 0.01,
        ..Default::default()
    }
}

#[test]
fn criterion_01_linear_model_exactness() {
    let p = reference_params();
    let lin = LinearFlow::new(p);
    let omega = 0.35;
    let mut rng = StdRng::seed_from_u64(101);
    let mut worst_tau = 0.0f64;
    let mut worst_phi = 0.0f64;
    for _ in 0..1000 {
        let x3 = rng.random_range(1e-6..0.1);
        let psi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let a = omega + psi;
        let x = Vec3::new(a.cos(), a.sin(), x3);
        let hit = travel_time_tau(&lin, &p, x, 1e4).unwrap();
        let tau_exact = (1.0 / x3).ln() / p.u;
        worst_tau = worst_tau.max((hit.tau - tau_exact).abs());
        let path = lift_path(&lin, &p, a, x3, hit.tau).unwrap();
        let phi = path.angle_at(&lin, &p, hit.tau).unwrap();
        worst_phi = worst_phi.max((phi - (a - p.mu * hit.tau)).abs());
    }
    assert!(worst_tau < 1e-9, "travel time error {worst_tau:.3e}");
    assert!(worst_phi < 1e-8, "angle error {worst_phi:.3e}");
    println!(
        "criterion 1 PASS: 1000 samples, max |tau - ln(1/x3)/u| = {worst_tau:.3e}, \
         max angle error = {worst_phi:.3e}"
    );
}

#[test]
fn criterion_02_projection_sandwiches_on_the_model_field() {
    let p = reference_params();
    let field = ModelField::new(p, 0.1, 3.0).unwrap();
    let opts = IntegratorOpts::default();
    let eps = epsilon_for_eta(&field, &p, 0.008, 5, 4, opts, 1.0).unwrap();
    let scaled = ScaledField {
        base: &field,
        epsilon: eps,
    };
    let flow = FieldFlow::new(&scaled, opts);
    let measured = estimate_eta(&flow, &p, 9, 11).unwrap().eta;
    assert!(measured <= 0.01, "measured eta {measured:.3e} above 0.01");
    let eta = 0.01;
    let eta_tilde = 0.1;
    let mut rng = StdRng::seed_from_u64(202);
    let mut violations = 0usize;
    let mut checked = 0usize;
    for _ in 0..1000 {
        // one admissible triple: a unit-box point, a step count, a fraction
        let n = rng.random_range(1..=20usize);
        let t = rng.random_range(0.0..1.0);
        let ang = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let rad = rng.random_range(0.0..1.0f64).sqrt();
        let x_free = Vec3::new(
            rad * ang.cos(),
            rad * ang.sin(),
            rng.random_range(-1.0..1.0),
        );
        let rep = check_sandwich(&flow, &p, eta, x_free, t).unwrap();
        checked += 6;
        if !rep.all_ok() {
            violations += 1;
        }
        let cap = 0.8 * (-p.u * (n as f64 + 1.0)).exp() * (1.0 + eta).powi(-(n as i32 + 1));
        let x_unit = Vec3::new(ang.cos(), ang.sin(), rng.random_range(0.0..cap).max(1e-300));
        match iterate_box(&flow, &p, eta, x_unit, n) {
            Ok(rep) => {
                checked += 4 * (n + 1);
                if !rep.all_ok() {
                    violations += 1;
                }
            }
            Err(_) => violations += 1,
        }
        match exp_bounds(&flow, &p, eta_tilde, eta, n, x_unit) {
            Ok(rep) => {
                checked += 4;
                if !rep.all_ok() {
                    violations += 1;
                }
            }
            Err(_) => violations += 1,
        }
    }
    assert_eq!(violations, 0, "sandwich violations on the model field");
    println!(
        "criterion 2 PASS: eps = {eps:.4e}, measured eta = {measured:.4e} <= 0.01, \
         1000 triples / {checked} inequalities, zero violations"
    );
}

#[test]
fn criterion_03_angle_correction_bound() {
    let p = reference_params();
    let field = ModelField::new(p, 0.1, 3.0).unwrap();
    let opts = IntegratorOpts::default();
    let eps = epsilon_for_eta(&field, &p, 0.008, 5, 4, opts, 1.0).unwrap();
    let scaled = ScaledField {
        base: &field,
        epsilon: eps,
    };
    let flow = FieldFlow::new(&scaled, opts);
    // 5% headroom inside the certified 10% grid-convergence band
    let eta = estimate_eta(&flow, &p, 9, 11).unwrap().eta.max(1e-9) * 1.05;
    let bound = arcsin_bound(&p, eta);
    let mut rng = StdRng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let psi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let rad = rng.random_range(0.05..1.0);
        let x = Vec3::new(
            rad * psi.cos(),
            rad * psi.sin(),
            rng.random_range(-1.0..1.0),
        );
        let t = rng.random_range(0.0..1.0);
        let d = delta_angle(&flow, &p, eta, x, psi, t).unwrap();
        worst = worst.max(d.delta.abs());
        assert!(
            d.delta.abs() <= bound,
            "|Delta| = {} above bound {bound}",
            d.delta.abs()
        );
    }
    // the correction vanishes identically at t = 0
    let x0 = Vec3::new(0.7, 0.0, 0.3);
    let d0 = delta_angle(&flow, &p, eta, x0, 0.0, 0.0).unwrap();
    assert!(d0.delta.abs() < 1e-12);
    println!(
        "criterion 3 PASS: 500 samples, worst |Delta| = {worst:.3e} <= arcsin bound {bound:.3e}, \
         Delta(0) = {:.1e}",
        d0.delta.abs()
    );
}

#[test]
fn criterion_04_lift_consistency_and_envelopes() {
    let p = reference_params();
    let field = ModelField::new(p, 0.1, 3.0).unwrap();
    let opts = IntegratorOpts::default();
    let eps = epsilon_for_eta(&field, &p, 0.008, 5, 4, opts, 1.0).unwrap();
    let scaled = ScaledField {
        base: &field,
        epsilon: eps,
    };
    let flow = FieldFlow::new(&scaled, opts);
    let eta = estimate_eta(&flow, &p, 9, 11).unwrap().eta.max(1e-9) * 1.05;
    let b = arcsin_bound(&p, eta);
    // affine-envelope budget: comfortably above the per-step bound so the
    // smallness condition (n+1)/n b < budget holds from n = 1 on
    let budget = 2.2 * b;
    let t_end = 10.0;
    let delta0 = 0.5 * (-(p.u + 0.05) * (t_end + 1.0)).exp();
    let mut rng = StdRng::seed_from_u64(404);
    let mut worst_mismatch = 0.0f64;
    for _ in 0..100 {
        let psi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let lift = phi_lift(&flow, &p, psi, delta0, t_end).unwrap();
        worst_mismatch = worst_mismatch.max(lift.max_mismatch);
        let path = lift_path(&flow, &p, psi, delta0, t_end).unwrap();
        for n in 0..(t_end as usize) {
            for i in 0..=4 {
                let t = n as f64 + i as f64 / 4.0;
                if t > t_end {
                    break;
                }
                let phi = path.angle_at(&flow, &p, t).unwrap();
                let width = (n as f64 + 1.0) * b + 1e-12;
                assert!(
                    (phi - (psi - t * p.mu)).abs() <= width,
                    "per-step envelope violated at t = {t}"
                );
                if n >= 1 {
                    assert!((n as f64 + 1.0) / n as f64 * b < budget);
                    assert!(
                        phi >= psi - t * (p.mu + budget) - 1e-12,
                        "affine lower at t = {t}"
                    );
                    assert!(
                        phi <= psi - t * (p.mu - budget) + 1e-12,
                        "affine upper at t = {t}"
                    );
                }
            }
        }
    }
    assert!(worst_mismatch <= 1e-7);
    println!(
        "criterion 4 PASS: 100 flowlines over {t_end} time units, \
         max recursion/unwrap mismatch = {worst_mismatch:.3e} <= 1e-7, envelopes hold"
    );
}

struct FlipCase {
    name: &'static str,
    target: IneqKey,
    allowed_extra: &'static [IneqKey],
    build: fn(&ChaosLedger) -> LedgerInputs,
}

#[test]
fn criterion_05_ledger_feasibility_and_boundary_flips() {
    let p = reference_params();
    let lin = LinearFlow::new(p);
    let setup = reference_setup(&lin);
    let base = build_ledger(&setup, &reference_inputs()).unwrap();
    assert!(
        base.feasible(),
        "reference ledger infeasible: {:?}",
        base.first_failure()
    );

    let cases: Vec<FlipCase> = vec![
        FlipCase {
            name: "level condition",
            target: IneqKey::Rel19,
            allowed_extra: &[],
            build: |b| LedgerInputs {
                overrides: LedgerOverrides {
                    delta2: Some(b.bound_delta2.unwrap() * 2.0),
                    ..Default::default()
                },
                ..Default::default()
            },
        },
        FlipCase {
            name: "level below contraction scale",
            target: IneqKey::Delta2BelowBeta,
            allowed_extra: &[IneqKey::Rel19],
            build: |b| LedgerInputs {
                overrides: LedgerOverrides {
                    delta2: Some(b.delta_beta_j * 1.5),
                    ..Default::default()
                },
                ..Default::default()
            },
        },
        FlipCase {
            name: "bottom-level formula",
            target: IneqKey::Delta1Formula,
            allowed_extra: &[],
            build: |b| LedgerInputs {
                overrides: LedgerOverrides {
                    delta1: Some(b.delta1 * (1.0 + 1e-6)),
                    ..Default::default()
                },
                ..Default::default()
            },
        },
        FlipCase {
            name: "level ordering",
            target: IneqKey::Delta1BelowDelta2,
            allowed_extra: &[IneqKey::Delta1Formula, IneqKey::MGap, IneqKey::PsiWindow],
            build: |b| LedgerInputs {
                overrides: LedgerOverrides {
                    delta1: Some(b.delta2 * 2.0),
                    ..Default::default()
                },
                ..Default::default()
            },
        },
        FlipCase {
            name: "section-height smallness",
            target: IneqKey::Rel10,
            allowed_extra: &[],
            build: |b| LedgerInputs {
                overrides: LedgerOverrides {
                    delta_j: Some(b.bound_delta_j * 1.5),
                    ..Default::default()
                },
                ..Default::default()
            },
        },
        FlipCase {
            name: "height below star scale",
            target: IneqKey::DeltaBelowStar,
            allowed_extra: &[],
            build: |b| LedgerInputs {
                overrides: LedgerOverrides {
                    delta_j: Some(b.delta_j),
                    delta_j_star: Some(b.delta_j * 0.9),
                    ..Default::default()
                },
                ..Default::default()
            },
        },
        FlipCase {
            name: "square below height",
            target: IneqKey::AlphaBelowDelta,
            allowed_extra: &[],
            build: |b| LedgerInputs {
                overrides: LedgerOverrides {
                    alpha_j: Some(b.delta_j * 1.2),
                    ..Default::default()
                },
                ..Default::default()
            },
        },
        FlipCase {
            name: "rate envelope",
            target: IneqKey::Rel8,
            allowed_extra: &[IneqKey::Rel10],
            build: |_| {
                // eta with m(eta, sigma) just above the budget
                let eta = roots::bisect(
                    |e| {
                        let em = 1f64.exp();
                        let up = (1.0 + e * em).ln();
                        let down = (1.0 / (1.0 - e * em)).ln();
                        let ang = (e / ((-1f64).exp() - e)).clamp(-1.0, 1.0).asin();
                        up.max(down).max(ang) - 0.11
                    },
                    1e-6,
                    0.18,
                    1e-12,
                    200,
                )
                .unwrap();
                LedgerInputs {
                    overrides: LedgerOverrides {
                        eta: Some(eta),
                        ..Default::default()
                    },
                    ..Default::default()
                }
            },
        },
        FlipCase {
            name: "rate below half the contraction",
            target: IneqKey::Rel7a,
            allowed_extra: &[IneqKey::Rel8, IneqKey::Rel10],
            build: |_| LedgerInputs {
                overrides: LedgerOverrides {
                    eta: Some(0.19),
                    ..Default::default()
                },
                ..Default::default()
            },
        },
        FlipCase {
            name: "rate growth cap",
            target: IneqKey::Rel7b,
            allowed_extra: &[IneqKey::Rel7a, IneqKey::Rel8, IneqKey::Rel10],
            build: |_| LedgerInputs {
                overrides: LedgerOverrides {
                    eta: Some(0.25),
                    ..Default::default()
                },
                ..Default::default()
            },
        },
        FlipCase {
            name: "exponent condition",
            target: IneqKey::Rel18,
            allowed_extra: &[IneqKey::Rel19],
            build: |_| LedgerInputs {
                eta_tilde: 0.45,
                ..Default::default()
            },
        },
        FlipCase {
            name: "angle window gap",
            target: IneqKey::MGap,
            allowed_extra: &[IneqKey::Delta1Formula, IneqKey::PsiWindow],
            build: |b| LedgerInputs {
                overrides: LedgerOverrides {
                    delta1: Some(b.delta2 / 2.0),
                    ..Default::default()
                },
                ..Default::default()
            },
        },
        FlipCase {
            name: "reference angle containment",
            target: IneqKey::PsiWindow,
            allowed_extra: &[],
            build: |b| LedgerInputs {
                overrides: LedgerOverrides {
                    psi_j: Some(b.m2),
                    ..Default::default()
                },
                ..Default::default()
            },
        },
    ];

    for case in &cases {
        let inputs = (case.build)(&base);
        let forced = build_ledger(&setup, &inputs).unwrap();
        assert!(!forced.feasible(), "{}: ledger stayed feasible", case.name);
        let target = forced.check(case.target).unwrap();
        assert!(!target.ok, "{}: target flag did not flip", case.name);
        for c in &forced.checks {
            if c.key != case.target && !case.allowed_extra.contains(&c.key) {
                assert!(c.ok, "{}: unexpected flip of {:?}", case.name, c.key);
            }
        }
    }

    // the budget bound itself: it cannot flip alone at these parameters,
    // since any eta_tilde at or above -sigma/2 forces the exponent condition
    // past 1 as well; it must however be the first failure reported
    let forced = build_ledger(
        &setup,
        &LedgerInputs {
            eta_tilde: 0.6,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(!forced.check(IneqKey::EtaTildeBound).unwrap().ok);
    assert_eq!(forced.first_failure().unwrap().key, IneqKey::EtaTildeBound);

    // scaling cap: measured on the nonlinear backend, then exceeded
    let field = ModelField::new(p, 0.1, 3.0).unwrap();
    let opts = IntegratorOpts::default();
    let eta = shilnikov::chaos::derive_eta(&p, 0.1);
    let cap = epsilon_for_eta(&field, &p, eta, 5, 4, opts, 1.0).unwrap();
    let scaled = ScaledField {
        base: &field,
        epsilon: cap * 2.0,
    };
    let flow = FieldFlow::new(&scaled, opts);
    let setup_mf = SectionSetup {
        flow: &flow,
        params: p,
        cyl: CylinderChart { omega: 0.0 },
        plane: PlaneChart::new(Vec3::e1(), Vec3::e2()).unwrap(),
        exterior: ExteriorMap::Coordinate { beta_model: 0.5 },
        max_time: 1e4,
    };
    let inputs = LedgerInputs {
        epsilon_j: cap * 2.0,
        eps_eta_cap: cap,
        eps_box_cap: f64::INFINITY,
        ..Default::default()
    };
    let forced = build_ledger(&setup_mf, &inputs).unwrap();
    assert!(
        !forced.check(IneqKey::Rel9).unwrap().ok,
        "scaling cap flag did not flip"
    );

    println!(
        "criterion 5 PASS: reference ledger feasible ({} inequalities), \
         {} boundary experiments flip their targeted flags",
        base.checks.len(),
        cases.len() + 2
    );
}

#[test]
fn criterion_06_angle_gap() {
    let p = reference_params();
    let lin = LinearFlow::new(p);
    let setup = reference_setup(&lin);
    let ledger = build_ledger(&setup, &reference_inputs()).unwrap();
    let four_pi = 4.0 * std::f64::consts::PI;

    // at the ledger's derived levels
    let report = gap_check(&setup, &ledger).unwrap();
    let oracle = p.mu / p.u * (ledger.delta2 / ledger.delta1).ln() - std::f64::consts::TAU;
    assert!(
        report.gap >= four_pi + 1.0,
        "gap {} without margin",
        report.gap
    );
    assert!(
        (report.gap - oracle).abs() <= 1e-6,
        "measured {} vs closed form {oracle}",
        report.gap
    );

    // at the requested level pair (admissible for the gap statement since
    // it sits below the section height)
    let d2 = 1e-3f64;
    let d1 = level_factor(&p, 0.1) * d2.powf(growth_exponent(&p, 0.1));
    assert!(d2 < ledger.delta_j);
    let user = gap_at_levels(&setup, d1, d2, 1024).unwrap();
    let user_oracle = p.mu / p.u * (d2 / d1).ln() - std::f64::consts::TAU;
    assert!((user_oracle - 17.638062367377497).abs() < 1e-9);
    assert!(user.gap >= four_pi + 1.0);
    assert!((user.gap - user_oracle).abs() <= 1e-6);
    println!(
        "criterion 6 PASS: gap at ledger levels = {:.6} (closed form {:.6}), \
         gap at requested levels = {:.6} (closed form 17.638062), both >= 4 pi + 1",
        report.gap, oracle, user.gap
    );
}

#[test]
fn criterion_07_inner_containment_grid() {
    let p = reference_params();
    let lin = LinearFlow::new(p);
    let setup = reference_setup(&lin);
    let ledger = build_ledger(&setup, &reference_inputs()).unwrap();
    let rm = return_map(&setup, &ledger);
    let n = 100;
    let mut worst_inner = 0.0f64;
    for i in 0..n {
        let psi = -ledger.alpha_j + 2.0 * ledger.alpha_j * i as f64 / (n - 1) as f64;
        for k in 0..n {
            let delta = ledger.delta_beta_j * (k + 1) as f64 / n as f64;
            let inner = rm.inner_full(psi, delta).unwrap();
            let norm = (inner.coords.0.powi(2) + inner.coords.1.powi(2)).sqrt();
            assert!(
                norm <= 2.0 / 3.0 * ledger.alpha_j + 1e-12,
                "inner containment violated at ({psi}, {delta:.3e}): |coords| = {norm:.3e}"
            );
            worst_inner = worst_inner.max(norm);
            let q = rm.exterior.apply(&rm.cyl, &rm.plane, inner.coords).unwrap();
            assert!(
                q.0.abs() <= ledger.alpha_j && q.1.abs() <= ledger.alpha_j,
                "return containment violated at ({psi}, {delta:.3e})"
            );
        }
    }
    println!(
        "criterion 7 PASS: 100x100 grid, zero violations, \
         max |inner coords| = {worst_inner:.3e} <= (2/3) alpha = {:.3e}",
        2.0 / 3.0 * ledger.alpha_j
    );
}

#[test]
fn criterion_08_return_map_stays_clear_of_the_levels() {
    let p = reference_params();
    let lin = LinearFlow::new(p);
    let setup = reference_setup(&lin);
    let ledger = build_ledger(&setup, &reference_inputs()).unwrap();
    let rm = return_map(&setup, &ledger);
    let sqrt2_d2 = 2f64.sqrt() * ledger.delta2;
    // log-spaced heights cover the rectangle between the two levels
    let (l1, l2) = (ledger.delta1.ln(), ledger.delta2.ln());
    let n = 50;
    let mut min_q = f64::INFINITY;
    for i in 0..n {
        let psi = -ledger.alpha_j + 2.0 * ledger.alpha_j * i as f64 / (n - 1) as f64;
        for k in 0..n {
            let delta = (l1 + (l2 - l1) * k as f64 / (n - 1) as f64).exp();
            let q = rm.q(psi, delta).unwrap();
            let norm = (q.0 * q.0 + q.1 * q.1).sqrt();
            assert!(norm > sqrt2_d2, "|Q| = {norm:.3e} at ({psi}, {delta:.3e})");
            min_q = min_q.min(norm);
        }
    }
    // located angle crossings: heights where the inner angle hits the
    // reference angle (image above the top level) and its half-turn
    // neighbours (image below the mirrored level)
    let locate = |psi: f64, level: f64| -> f64 {
        let f = |s: f64| {
            let delta = s.exp();
            rm.phi(psi, delta).unwrap() - level
        };
        let s = roots::bisect(f, l1, l2, 1e-13, 300).unwrap();
        s.exp()
    };
    let pi = std::f64::consts::PI;
    for i in 0..20 {
        let psi = -ledger.alpha_j + 2.0 * ledger.alpha_j * (i as f64 + 0.5) / 20.0;
        let d_mid = locate(psi, ledger.psi_j);
        let q_mid = rm.q(psi, d_mid).unwrap();
        assert!(
            q_mid.1 > ledger.delta2,
            "Q2 = {:.3e} at the reference angle",
            q_mid.1
        );
        let d_lo = locate(psi, ledger.psi_j - pi);
        let q_lo = rm.q(psi, d_lo).unwrap();
        assert!(
            q_lo.1 < -ledger.delta2,
            "Q2 = {:.3e} below the window",
            q_lo.1
        );
        let d_hi = locate(psi, ledger.psi_j + pi);
        let q_hi = rm.q(psi, d_hi).unwrap();
        assert!(
            q_hi.1 < -ledger.delta2,
            "Q2 = {:.3e} above the window",
            q_hi.1
        );
    }
    println!(
        "criterion 8 PASS: min |Q| on the rectangle = {min_q:.3e} > sqrt(2) Delta_2 = {sqrt2_d2:.3e}; \
         20 located crossings per level behave as required"
    );
}

#[test]
fn criterion_09_shadowing_batch() {
    let p = reference_params();
    let lin = LinearFlow::new(p);
    let setup = reference_setup(&lin);
    let ledger = build_ledger(&setup, &shadow_inputs()).unwrap();
    let rm = return_map(&setup, &ledger);
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(909);
    let mut worst_residual = 0.0f64;
    let mut min_margin = f64::INFINITY;
    for trial in 0..100 {
        let symbols: Vec<u8> = (0..10).map(|_| rng.random_range(0..2u8)).collect();
        let seq = SymbolSeq::forward(symbols.clone()).unwrap();
        let traj = shadow_forward(&rm, &ledger, &seq)
            .unwrap_or_else(|e| panic!("trial {trial} {symbols:?} failed: {e}"));
        assert!(
            traj.max_residual() < 1e-9,
            "trial {trial}: residual {}",
            traj.max_residual()
        );
        assert!(
            traj.min_margin() > 0.0,
            "trial {trial}: margin {}",
            traj.min_margin()
        );
        // independent membership recheck through the raw angle classifier
        for (n, &(psi, delta)) in traj.points.iter().enumerate() {
            let mem = membership(&rm, &ledger, psi, delta).unwrap();
            let want = if symbols[n] == 0 {
                SymbolClass::M0
            } else {
                SymbolClass::M1
            };
            assert_eq!(mem.class, want);
        }
        worst_residual = worst_residual.max(traj.max_residual());
        min_margin = min_margin.min(traj.min_margin());
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 300.0, "batch took {elapsed:?}");
    println!(
        "criterion 9 PASS: 100/100 length-10 sequences verified in {elapsed:.2?}, \
         max residual = {worst_residual:.3e} < 1e-9, min margin = {min_margin:.3e} > 0"
    );
}

#[test]
fn criterion_10_entire_window_convergence_trend() {
    let p = reference_params();
    let lin = LinearFlow::new(p);
    let setup = reference_setup(&lin);
    let ledger = build_ledger(&setup, &shadow_inputs()).unwrap();
    let rm = return_map(&setup, &ledger);
    let shifts = [2usize, 4, 8, 16];

    // Each refinement level shrinks the admissible parameter window by
    // roughly the level-separation factor, so sixteen forward symbols pin
    // the time-zero point far below double precision: the shifted runs have
    // already converged, and their differences sit at the arithmetic floor.
    // The trend assertion therefore requires each successive difference to
    // decrease or to lie under that floor, and the final difference to be
    // at the floor outright.
    let floor = 1e-12;
    let trend_ok = |diffs: &[f64]| {
        diffs.windows(2).all(|w| w[1] <= w[0] || w[1] < floor) && diffs.last().unwrap() < &floor
    };

    let constant = SymbolSeq::parse("w:0^33").unwrap();
    let win = shadow_entire_window(&rm, &ledger, &constant, &shifts, 64).unwrap();
    assert_eq!(win.diffs.len(), 3);
    assert!(
        trend_ok(&win.diffs),
        "constant sequence: no convergence trend: {:?}",
        win.diffs
    );

    let mut rng = StdRng::seed_from_u64(1010);
    let symbols: Vec<u8> = (0..33).map(|_| rng.random_range(0..2u8)).collect();
    let random_seq = SymbolSeq {
        symbols,
        offset: -16,
    };
    let win2 = shadow_entire_window(&rm, &ledger, &random_seq, &shifts, 64).unwrap();
    assert!(
        trend_ok(&win2.diffs),
        "random sequence: no convergence trend: {:?}",
        win2.diffs
    );
    // memberships of the returned run
    for (i, &s) in win2.trajectory.symbols.iter().enumerate() {
        let (psi, delta) = win2.trajectory.points[i];
        let mem = membership(&rm, &ledger, psi, delta).unwrap();
        let want = if s == 0 {
            SymbolClass::M0
        } else {
            SymbolClass::M1
        };
        assert_eq!(mem.class, want);
    }
    println!(
        "criterion 10 PASS: time-zero differences decrease over shifts {:?}: \
         constant {:?}, random {:?}",
        shifts, win.diffs, win2.diffs
    );
}

#[test]
fn criterion_11_flatten_round_trip() {
    let p = reference_params();
    let opts = IntegratorOpts::default();
    // random similarity of the block field
    let mut rng = StdRng::seed_from_u64(1111);
    let m = loop {
        let mut m = [[0.0; 3]; 3];
        for row in &mut m {
            for v in row.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        for (i, row) in m.iter_mut().enumerate() {
            row[i] += 2.0;
        }
        let m = Mat3(m);
        if let Ok(inv) = m.inverse() {
            if m.op_norm() * inv.op_norm() < 50.0 {
                break (m, inv);
            }
        }
    };
    let field = LinearField {
        m: m.0.mul(&p.a_matrix()).mul(&m.1),
    };
    let frame = eigenframe(&field).unwrap();
    let conj = ConjugatedField {
        base: &field,
        frame,
    };
    let graph = fit_local_manifolds(&conj, 0.5, 3, opts).unwrap();
    let ext = extend_graph(&graph, 0.2, 0.1).unwrap();
    let straight = Straightener::new(ext).unwrap();
    // forward/backward straightening residual
    let mut worst_s = 0.0f64;
    for _ in 0..50 {
        let zeta = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let z = straight.invert(zeta).unwrap();
        worst_s = worst_s.max((straight.apply(z) - zeta).norm());
    }
    assert!(worst_s < 1e-10, "straightening round trip {worst_s:.3e}");
    let flow = conjugate_flow(&field, frame, straight, opts);
    let mut worst_t = 0.0f64;
    for _ in 0..20 {
        let x = Vec3::new(
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
        );
        let t = rng.random_range(0.0..1.5);
        let err = (flow.eval(t, x).unwrap() - linear_flow(&p, t, x)).norm();
        worst_t = worst_t.max(err);
    }
    assert!(worst_t < 1e-7, "linear recovery error {worst_t:.3e}");

    // nonlinear test field: flat planes with small residual
    let curved = CurvedStableField::new(p, 0.3, 1.0);
    let frame2 = eigenframe(&curved).unwrap();
    let conj2 = ConjugatedField {
        base: &curved,
        frame: frame2,
    };
    let graph2 = fit_local_manifolds(&conj2, 0.4, 3, opts).unwrap();
    let ext2 = extend_graph(&graph2, 0.15, 0.1).unwrap();
    let straight2 = Straightener::new(ext2).unwrap();
    let flow2 = conjugate_flow(&curved, frame2, straight2, opts);
    let report = verify_structure(&flow2, &frame2.params, None).unwrap();
    assert!(report.fixed_point_residual < 1e-9);
    assert!(report.block_residual < 1e-6);
    assert!(report.invariance_radius > 0.0);
    assert!(
        report.invariance_residual < 1e-8,
        "plane residual {:.3e}",
        report.invariance_residual
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let jac = flow2.jacobian_x(t, Vec3::ZERO).unwrap();
        assert!(jac.sub(&linear_flow_matrix(&p, t)).op_norm() < 1e-7);
    }
    println!(
        "criterion 11 PASS: linear recovery to {worst_t:.3e} (20 samples), \
         straightening round trip to {worst_s:.3e}, \
         invariant-plane residual {:.3e} inside radius {}",
        report.invariance_residual, report.invariance_radius
    );
}

#[test]
fn criterion_12_shadow_csv_determinism() {
    let exe = env!("CARGO_BIN_EXE_shilnikov");
    let dir = std::env::temp_dir();
    let out1 = dir.join("shilnikov_acc12_a.csv");
    let out2 = dir.join("shilnikov_acc12_b.csv");
    for out in [&out1, &out2] {
        let status = Command::new(exe)
            .args([
                "shadow",
                "0110010110",
                "--set",
                "eta_tilde=0.01",
                "--set",
                "seed=42",
                "--out",
            ])
            .arg(out)
            .status()
            .expect("failed to launch the driver");
        assert!(status.success(), "shadow run failed");
    }
    let a = std::fs::read(&out1).unwrap();
    let b = std::fs::read(&out2).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b, "repeated runs differ");
    let _ = std::fs::remove_file(&out1);
    let _ = std::fs::remove_file(&out2);
    println!(
        "criterion 12 PASS: repeated shadow runs produce byte-identical CSV ({} bytes)",
        a.len()
    );
}
