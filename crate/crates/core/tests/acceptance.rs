//! One test per acceptance criterion. Each prints a single
//! `criterion <n> PASS|FAIL <name>: <details>` line, then asserts.

mod common;

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use common::{strictly_convex_qp, learning_case, oracle_jacobian, oracle_states, reference_demand, stage_value, study_with_horizon};
use ctms::config::reference_study;
use ctms::control::{gradient_estimate, ilc_plan, learning_objective, learning_terms, ControllerKind, IterationRecord, RecordWindow};
use ctms::ctms::step;
use ctms::experiment::{estimation_error_scenarios, run_scenario, ScenarioResult, ScenarioSpec};
use ctms::lifted::{build_lifted, ground_truth_lifted, Estimates, HorizonWindow};
use ctms::metrics::MetricsReport;
use ctms::qp::{csr_from_triplets, kkt_residuals, AdmmSolver, InteriorPointSolver, QpProblem, QpSolver, SolveStatus};
use ctms::store::{ExperimentStore, Scalings};
use ctms::{CellParams, DemandProfile, HighwayConfig, PlantState, StationParams, StudyConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

fn report(n: usize, name: &str, pass: bool, details: &str) {
    // Written past the test harness's capture so the line always shows.
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n} {} {name}: {details}", if pass { "PASS" } else { "FAIL" });
    let _ = out.flush();
}

struct Reference {
    study: StudyConfig,
    demand: DemandProfile,
}

fn reference() -> &'static Reference {
    static R: OnceLock<Reference> = OnceLock::new();
    R.get_or_init(|| {
        let study = reference_study();
        let demand = DemandProfile::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/morning_peak_demand.csv")).unwrap();
        Reference { study, demand }
    })
}

fn one_day(kind: ControllerKind) -> (ScenarioResult, f64) {
    let r = reference();
    let spec = ScenarioSpec { id: kind.to_string(), controller: kind, days: 1, scalings: Scalings::default() };
    let started = Instant::now();
    let result = run_scenario(&r.study, &r.demand, &spec, None, None).unwrap();
    (result, started.elapsed().as_secs_f64())
}

fn ground_truth_day() -> &'static (ScenarioResult, f64) {
    static GT: OnceLock<(ScenarioResult, f64)> = OnceLock::new();
    GT.get_or_init(|| one_day(ControllerKind::MpcGt))
}

#[test]
fn criterion_1_conservation() {
    let r = reference();
    let cfg = &r.study.highway;
    let t = cfg.sample_time_h();
    let started = Instant::now();
    let mut state = PlantState::empty(cfg);
    let mut worst = 0.0f64;
    let steps = r.study.day_length();
    for k in 0..steps {
        let (next, out) = step(&state, r.demand.at(k), None, cfg, k).unwrap();
        let before = state.total_vehicles(cfg);
        let after = next.total_vehicles(cfg);
        let exchanged = t * (out.interface_flows[0] - out.interface_flows[cfg.num_cells()]);
        let scale = before.max(after).max(1.0);
        worst = worst.max((after - before - exchanged).abs() / scale);
        state = next;
    }
    let seconds = started.elapsed().as_secs_f64();
    let pass = worst <= 1e-9 && seconds < 1.0;
    report(1, "conservation", pass, &format!("{steps} steps, worst residual {worst:.2e} of vehicles present, {seconds:.3} s"));
    assert!(pass);
}

fn random_highway(rng: &mut ChaCha8Rng) -> HighwayConfig {
    let n = rng.random_range(2..=5);
    let cells = (0..n)
        .map(|_| CellParams {
            length_km: rng.random_range(0.2..1.5),
            free_flow_speed: rng.random_range(80.0..130.0),
            congestion_wave_speed: rng.random_range(20.0..40.0),
            capacity: rng.random_range(1500.0..2200.0),
            jam_density: rng.random_range(150.0..250.0),
        })
        .collect();
    let exit_cell = rng.random_range(0..n - 1);
    HighwayConfig {
        sample_time_s: rng.random_range(5.0..15.0),
        cells,
        station: StationParams {
            exit_cell,
            merge_cell: rng.random_range(exit_cell + 1..n),
            station_capacity: 500.0,
            queue_capacity: 20.0,
            ramp_capacity: 1500.0,
            service_delay_steps: 1,
            split_ratio: rng.random_range(0.02..0.4),
            mainstream_priority: rng.random_range(0.5..0.95),
        },
    }
}

#[test]
fn criterion_2_affine_model_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let demand = DemandProfile::constant(1500.0, 600).unwrap();
    for _ in 0..50 {
        let mut cfg = random_highway(&mut rng);
        let k = rng.random_range(1..=10);
        cfg.station.service_delay_steps = rng.random_range(k..=k + 6);
        cfg.validate().unwrap();
        let mut study = study_with_horizon(k);
        study.controller.w_r = 0.5 * cfg.cells[cfg.station.merge_cell - 1].length_km;
        study.highway = cfg.clone();
        study.validate().unwrap();
        let mut x0: Vec<f64> = cfg.cells.iter().map(|c| rng.random_range(0.0..c.jam_density)).collect();
        x0.extend([rng.random_range(0.0..300.0), rng.random_range(0.0..20.0)]);
        let w = HorizonWindow {
            start_step: rng.random_range(0..400),
            length: k,
            initial_state: x0.clone(),
            service_flows: (0..k).map(|_| rng.random_range(0.0..400.0)).collect(),
            station_inflow_at_start: rng.random_range(0.0..300.0),
        };
        let q = ground_truth_lifted(&cfg, &study.controller, &demand, &w).unwrap();
        let u: Vec<f64> = (0..q.n_u()).map(|_| rng.random_range(0.0..2500.0)).collect();
        let predicted = q.predict(&DVector::from_column_slice(&u));
        let oracle = oracle_states(&cfg, cfg.station.split_ratio, &x0, w.station_inflow_at_start, &u, &w.service_flows);
        for (m, x) in oracle.iter().enumerate() {
            for (c, v) in x.iter().enumerate() {
                worst = worst.max((predicted[q.x_index(m, c)] - v).abs() / (1.0 + v.abs()));
            }
        }
    }
    let pass = worst <= 1e-9;
    report(2, "affine model oracle", pass, &format!("50 random stretches, worst relative gap {worst:.2e}"));
    assert!(pass);
}

struct RandomQp {
    h: DMatrix<f64>,
    g: DVector<f64>,
    rows: DMatrix<f64>,
    rhs: DVector<f64>,
    nonneg: Vec<bool>,
}

fn random_qp(rng: &mut ChaCha8Rng) -> RandomQp {
    let n = rng.random_range(1..=12);
    let m = rng.random_range(0..=16);
    let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = &l * l.transpose() + DMatrix::identity(n, n) * rng.random_range(0.01..0.5);
    let g = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
    let bounded = rng.random_range(0..=n.min(4));
    let nonneg: Vec<bool> = (0..n).map(|i| i < bounded).collect();
    let z0 = DVector::from_fn(n, |i, _| if nonneg[i] { rng.random_range(0.0..2.0) } else { rng.random_range(-2.0..2.0) });
    let rows = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let slack = DVector::from_fn(m, |_, _| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..1.0) });
    let rhs = &rows * &z0 + slack;
    RandomQp { h, g, rows, rhs, nonneg }
}

fn triplets(m: &DMatrix<f64>) -> Vec<(usize, usize, f64)> {
    let mut t = Vec::new();
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if m[(r, c)] != 0.0 {
                t.push((r, c, m[(r, c)]));
            }
        }
    }
    t
}

#[test]
fn criterion_3_qp_solver_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let solvers: Vec<Box<dyn QpSolver>> = vec![Box::new(InteriorPointSolver::default()), Box::new(AdmmSolver::default())];
    let mut worst_obj = vec![0.0f64; solvers.len()];
    let mut worst_kkt = vec![0.0f64; solvers.len()];
    let mut failures = vec![0usize; solvers.len()];
    for _ in 0..100 {
        let d = random_qp(&mut rng);
        let n = d.g.len();
        let h_sym = (&d.h + d.h.transpose()) * 0.5;
        let problem = QpProblem::new(
            csr_from_triplets(n, n, &triplets(&h_sym)),
            d.g.iter().copied().collect(),
            csr_from_triplets(0, n, &[]),
            vec![],
            csr_from_triplets(d.rows.nrows(), n, &triplets(&d.rows)),
            d.rhs.iter().copied().collect(),
            d.nonneg.clone(),
        )
        .unwrap();
        let bounds: Vec<usize> = (0..n).filter(|&i| d.nonneg[i]).collect();
        let mut c = DMatrix::zeros(d.rows.nrows() + bounds.len(), n);
        let mut rhs = DVector::zeros(c.nrows());
        c.rows_mut(0, d.rows.nrows()).copy_from(&d.rows);
        rhs.rows_mut(0, d.rows.nrows()).copy_from(&d.rhs);
        for (k, &j) in bounds.iter().enumerate() {
            c[(d.rows.nrows() + k, j)] = -1.0;
        }
        let (_, f_star) = strictly_convex_qp(&h_sym, &d.g, &c, &rhs);
        for (s, solver) in solvers.iter().enumerate() {
            let sol = solver.solve(&problem, None).unwrap();
            if sol.status != SolveStatus::Optimal {
                failures[s] += 1;
                continue;
            }
            let rel = (sol.objective - f_star).abs() / (1.0 + f_star.abs());
            worst_obj[s] = worst_obj[s].max(rel);
            worst_kkt[s] = worst_kkt[s].max(kkt_residuals(&problem, &sol.z, &sol.multipliers).max());
        }
    }
    let mut pass = true;
    let mut parts = Vec::new();
    for (s, solver) in solvers.iter().enumerate() {
        pass &= failures[s] == 0 && worst_obj[s] <= 1e-6 && worst_kkt[s] <= 1e-6;
        parts.push(format!(
            "{}: {} not optimal, worst objective gap {:.2e}, worst KKT residual {:.2e}",
            solver.name(),
            failures[s],
            worst_obj[s],
            worst_kkt[s]
        ));
    }
    report(3, "QP solver oracle", pass, &format!("100 programs; {}", parts.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_4_ground_truth_mpc_effectiveness() {
    let (unc, _) = one_day(ControllerKind::Uncontrolled);
    let (gt, seconds) = ground_truth_day();
    let u = &unc.days[0].metrics;
    let g = &gt.days[0].metrics;
    let reduction = (u.ttt - g.ttt) / u.ttt;
    let tts_gap = (g.tts - u.tts).abs() / u.tts;
    let pass = reduction >= 0.01 && g.twt > u.twt && tts_gap <= 0.02 && g.delta_emax == 0.0 && *seconds <= 120.0;
    report(
        4,
        "ground-truth MPC effectiveness",
        pass,
        &format!(
            "TTT {:.2} -> {:.2} ({:.2}% lower), TWT {:.2} -> {:.2}, TTS {:.2} vs {:.2} ({:.2}% apart), delta_emax {}, day solved in {seconds:.1} s",
            u.ttt,
            g.ttt,
            100.0 * reduction,
            u.twt,
            g.twt,
            u.tts,
            g.tts,
            100.0 * tts_gap,
            g.delta_emax
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_learning_convergence() {
    let r = reference();
    let (gt, _) = ground_truth_day();
    let baseline = gt.days[0].metrics.clone();
    let specs = estimation_error_scenarios(5);
    let results: Vec<ScenarioResult> =
        specs.par_iter().map(|s| run_scenario(&r.study, &r.demand, s, Some(&baseline), None).unwrap()).collect();
    let mut pass = true;
    let mut parts = Vec::new();
    for res in &results {
        let deltas: Vec<f64> = res.days.iter().map(|d| d.metrics.deltas.unwrap().delta_ttt).collect();
        let emax_ok = res.days[1..].iter().all(|d| d.metrics.delta_emax == 0.0);
        let limit = 0.2 * deltas[0].abs();
        let converged = deltas[2..].iter().all(|d| d.abs() <= limit);
        pass &= converged && emax_ok;
        parts.push(format!(
            "{} [{}]{}{}",
            res.spec.id,
            deltas.iter().map(|d| format!("{d:+.3}")).collect::<Vec<_>>().join(" "),
            if converged { "" } else { " ratio above 0.2" },
            if emax_ok { "" } else { " queue bound violated" }
        ));
    }
    report(5, "learning convergence", pass, &format!("delta TTT per day vs ground truth: {}", parts.join("; ")));
    assert!(pass);
}

fn exactness_fixed_point() -> (bool, String) {
    let case = learning_case(30, 0.0);
    let q = &case.lifted;
    let ctrl = &case.study.controller;
    let u_prev = DVector::from_vec(case.prev.stacked_inputs());
    let feasible = q.constraint_values(&DVector::from_vec(case.prev.stacked_states()), &u_prev).max() <= 1e-9;
    let plan = ilc_plan(q, &case.prev, ctrl, &InteriorPointSolver::default()).unwrap();
    let terms = learning_terms(q, &case.prev, ctrl).unwrap();
    let objective = learning_objective(q, &case.prev, &terms, 0.0);
    let anchor = DVector::from_vec(terms.anchor.clone());
    let value_at_prev = stage_value(&objective, &anchor, &u_prev);
    let value_at_plan = stage_value(&objective, &DVector::from_vec(plan.states.clone()), &DVector::from_vec(plan.inputs.clone()));
    let value_gap = (value_at_plan - value_at_prev) / (1.0 + value_at_prev.abs());
    let n = q.dynamics.state_dim() - 2;
    let ramp_gap = (0..ctrl.update_period)
        .map(|m| {
            let i = q.u_index(m, n + 1);
            (plan.inputs[i] - u_prev[i]).abs() / (1.0 + u_prev[i])
        })
        .fold(0.0, f64::max);
    let ok = feasible && value_gap <= 1e-6 && ramp_gap <= 1e-2;
    (ok, format!("(a) objective above the previous input by {value_gap:.1e} relative, applied ramp flows within {ramp_gap:.1e} relative"))
}

fn exactness_gradient() -> (bool, String) {
    let study = study_with_horizon(8);
    let cfg = &study.highway;
    let demand = reference_demand(&study);
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let k = 8;
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let mut x0: Vec<f64> = cfg.cells.iter().map(|c| rng.random_range(0.0..c.jam_density)).collect();
        x0.extend([rng.random_range(0.0..300.0), rng.random_range(0.0..20.0)]);
        let phi: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..200.0)).collect();
        let s0 = rng.random_range(0.0..150.0);
        let w = HorizonWindow { start_step: 900, length: k, initial_state: x0.clone(), service_flows: phi.clone(), station_inflow_at_start: s0 };
        let q = ground_truth_lifted(cfg, &study.controller, &demand, &w).unwrap();
        let u_prev: Vec<f64> = (0..q.n_u()).map(|_| rng.random_range(0.0..1800.0)).collect();
        let x_prev: Vec<f64> = oracle_states(cfg, cfg.station.split_ratio, &x0, s0, &u_prev, &phi).into_iter().flatten().collect();
        let f = gradient_estimate(&q, &x_prev).unwrap().values;
        let jac = oracle_jacobian(cfg, cfg.station.split_ratio, k);
        let x = DVector::from_vec(x_prev);
        let exact = jac.transpose() * ((&x - &q.state_reference).component_mul(&q.quad_weight) * q.quad_scale + &q.lin_state_cost) - &q.lin_input_cost;
        worst = worst.max((&f - &exact).amax());
    }
    (worst <= 1e-10, format!("(b) gradient worst entry gap {worst:.1e}"))
}

fn exactness_identity() -> (bool, String) {
    let study = study_with_horizon(10);
    let cfg = &study.highway;
    let demand = reference_demand(&study);
    let (k, nx1, beta) = (10, cfg.num_cells() + 2, cfg.station.split_ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for r_beta in [0.8, 1.2] {
        let beta_es = r_beta * beta;
        let state = |rng: &mut ChaCha8Rng| {
            let mut x: Vec<f64> = cfg.cells.iter().map(|c| rng.random_range(0.0..c.jam_density)).collect();
            x.extend([rng.random_range(0.0..300.0), rng.random_range(0.0..20.0)]);
            x
        };
        let (x0_prev, x0_now) = (state(&mut rng), state(&mut rng));
        let exit = rng.random_range(500.0..2000.0);
        let phi_prev: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..200.0)).collect();
        let phi_now: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..200.0)).collect();
        let u_prev: Vec<f64> = (0..k * nx1).map(|_| rng.random_range(0.0..1800.0)).collect();
        let v: Vec<f64> = (0..k * nx1).map(|_| rng.random_range(0.0..1800.0)).collect();
        let prev = RecordWindow {
            start_step: 600,
            length: k,
            states: oracle_states(cfg, beta, &x0_prev, beta * exit, &u_prev, &phi_prev),
            inputs: u_prev.chunks(nx1).map(|c| c.to_vec()).collect(),
            service_flows: phi_prev.clone(),
            station_inflows: vec![0.0; k],
            upstream_demand: vec![0.0; k],
            prev_exit_cell_outflow: exit,
            extrapolated: false,
        };
        let window = |b: f64, phi: &[f64]| HorizonWindow {
            start_step: 600,
            length: k,
            initial_state: x0_now.clone(),
            service_flows: phi.to_vec(),
            station_inflow_at_start: b * exit,
        };
        let est = Estimates { beta: beta_es, delta_steps: cfg.station.service_delay_steps, demand: demand.clone() };
        let q_es = build_lifted(cfg, &study.controller, &est, &window(beta_es, &phi_prev)).unwrap();
        let q_gt = ground_truth_lifted(cfg, &study.controller, &demand, &window(beta, &phi_now)).unwrap();
        let terms = learning_terms(&q_es, &prev, &study.controller).unwrap();
        let (vv, uu) = (DVector::from_column_slice(&v), DVector::from_column_slice(&u_prev));
        let x_model = &q_es.state_map * &vv + &q_es.offset + DVector::from_vec(terms.correction.clone());
        let x_true = DVector::from_vec(oracle_states(cfg, beta, &x0_now, beta * exit, &v, &phi_now).into_iter().flatten().collect());
        let dphi = DVector::from_vec(phi_now.iter().zip(&phi_prev).map(|(a, b)| a - b).collect());
        let expected = (&q_gt.state_map - &q_es.state_map) * (&vv - &uu) + &q_gt.history_map * dphi;
        worst = worst.max(((&x_true - &x_model) - expected).amax() / (1.0 + x_true.amax()));
    }
    (worst <= 1e-9, format!("(c) prediction error identity worst relative gap {worst:.1e}"))
}

#[test]
fn criterion_6_learning_exactness() {
    let parts = [exactness_fixed_point(), exactness_gradient(), exactness_identity()];
    let pass = parts.iter().all(|p| p.0);
    report(6, "learning exactness", pass, &parts.iter().map(|p| p.1.clone()).collect::<Vec<_>>().join(", "));
    assert!(pass);
}

#[test]
fn criterion_7_relaxation_tightness() {
    let (gt, _) = ground_truth_day();
    let plans = &gt.days[0].outcome.plans;
    let pairs: usize = plans.iter().map(|p| p.tight_pairs).sum();
    let tight: usize = plans.iter().map(|p| p.tight).sum();
    let worst = plans.iter().filter(|p| p.tight_pairs > 0).map(|p| p.tight as f64 / p.tight_pairs as f64).fold(1.0, f64::min);
    let fraction = tight as f64 / pairs as f64;
    let tol = reference().study.controller.tightness_tol;
    let pass = pairs > 0 && fraction >= 0.95;
    report(
        7,
        "relaxation tightness",
        pass,
        &format!(
            "{tight} of {pairs} positive-flow pairs active within {tol:e} of capacity ({:.2}%) over {} windows, worst window {:.2}%",
            100.0 * fraction,
            plans.len(),
            100.0 * worst
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_determinism_and_persistence() {
    let (gt, _) = ground_truth_day();
    let (again, _) = one_day(ControllerKind::MpcGt);
    let first = gt.days[0].metrics.to_json().unwrap();
    let second = again.days[0].metrics.to_json().unwrap();
    let repeatable = first == second;

    let r = reference();
    let dir = tempfile::tempdir().unwrap();
    let record: &IterationRecord = &gt.days[0].outcome.record;
    let mut store = ExperimentStore::create(dir.path(), "acceptance", &r.study, ControllerKind::MpcGt, Scalings::default()).unwrap();
    store.save_day(&r.study, record, &gt.days[0].metrics, &gt.days[0].outcome.plans).unwrap();
    let reopened = ExperimentStore::open(dir.path()).unwrap();
    let loaded = reopened.load_day(0, &r.study).unwrap();
    let bits = |rec: &IterationRecord| -> Vec<u64> {
        rec.states
            .iter()
            .flatten()
            .chain(rec.inputs.iter().flatten())
            .chain(&rec.service_flows)
            .chain(&rec.station_inflows)
            .chain(&rec.upstream_demand)
            .chain(rec.metering.iter().flatten())
            .map(|v| v.to_bits())
            .collect()
    };
    let metrics_back: MetricsReport = reopened.load_metrics(0).unwrap();
    let round_trip = bits(&loaded) == bits(record) && loaded == *record && metrics_back.to_json().unwrap() == first;
    let pass = repeatable && round_trip;
    report(
        8,
        "determinism and persistence",
        pass,
        &format!("repeated ground-truth day metrics identical: {repeatable}; stored day and metrics bit-exact: {round_trip}"),
    );
    assert!(pass);
}
