//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use ctms::config::reference_study;
use ctms::control::{IterationRecord, RecordWindow, StageObjective};
use ctms::ctms::simulate;
use ctms::lifted::{build_lifted, Estimates, HorizonWindow, LiftedQP};
use ctms::{DemandProfile, HighwayConfig, PeakShape, PlantState, StudyConfig};
use nalgebra::{DMatrix, DVector};

/// Straight per-step balance equations, written out independently of the
/// library's rollout: each cell gains its inflow, loses its outflow, the exit
/// cell additionally loses the station inflow, and the station inflow is the
/// split share of the previous exit-cell outflow.
pub fn oracle_states(cfg: &HighwayConfig, beta: f64, x0: &[f64], s0: f64, u: &[f64], phi_le: &[f64]) -> Vec<Vec<f64>> {
    let n = cfg.num_cells();
    let t = cfg.sample_time_s / 3600.0;
    let (ell, j) = (cfg.station.exit_cell, cfg.station.merge_cell);
    let mut xs = vec![x0.to_vec()];
    let mut s = s0;
    for (m, phi) in phi_le.iter().enumerate() {
        let step_u = &u[m * (n + 2)..(m + 1) * (n + 2)];
        let x = xs.last().unwrap();
        let mut next = vec![0.0; n + 2];
        for i in 0..n {
            let inflow = step_u[i] + if i == j { step_u[n + 1] } else { 0.0 };
            let outflow = step_u[i + 1] + if i == ell { s } else { 0.0 };
            next[i] = x[i] + t * (inflow - outflow) / cfg.cells[i].length_km;
        }
        next[n] = x[n] + t * s - t * phi;
        next[n + 1] = x[n + 1] + t * phi - t * step_u[n + 1];
        s = beta * step_u[ell + 1] + beta * s;
        xs.push(next);
    }
    xs
}


pub fn dense(m: &sprs::CsMat<f64>) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(m.rows(), m.cols());
    for (v, (r, c)) in m.iter() {
        d[(r, c)] += *v;
    }
    d
}

/// Every subset of `0..m` with `k` elements.
pub fn subsets(m: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, m: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..m {
            cur.push(i);
            rec(i + 1, m, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, m, k, &mut Vec::new(), &mut out);
    out
}

/// Minimize 1/2 u'Hu + g'u subject to C u <= d by trying every active set of
/// at most `n` rows and keeping the best point satisfying all KKT conditions.
/// `H` may be singular; each candidate system is solved in the least-squares
/// sense and kept only if it is solved exactly.
pub fn brute_force_qp(h: &DMatrix<f64>, g: &DVector<f64>, c: &DMatrix<f64>, d: &DVector<f64>) -> (DVector<f64>, f64) {
    let n = h.nrows();
    let m = c.nrows();
    let scale = 1.0 + d.amax() + g.amax();
    let mut best: Option<(DVector<f64>, f64)> = None;
    for k in 0..=n.min(m) {
        for set in subsets(m, k) {
            let dim = n + k;
            let mut kkt = DMatrix::zeros(dim, dim);
            let mut rhs = DVector::zeros(dim);
            kkt.view_mut((0, 0), (n, n)).copy_from(h);
            for i in 0..n {
                rhs[i] = -g[i];
            }
            for (a, &r) in set.iter().enumerate() {
                for j in 0..n {
                    kkt[(n + a, j)] = c[(r, j)];
                    kkt[(j, n + a)] = c[(r, j)];
                }
                rhs[n + a] = d[r];
            }
            let Ok(sol) = kkt.clone().svd(true, true).solve(&rhs, 1e-10) else { continue };
            if (&kkt * &sol - &rhs).amax() > 1e-8 * scale {
                continue;
            }
            let u = sol.rows(0, n).into_owned();
            if (0..k).any(|a| sol[n + a] < -1e-9 * scale) {
                continue;
            }
            if (c * &u - d).iter().any(|v| *v > 1e-7 * scale) {
                continue;
            }
            let obj = 0.5 * u.dot(&(h * &u)) + g.dot(&u);
            if best.as_ref().is_none_or(|(_, b)| obj < *b) {
                best = Some((u, obj));
            }
        }
    }
    best.expect("feasible program")
}

/// Minimize 1/2 u'Hu + g'u subject to C u <= d for positive definite `H`.
/// Active sets are tried in order of size and the first one whose solution
/// is feasible with nonnegative multipliers is returned: under strict
/// convexity any KKT point is the unique optimum.
pub fn strictly_convex_qp(h: &DMatrix<f64>, g: &DVector<f64>, c: &DMatrix<f64>, d: &DVector<f64>) -> (DVector<f64>, f64) {
    let n = h.nrows();
    let m = c.nrows();
    let scale = 1.0 + d.amax() + g.amax();
    for k in 0..=n.min(m) {
        for set in subsets(m, k) {
            let dim = n + k;
            let mut kkt = DMatrix::zeros(dim, dim);
            let mut rhs = DVector::zeros(dim);
            kkt.view_mut((0, 0), (n, n)).copy_from(h);
            for i in 0..n {
                rhs[i] = -g[i];
            }
            for (a, &r) in set.iter().enumerate() {
                for j in 0..n {
                    kkt[(n + a, j)] = c[(r, j)];
                    kkt[(j, n + a)] = c[(r, j)];
                }
                rhs[n + a] = d[r];
            }
            let Ok(sol) = kkt.clone().svd(true, true).solve(&rhs, 1e-10) else { continue };
            if (&kkt * &sol - &rhs).amax() > 1e-8 * scale {
                continue;
            }
            let u = sol.rows(0, n).into_owned();
            if (0..k).any(|a| sol[n + a] < -1e-9 * scale) || (c * &u - d).iter().any(|v| *v > 1e-9 * scale) {
                continue;
            }
            let obj = 0.5 * u.dot(&(h * &u)) + g.dot(&u);
            return (u, obj);
        }
    }
    panic!("no KKT point among the active sets");
}

pub fn study_with_horizon(k: usize) -> StudyConfig {
    let mut s = reference_study();
    s.controller.horizon = k;
    s.controller.update_period = k.min(s.controller.update_period);
    s
}

pub fn reference_demand(study: &StudyConfig) -> DemandProfile {
    PeakShape::default().generate(study.day_length()).unwrap()
}

pub fn uncontrolled_record(study: &StudyConfig, demand: &DemandProfile) -> IterationRecord {
    let cfg = &study.highway;
    let traj = simulate(cfg, demand, |_, _| None, PlantState::empty(cfg), 0, study.day_length()).unwrap();
    IterationRecord::from_trajectory(0, &traj, cfg).unwrap()
}

pub fn stage_value(o: &StageObjective, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
    let xs: f64 = (0..x.len()).map(|i| 0.5 * o.quad_x[i] * x[i] * x[i] + o.lin_x[i] * x[i]).sum();
    let us: f64 = (0..u.len()).map(|i| 0.5 * o.quad_u[i] * u[i] * u[i] + o.lin_u[i] * u[i]).sum();
    xs + us
}

pub struct LearningCase {
    pub study: StudyConfig,
    pub lifted: LiftedQP,
    pub prev: RecordWindow,
}

/// A window of an uncontrolled day replayed as the previous day, planned
/// with an underestimated split ratio.
pub fn learning_case(k: usize, alpha: f64) -> LearningCase {
    let mut study = study_with_horizon(k);
    study.controller.ilc_step = alpha;
    let cfg = &study.highway;
    let demand = reference_demand(&study);
    let record = uncontrolled_record(&study, &demand);
    let k0 = 1200;
    let prev = record.window(k0, k, cfg).unwrap();
    let beta_es = 0.8 * cfg.station.split_ratio;
    let est = Estimates { beta: beta_es, delta_steps: cfg.station.service_delay_steps, demand: DemandProfile::new(record.upstream_demand.clone()).unwrap() };
    let w = HorizonWindow {
        start_step: k0,
        length: k,
        initial_state: prev.states[0].clone(),
        service_flows: prev.service_flows.clone(),
        station_inflow_at_start: beta_es * prev.prev_exit_cell_outflow,
    };
    let lifted = build_lifted(cfg, &study.controller, &est, &w).unwrap();
    LearningCase { study, lifted, prev }
}

/// Jacobian of the stacked states with respect to the stacked inputs, built
/// column by column from the step oracle.
pub fn oracle_jacobian(cfg: &HighwayConfig, beta: f64, k: usize) -> DMatrix<f64> {
    let nx1 = cfg.num_cells() + 2;
    let n_u = k * nx1;
    let mut jac = DMatrix::zeros((k + 1) * nx1, n_u);
    let zeros = vec![0.0; k];
    for c in 0..n_u {
        let mut u = vec![0.0; n_u];
        u[c] = 1.0;
        let xs = oracle_states(cfg, beta, &vec![0.0; nx1], 0.0, &u, &zeros);
        for (r, v) in xs.iter().flatten().enumerate() {
            jac[(r, c)] = *v;
        }
    }
    jac
}
