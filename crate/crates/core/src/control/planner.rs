//! Stage-wise sparse form of the window program.
//!
//! Instead of eliminating the states through the dense map `M`, the planner
//! keeps `X`, `U` and the in-horizon station inflows `S` as variables tied by
//! the per-step balance equations. The feasible set and the optimum in `U`
//! are the same as for the condensed program; the KKT systems stay sparse.
//!
//! ```text
//! X(0)   = x0 + h(0)                 S(0) = s0
//! X(m+1) = X(m) + B U(m) + C S(m) + E phi(m) + h(m+1) - h(m)
//! S(m+1) = beta (S(m) + phi_{l+1}(m))
//! ```
//!
//! `h` is an additive state correction (zero for the receding-horizon
//! controller, the previous day's model mismatch for the learning one).

use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::config::SolverKind;
use crate::error::{Error, Result};
use crate::lifted::{LiftedQP, RowFamily};
use crate::qp::{csr_from_triplets, AdmmSolver, InteriorPointSolver, QpProblem, QpSolution, QpSolver, SolveStatus};

/// Quadratic-plus-linear objective, diagonal in both blocks.
#[derive(Debug, Clone)]
pub struct StageObjective {
    pub quad_x: Vec<f64>,
    pub lin_x: Vec<f64>,
    pub quad_u: Vec<f64>,
    pub lin_u: Vec<f64>,
}

/// One window program in stage-wise form.
#[derive(Debug, Clone)]
pub struct StagedProgram<'a> {
    pub lifted: &'a LiftedQP,
    /// Service-to-queue flows entering the balance equations.
    pub service_flows: Vec<f64>,
    pub correction: Option<Vec<f64>>,
    pub objective: StageObjective,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TightnessReport {
    /// (interface, step) pairs of ordinary interfaces examined.
    pub pairs: usize,
    /// Pairs whose planned flow equals the smallest of its bounds.
    pub tight: usize,
}

impl TightnessReport {
    pub fn fraction(&self) -> f64 {
        if self.pairs == 0 {
            1.0
        } else {
            self.tight as f64 / self.pairs as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlanResult {
    pub states: Vec<f64>,
    pub inputs: Vec<f64>,
    pub solution: QpSolution,
    /// The queue bound had to be softened to obtain a feasible program.
    pub softened: bool,
    pub solve_seconds: f64,
    pub tightness: TightnessReport,
    /// Largest violation of the built rows and sign constraints.
    pub max_violation: f64,
}

impl PlanResult {
    /// Planned ramp flow for step `m` of the window, clipped at zero.
    pub fn ramp_flow(&self, lifted: &LiftedQP, m: usize) -> f64 {
        self.inputs[lifted.u_index(m, lifted.dynamics.num_cells + 1)].max(0.0)
    }
}

pub fn make_solver(kind: SolverKind) -> Box<dyn QpSolver> {
    match kind {
        SolverKind::InteriorPoint => Box::new(InteriorPointSolver::default()),
        SolverKind::Admm => Box::new(AdmmSolver::default()),
    }
}

impl StagedProgram<'_> {
    fn var_counts(&self) -> (usize, usize, usize) {
        (self.lifted.n_x(), self.lifted.n_u(), self.lifted.horizon)
    }

    /// Assemble the sparse program; with `soft_penalty`, queue-capacity rows
    /// receive a penalized nonnegative slack and the station content may dip
    /// below zero.
    pub fn assemble(&self, soft_penalty: Option<f64>) -> Result<QpProblem> {
        let q = self.lifted;
        let dynm = &q.dynamics;
        let n = dynm.num_cells;
        let nx1 = n + 2;
        let (n_x, n_u, k) = self.var_counts();
        if self.service_flows.len() != k {
            return Err(Error::Dimension("service flows do not match the horizon".into()));
        }
        if let Some(h) = &self.correction {
            if h.len() != n_x {
                return Err(Error::Dimension("state correction does not match the state stack".into()));
            }
        }
        let o = &self.objective;
        if o.quad_x.len() != n_x || o.lin_x.len() != n_x || o.quad_u.len() != n_u || o.lin_u.len() != n_u {
            return Err(Error::Dimension("objective does not match the variable stack".into()));
        }
        let queue_rows: Vec<usize> = q.rows.iter().enumerate().filter(|(_, t)| t.family == RowFamily::QueueCapacity).map(|(r, _)| r).collect();
        let n_slack = if soft_penalty.is_some() { queue_rows.len() } else { 0 };
        let xu = |c: usize| n_x + c;
        let xs = |m: usize| n_x + n_u + m;
        let xsl = |r: usize| n_x + n_u + k + r;
        let nv = n_x + n_u + k + n_slack;

        let mut p = Vec::new();
        let mut lin = vec![0.0; nv];
        for i in 0..n_x {
            if o.quad_x[i] != 0.0 {
                p.push((i, i, o.quad_x[i]));
            }
            lin[i] = o.lin_x[i];
        }
        for i in 0..n_u {
            if o.quad_u[i] != 0.0 {
                p.push((xu(i), xu(i), o.quad_u[i]));
            }
            lin[xu(i)] = o.lin_u[i];
        }
        if let Some(w) = soft_penalty {
            for r in 0..n_slack {
                lin[xsl(r)] = w;
            }
        }

        let h = |i: usize| self.correction.as_ref().map_or(0.0, |h| h[i]);
        let t = dynm.sample_time_h;
        let (ell, j) = (dynm.exit_cell, dynm.merge_cell);
        let mut eq = Vec::new();
        let mut b = Vec::new();
        for c in 0..nx1 {
            eq.push((b.len(), c, 1.0));
            b.push(q.initial_state[c] + h(c));
        }
        eq.push((b.len(), xs(0), 1.0));
        b.push(q.station_inflow_at_start);
        for m in 0..k {
            let x_now = |c: usize| m * nx1 + c;
            let x_next = |c: usize| (m + 1) * nx1 + c;
            let u = |c: usize| xu(m * nx1 + c);
            for c in 0..nx1 {
                let r = b.len();
                eq.push((r, x_next(c), 1.0));
                eq.push((r, x_now(c), -1.0));
                let mut rhs = h(x_next(c)) - h(x_now(c));
                if c < n {
                    let g = t / dynm.lengths[c];
                    eq.push((r, u(c), -g));
                    eq.push((r, u(c + 1), g));
                    if c == j {
                        eq.push((r, u(n + 1), -g));
                    }
                    if c == ell {
                        eq.push((r, xs(m), g));
                    }
                } else if c == n {
                    eq.push((r, xs(m), -t));
                    rhs -= t * self.service_flows[m];
                } else {
                    eq.push((r, u(n + 1), t));
                    rhs += t * self.service_flows[m];
                }
                b.push(rhs);
            }
            if m + 1 < k {
                let r = b.len();
                eq.push((r, xs(m + 1), 1.0));
                eq.push((r, xs(m), -dynm.beta));
                eq.push((r, u(dynm.exit_flow_input()), -dynm.beta));
                b.push(0.0);
            }
        }

        let mut ineq = Vec::with_capacity(q.ineq_state.nnz() + q.ineq_input.nnz() + n_slack);
        for (v, (r, c)) in q.ineq_state.iter() {
            ineq.push((r, c, *v));
        }
        for (v, (r, c)) in q.ineq_input.iter() {
            ineq.push((r, xu(c), *v));
        }
        for (s, &r) in queue_rows.iter().enumerate().take(n_slack) {
            ineq.push((r, xsl(s), -1.0));
        }
        let mut nonneg = vec![false; nv];
        for (i, flag) in nonneg.iter_mut().enumerate().take(n_x).skip(nx1) {
            *flag = !(soft_penalty.is_some() && i % nx1 == n);
        }
        for flag in nonneg.iter_mut().skip(n_x).take(n_u) {
            *flag = true;
        }
        for flag in nonneg.iter_mut().skip(n_x + n_u + k) {
            *flag = true;
        }
        QpProblem::new(
            csr_from_triplets(nv, nv, &p),
            lin,
            csr_from_triplets(b.len(), nv, &eq),
            b,
            csr_from_triplets(q.rows.len(), nv, &ineq),
            q.ineq_rhs.iter().copied().collect(),
            nonneg,
        )
    }

    /// Solve; on a detected infeasibility retry once with the softened queue
    /// bound. The report counts rows active within `tightness_tol` times capacity.
    pub fn solve(&self, solver: &dyn QpSolver, soft_penalty: f64, tightness_tol: f64) -> Result<PlanResult> {
        let (n_x, n_u, _) = self.var_counts();
        let started = Instant::now();
        let hard = self.assemble(None)?;
        let mut sol = solver.solve(&hard, None)?;
        let mut softened = false;
        if sol.status != SolveStatus::Optimal {
            warn!(
                "window at step {}: {} returned {:?}; retrying with a softened queue bound",
                self.lifted.start_step,
                solver.name(),
                sol.status
            );
            let soft = self.assemble(Some(soft_penalty))?;
            sol = solver.solve(&soft, None)?;
            softened = true;
        }
        if sol.status != SolveStatus::Optimal {
            return Err(Error::Solver(format!(
                "window at step {}: {} finished with {:?} (primal residual {:e}, dual residual {:e})",
                self.lifted.start_step,
                solver.name(),
                sol.status,
                sol.primal_residual,
                sol.dual_residual
            )));
        }
        let states = sol.z[..n_x].to_vec();
        let inputs = sol.z[n_x..n_x + n_u].to_vec();
        let max_violation = violation(self.lifted, &states, &inputs, softened);
        let scale = 1.0 + self.lifted.ineq_rhs.amax();
        if max_violation > FEASIBILITY_TOL * scale {
            return Err(Error::Solver(format!(
                "window at step {}: plan violates its constraints by {max_violation:e}",
                self.lifted.start_step
            )));
        }
        let tightness = tightness(self.lifted, &states, &inputs, tightness_tol);
        Ok(PlanResult {
            states,
            inputs,
            solution: sol,
            softened,
            solve_seconds: started.elapsed().as_secs_f64(),
            tightness,
            max_violation,
        })
    }
}

/// Relative tolerance of the per-solve feasibility check.
pub const FEASIBILITY_TOL: f64 = 1e-5;

fn violation(lifted: &LiftedQP, states: &[f64], inputs: &[f64], softened: bool) -> f64 {
    let n = lifted.dynamics.num_cells;
    let nx1 = n + 2;
    let x = nalgebra::DVector::from_column_slice(states);
    let u = nalgebra::DVector::from_column_slice(inputs);
    let values = lifted.constraint_values(&x, &u);
    let rows = lifted
        .rows
        .iter()
        .zip(values.iter())
        .filter(|(t, _)| !(softened && t.family == RowFamily::QueueCapacity))
        .map(|(_, v)| *v);
    let signs = states
        .iter()
        .enumerate()
        .skip(nx1)
        .filter(|(i, _)| !(softened && i % nx1 == n))
        .map(|(_, v)| -v)
        .chain(inputs.iter().map(|v| -v));
    rows.chain(signs).fold(0.0, f64::max)
}

/// Count ordinary interfaces with positive planned flow that sits on one of
/// its bounds, i.e. where the relaxation reproduces the min-of-demand-and-supply
/// flow. Activity and positivity are both judged against `tol` times the
/// capacity bounding the interface.
pub fn tightness(lifted: &LiftedQP, states: &[f64], inputs: &[f64], tol: f64) -> TightnessReport {
    use std::collections::BTreeMap;
    let x = nalgebra::DVector::from_column_slice(states);
    let u = nalgebra::DVector::from_column_slice(inputs);
    let values = lifted.constraint_values(&x, &u);
    let mut slack: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut capacity: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (r, tag) in lifted.rows.iter().enumerate() {
        if !tag.family.is_simple_interface() {
            continue;
        }
        let key = (tag.interface, tag.step);
        let e = slack.entry(key).or_insert(f64::INFINITY);
        *e = e.min(-values[r]);
        let cap = lifted.ineq_rhs[r];
        match tag.family {
            RowFamily::Capacity => {
                capacity.insert(key, cap);
            }
            RowFamily::UpstreamCapacity => {
                capacity.entry(key).or_insert(cap);
            }
            _ => {}
        }
    }
    let mut report = TightnessReport { pairs: 0, tight: 0 };
    for (key @ (i, m), s) in &slack {
        let scale = tol * capacity.get(key).copied().unwrap_or(1.0);
        if inputs[lifted.u_index(*m, *i)] <= scale {
            continue;
        }
        report.pairs += 1;
        if *s <= scale {
            report.tight += 1;
        }
    }
    report
}
