//! Objectives of the two window programs and their solves.

use nalgebra::DVector;

use super::planner::{PlanResult, StageObjective, StagedProgram};
use super::record::RecordWindow;
use crate::config::ControllerConfig;
use crate::error::{Error, Result};
use crate::lifted::LiftedQP;
use crate::qp::QpSolver;

/// Approximate gradient F of the day's cost at the previous input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub values: DVector<f64>,
}

/// (a/2) ||x - x_r||_Q^2 + c_x' x - c_u' u in stage-wise form.
pub fn mpc_objective(lifted: &LiftedQP) -> StageObjective {
    let a = lifted.quad_scale;
    let quad_x: Vec<f64> = lifted.quad_weight.iter().map(|q| a * q).collect();
    let lin_x = (0..lifted.n_x())
        .map(|i| lifted.lin_state_cost[i] - quad_x[i] * lifted.state_reference[i])
        .collect();
    StageObjective {
        quad_x,
        lin_x,
        quad_u: vec![0.0; lifted.n_u()],
        lin_u: lifted.lin_input_cost.iter().map(|c| -c).collect(),
    }
}

/// Receding-horizon plan with the parameters `lifted` was built from.
pub fn mpc_plan(lifted: &LiftedQP, ctrl: &ControllerConfig, solver: &dyn QpSolver) -> Result<PlanResult> {
    let program = StagedProgram {
        lifted,
        service_flows: lifted.service_flows.iter().copied().collect(),
        correction: None,
        objective: mpc_objective(lifted),
    };
    program.solve(solver, ctrl.soft_queue_penalty, ctrl.tightness_tol)
}

/// F = a M' Q (x_{d-1} - x_r) + M' c_x - c_u.
pub fn gradient_estimate(lifted: &LiftedQP, prev_states: &[f64]) -> Result<GradientEstimate> {
    if prev_states.len() != lifted.n_x() {
        return Err(Error::Dimension("previous states do not match the state stack".into()));
    }
    let x = DVector::from_column_slice(prev_states);
    let w = (x - &lifted.state_reference).component_mul(&lifted.quad_weight) * lifted.quad_scale + &lifted.lin_state_cost;
    Ok(GradientEstimate { values: lifted.state_map.tr_mul(&w) - &lifted.lin_input_cost })
}

/// Ridge added to W = M' Q M: `relative` times its mean diagonal.
pub fn preconditioner_ridge(lifted: &LiftedQP, relative: f64) -> f64 {
    let m = &lifted.state_map;
    let n_u = m.ncols();
    if n_u == 0 {
        return 0.0;
    }
    let trace: f64 = (0..n_u)
        .map(|c| m.column(c).iter().zip(lifted.quad_weight.iter()).map(|(v, q)| q * v * v).sum::<f64>())
        .sum();
    relative * trace / n_u as f64
}

/// Pieces of the learning program that depend on the previous day.
#[derive(Debug, Clone)]
pub struct LearningTerms {
    /// h = x_{d-1} - M u_{d-1} - offset_{d-1}.
    pub correction: Vec<f64>,
    /// State stack reached by v = u_{d-1}: x_{d-1} + offset_d - offset_{d-1}.
    pub anchor: Vec<f64>,
    pub gradient: GradientEstimate,
    pub ridge: f64,
}

/// `lifted` must carry the estimated dynamics, today's measured start and the
/// previous day's demand and service flows over the same absolute steps.
pub fn learning_terms(lifted: &LiftedQP, prev: &RecordWindow, ctrl: &ControllerConfig) -> Result<LearningTerms> {
    if prev.start_step != lifted.start_step || prev.length != lifted.horizon {
        return Err(Error::Dimension(format!(
            "previous-day window [{}, +{}] does not line up with the planning window [{}, +{}]",
            prev.start_step, prev.length, lifted.start_step, lifted.horizon
        )));
    }
    let x_prev = prev.stacked_states();
    let u_prev = prev.stacked_inputs();
    if x_prev.len() != lifted.n_x() || u_prev.len() != lifted.n_u() {
        return Err(Error::Dimension("previous-day window does not match the stretch".into()));
    }
    let dynm = &lifted.dynamics;
    let s0_prev = dynm.beta * prev.prev_exit_cell_outflow;
    let predicted = dynm.rollout(&prev.states[0], s0_prev, &u_prev, &vec![0.0; lifted.horizon]);
    let correction: Vec<f64> = x_prev.iter().zip(&predicted).map(|(x, p)| x - p).collect();
    let offset_prev = dynm.offset(&prev.states[0], s0_prev, lifted.horizon);
    let anchor = (0..lifted.n_x()).map(|i| x_prev[i] + lifted.offset[i] - offset_prev[i]).collect();
    Ok(LearningTerms {
        correction,
        anchor,
        gradient: gradient_estimate(lifted, &x_prev)?,
        ridge: preconditioner_ridge(lifted, ctrl.preconditioner_ridge),
    })
}

/// 1/2 ||v - u_{d-1}||_W^2 + alpha v' F with W = M' Q M + ridge I, written
/// through the states as 1/2 ||X - anchor||_Q^2 + ridge/2 ||U - u_{d-1}||^2 + alpha F' U.
pub fn learning_objective(lifted: &LiftedQP, prev: &RecordWindow, terms: &LearningTerms, alpha: f64) -> StageObjective {
    let q = &lifted.quad_weight;
    let u_prev = prev.stacked_inputs();
    StageObjective {
        quad_x: q.iter().copied().collect(),
        lin_x: (0..lifted.n_x()).map(|i| -q[i] * terms.anchor[i]).collect(),
        quad_u: vec![terms.ridge; lifted.n_u()],
        lin_u: (0..lifted.n_u()).map(|i| alpha * terms.gradient.values[i] - terms.ridge * u_prev[i]).collect(),
    }
}

/// Learning update for one window.
pub fn ilc_plan(lifted: &LiftedQP, prev: &RecordWindow, ctrl: &ControllerConfig, solver: &dyn QpSolver) -> Result<PlanResult> {
    let terms = learning_terms(lifted, prev, ctrl)?;
    let program = StagedProgram {
        lifted,
        service_flows: vec![0.0; lifted.horizon],
        objective: learning_objective(lifted, prev, &terms, ctrl.ilc_step),
        correction: Some(terms.correction),
    };
    program.solve(solver, ctrl.soft_queue_penalty, ctrl.tightness_tol)
}
