//! Closed-loop simulation of one day.

use std::str::FromStr;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::plan::{ilc_plan, mpc_plan};
use super::planner::PlanResult;
use super::record::IterationRecord;
use crate::config::StudyConfig;
use crate::ctms::{self, PlantState, Trajectory};
use crate::demand::DemandProfile;
use crate::error::{Error, Result};
use crate::lifted::{build_lifted, Estimates, HorizonWindow};
use crate::qp::{QpSolver, SolveStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Uncontrolled,
    /// Receding-horizon control with the estimated parameters.
    MpcEst,
    /// Receding-horizon control with the true parameters.
    MpcGt,
    /// Learning control from the previous day's record.
    Ilc,
}

impl ControllerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ControllerKind::Uncontrolled => "uncontrolled",
            ControllerKind::MpcEst => "mpc_est",
            ControllerKind::MpcGt => "mpc_gt",
            ControllerKind::Ilc => "ilc",
        }
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControllerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncontrolled" => Ok(ControllerKind::Uncontrolled),
            "mpc_est" => Ok(ControllerKind::MpcEst),
            "mpc_gt" => Ok(ControllerKind::MpcGt),
            "ilc" => Ok(ControllerKind::Ilc),
            other => Err(Error::config(format!("unknown controller `{other}` (uncontrolled, mpc_est, mpc_gt, ilc)"))),
        }
    }
}

/// One solved planning window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanLogEntry {
    pub day: usize,
    pub window_start: usize,
    pub controller: ControllerKind,
    pub status: SolveStatus,
    pub iterations: usize,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub max_violation: f64,
    pub softened: bool,
    pub previous_day_extrapolated: bool,
    pub tight_pairs: usize,
    pub tight: usize,
    /// Metering command applied at the first step of the window.
    pub applied_metering: f64,
    pub solve_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct DayOutcome {
    pub trajectory: Trajectory,
    pub record: IterationRecord,
    pub plans: Vec<PlanLogEntry>,
}

/// Everything a day needs besides the controller choice.
#[derive(Clone, Copy)]
pub struct DaySetup<'a> {
    pub study: &'a StudyConfig,
    /// The demand that actually arrives.
    pub demand: &'a DemandProfile,
    /// What the controller believes; ignored by the ground-truth controller.
    pub estimates: &'a Estimates,
    pub solver: &'a dyn QpSolver,
}

/// Steps at which a new plan is computed: t_s, t_s + p, ... before t_e.
pub fn window_starts(study: &StudyConfig) -> Vec<usize> {
    let e = &study.experiment;
    (e.peak_start..e.peak_end).step_by(study.controller.update_period).collect()
}

/// Service flows the controller expects over [k0, k0+K): the measured
/// station inflow delayed by `delay`, zero before the day started.
fn expected_service_flows(station_inflows: &[f64], k0: usize, horizon: usize, delay: usize) -> Vec<f64> {
    (k0..k0 + horizon)
        .map(|k| k.checked_sub(delay).and_then(|i| station_inflows.get(i).copied()).unwrap_or(0.0))
        .collect()
}

/// Demand profile of a record, indexed by absolute step.
fn recorded_demand(record: &IterationRecord) -> Result<DemandProfile> {
    let mut values = vec![0.0; record.start_step];
    values.extend_from_slice(&record.upstream_demand);
    DemandProfile::new(values)
}

/// Simulate one day from an empty stretch. Before t_s and from t_e on the
/// ramp is not metered; in between the chosen controller replans every p steps
/// and its first p ramp flows are applied as the metering command.
pub fn run_day(setup: &DaySetup<'_>, kind: ControllerKind, day: usize, prev: Option<&IterationRecord>) -> Result<DayOutcome> {
    let study = setup.study;
    let cfg = &study.highway;
    let ctrl = &study.controller;
    let (t_s, t_e) = (study.experiment.peak_start, study.experiment.peak_end);
    let horizon = ctrl.horizon;
    let day_length = study.day_length();
    let nx1 = cfg.num_cells() + 2;

    let truth = Estimates::exact(cfg, setup.demand);
    let believed = match kind {
        ControllerKind::MpcGt => &truth,
        _ => setup.estimates,
    };
    believed.validate()?;
    let prev_demand = match (kind, prev) {
        (ControllerKind::Ilc, None) => {
            return Err(Error::MissingData(
                "the learning controller needs the previous day's record; run day 0 with mpc_est".into(),
            ))
        }
        (ControllerKind::Ilc, Some(p)) => {
            p.validate(cfg)?;
            Some(recorded_demand(p)?)
        }
        _ => None,
    };
    let starts = window_starts(study);

    let mut state = PlantState::empty(cfg);
    let mut states = Vec::with_capacity(day_length + 1);
    let mut outputs = Vec::with_capacity(day_length);
    let mut station_inflows: Vec<f64> = Vec::with_capacity(day_length);
    let mut plans = Vec::new();
    let mut metering: Vec<Option<f64>> = vec![None; day_length];
    states.push(state.clone());
    let mut next_window = 0;

    for k in 0..day_length {
        if kind != ControllerKind::Uncontrolled && next_window < starts.len() && starts[next_window] == k {
            next_window += 1;
            let window = HorizonWindow {
                start_step: k,
                length: horizon,
                initial_state: state.state_vector(),
                service_flows: expected_service_flows(&station_inflows, k, horizon, believed.delta_steps),
                station_inflow_at_start: believed.beta * state.prev_exit_cell_outflow,
            };
            let (plan, lifted, extrapolated) = match (kind, prev, &prev_demand) {
                (ControllerKind::Ilc, Some(p), Some(pd)) => {
                    let prev_window = p.window(k, horizon, cfg)?;
                    let est = Estimates { beta: believed.beta, delta_steps: believed.delta_steps, demand: pd.clone() };
                    let window = HorizonWindow { service_flows: prev_window.service_flows.clone(), ..window };
                    let lifted = build_lifted(cfg, ctrl, &est, &window)?;
                    (ilc_plan(&lifted, &prev_window, ctrl, setup.solver)?, lifted, prev_window.extrapolated)
                }
                _ => {
                    let lifted = build_lifted(cfg, ctrl, believed, &window)?;
                    (mpc_plan(&lifted, ctrl, setup.solver)?, lifted, false)
                }
            };
            let hold_end = (k + ctrl.update_period).min(t_e);
            for (m, slot) in metering[k..hold_end].iter_mut().enumerate() {
                *slot = Some(plan.ramp_flow(&lifted, m));
            }
            plans.push(log_entry(day, k, kind, &plan, extrapolated, metering[k].unwrap_or(0.0)));
            debug!(
                "day {day} window {k}: {:?} after {} iterations, tightness {:.3}",
                plan.solution.status,
                plan.solution.iterations,
                plan.tightness.fraction()
            );
        }
        let (next, out) = ctms::step(&state, setup.demand.at(k), metering[k], cfg, k)?;
        station_inflows.push(out.station_inflow);
        states.push(next.clone());
        outputs.push(out);
        state = next;
    }
    debug_assert!(states.iter().all(|s| s.state_vector().len() == nx1));
    info!("day {day} ({kind}) done: {} windows, t_s {t_s}, t_e {t_e}", plans.len());
    let trajectory = Trajectory { start_step: 0, states, outputs };
    let record = IterationRecord::from_trajectory(day, &trajectory, cfg)?;
    Ok(DayOutcome { trajectory, record, plans })
}

fn log_entry(day: usize, k: usize, kind: ControllerKind, plan: &PlanResult, extrapolated: bool, applied: f64) -> PlanLogEntry {
    PlanLogEntry {
        day,
        window_start: k,
        controller: kind,
        status: plan.solution.status,
        iterations: plan.solution.iterations,
        objective: plan.solution.objective,
        primal_residual: plan.solution.primal_residual,
        dual_residual: plan.solution.dual_residual,
        max_violation: plan.max_violation,
        softened: plan.softened,
        previous_day_extrapolated: extrapolated,
        tight_pairs: plan.tightness.pairs,
        tight: plan.tightness.tight,
        applied_metering: applied,
        solve_seconds: plan.solve_seconds,
    }
}

/// Write the plan log as CSV.
pub fn write_plan_log<W: std::io::Write>(entries: &[PlanLogEntry], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for e in entries {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}
